"""Fine-grained attack labels and the protocol label spaces built on them."""

from __future__ import annotations

import re
from enum import Enum


class FineLabel(str, Enum):
    RealFace = "RealFace"
    Print = "Print"
    Replay = "Replay"
    FaceSwap = "FaceSwap"
    AttributeEdit = "AttributeEdit"
    VideoDriven = "VideoDriven"
    Adversarial = "Adversarial"

    @property
    def display(self) -> str:
        return _DISPLAY[self]

    @property
    def is_physical(self) -> bool:
        return self in (FineLabel.Print, FineLabel.Replay)

    @classmethod
    def parse(cls, text: "str | FineLabel") -> "FineLabel":
        """Resolve a label from any common spelling.

        Case, spaces, hyphens and underscores are ignored, so ``"Real Face"``,
        ``"real_face"`` and ``"RealFace"`` all resolve to :attr:`RealFace`.
        """
        if isinstance(text, FineLabel):
            return text
        key = label_key(text)
        try:
            return _BY_KEY[key]
        except KeyError:
            raise ValueError(f"unknown fine-grained label: {text!r}") from None


_DISPLAY = {
    FineLabel.RealFace: "Real Face",
    FineLabel.Print: "Print",
    FineLabel.Replay: "Replay",
    FineLabel.FaceSwap: "FaceSwap",
    FineLabel.AttributeEdit: "Attribute-Edit",
    FineLabel.VideoDriven: "Video-Driven",
    FineLabel.Adversarial: "Adversarial",
}


def label_key(text: str) -> str:
    """Casefolded alphanumeric skeleton of a label, used for lenient lookup."""
    return re.sub(r"[^0-9a-z]", "", str(text).casefold())


_BY_KEY = {label_key(m.value): m for m in FineLabel}
_BY_KEY["bonafide"] = FineLabel.RealFace
_BY_KEY["real"] = FineLabel.RealFace


class Protocol(str, Enum):
    """Evaluation protocols: binary, coarse (physical/digital) and fine-grained."""

    P1 = "P1"
    P2 = "P2"
    P3 = "P3"

    @property
    def labels(self) -> tuple[str, ...]:
        return _SPACES[self]

    @classmethod
    def parse(cls, value: "str | int | Protocol") -> "Protocol":
        if isinstance(value, Protocol):
            return value
        text = str(value).strip().upper()
        if not text.startswith("P"):
            text = "P" + text
        try:
            return cls(text)
        except ValueError:
            raise ValueError(f"unknown protocol: {value!r} (expected 1, 2 or 3)") from None


REAL = "RealFace"
ATTACK = "Attack"
PHYSICAL = "Physical"
DIGITAL = "Digital"

_SPACES = {
    Protocol.P1: (REAL, ATTACK),
    Protocol.P2: (REAL, PHYSICAL, DIGITAL),
    Protocol.P3: tuple(m.value for m in FineLabel),
}


def coarsen(label: "FineLabel | str", protocol: "Protocol | str | int") -> str:
    """Map a fine label into the label space of ``protocol``."""
    label = FineLabel.parse(label)
    protocol = Protocol.parse(protocol)
    if protocol is Protocol.P3:
        return label.value
    if label is FineLabel.RealFace:
        return REAL
    if protocol is Protocol.P1:
        return ATTACK
    return PHYSICAL if label.is_physical else DIGITAL
