"""Accuracy, format and knowledge-graph consistency rewards with group-relative advantages."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Collection, Mapping, Sequence

import numpy as np

from .graph import FaceAttackGraph, Relation, SupportSets, attack_node_for_label, support_sets
from .grounding import (
    DEFAULT_TAGS,
    GroundingMode,
    GroundingReport,
    ParsedResponse,
    TagConfig,
    VerifierClient,
    ground,
    parse_response,
)
from .labels import FineLabel

__all__ = [
    "RewardWeights",
    "LabelNormalizer",
    "RewardBreakdown",
    "GroupScore",
    "accuracy_reward",
    "format_reward",
    "kg_reward",
    "total_reward",
    "make_breakdown",
    "group_advantages",
    "score_group",
    "load_reward_config",
]


@dataclass(frozen=True)
class RewardWeights:
    """Reward mixing weights, conflict penalty and the two stabilising epsilons."""

    lambda_acc: float = 0.5
    lambda_fmt: float = 0.1
    lambda_kg: float = 0.4
    eta: float = 0.5
    epsilon_den: float = 1e-8
    epsilon_adv: float = 1e-6

    def __post_init__(self) -> None:
        for name in ("lambda_acc", "lambda_fmt", "lambda_kg", "eta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        for name in ("epsilon_den", "epsilon_adv"):
            v = getattr(self, name)
            if not math.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be finite and positive, got {v}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "RewardWeights":
        known = {k: float(d[k]) for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


_TRAILING_PUNCT = re.compile(r"[\s.,;:!?\"'`)\]]+$")


class LabelNormalizer:
    """Maps free-form answer strings onto fine-grained labels.

    Normalisation lowercases, trims, collapses internal whitespace and strips
    trailing punctuation. Common spellings of every fine label are built in
    (``"Real Face"``, ``"realface"``, ``"bona fide"`` ...); ``synonyms`` adds
    more, keyed by surface form and valued by fine label.
    """

    def __init__(self, synonyms: Mapping[str, str] | None = None, builtin: bool = True):
        self._map: dict[str, str] = {}
        if builtin:
            for lab in FineLabel:
                for form in {lab.value, lab.display, lab.display.replace("-", " ")}:
                    self._map[self.normalize(form)] = lab.display
            self._map["bona fide"] = FineLabel.RealFace.display
        for surface, label in (synonyms or {}).items():
            try:
                canonical = FineLabel.parse(label).display
            except ValueError:
                raise ValueError(f"synonym {surface!r} maps to unknown label {label!r}") from None
            self._map[self.normalize(surface)] = canonical

    @staticmethod
    def normalize(text: str) -> str:
        text = " ".join(str(text).casefold().split())
        return _TRAILING_PUNCT.sub("", text)

    def resolve(self, text: str) -> str:
        """Normalised canonical form of ``text``; unmapped strings stay as normalised."""
        key = self.normalize(text)
        mapped = self._map.get(key)
        return self.normalize(mapped) if mapped is not None else key

    def matches(self, answer: str, truth: str) -> bool:
        return self.resolve(answer) == self.resolve(truth)


@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: int
    r_fmt: int
    r_match: float
    r_conflict: float
    r_kg: float
    total: float

    def to_dict(self) -> dict:
        return {
            "r_acc": self.r_acc,
            "r_fmt": self.r_fmt,
            "r_match": self.r_match,
            "r_conflict": self.r_conflict,
            "r_kg": self.r_kg,
            "total": self.total,
        }


@dataclass(frozen=True)
class GroupScore:
    breakdowns: tuple[RewardBreakdown, ...]
    mu: float
    sigma: float
    advantages: tuple[float, ...]

    @property
    def totals(self) -> list[float]:
        return [b.total for b in self.breakdowns]

    def to_dict(self) -> dict:
        return {
            "breakdowns": [b.to_dict() for b in self.breakdowns],
            "mu": self.mu,
            "sigma": self.sigma,
            "advantages": list(self.advantages),
        }


def accuracy_reward(answer: str, truth: str, norm: LabelNormalizer | None = None) -> int:
    norm = norm or LabelNormalizer()
    return int(norm.matches(answer, truth))


def format_reward(parsed: ParsedResponse) -> int:
    return int(parsed.format_valid)


def _clip01(x: float) -> float:
    return min(1.0, max(0.0, x))


def kg_reward(
    grounded: GroundingReport | Collection[Relation],
    sets: SupportSets,
    weights: RewardWeights = RewardWeights(),
) -> tuple[float, float, float]:
    """``(r_match, r_conflict, r_kg)`` for a grounded relation set.

    ``r_match`` and ``r_conflict`` are the epsilon-smoothed fractions of the
    supporting and incompatible sets that were grounded; ``r_kg`` is
    ``r_match - eta * r_conflict`` clipped to ``[0, 1]``.
    """
    rels = grounded.relations if isinstance(grounded, GroundingReport) else frozenset(grounded)
    keys = {r.key for r in rels}
    hit_plus = sum(1 for r in sets.s_plus if r.key in keys)
    hit_minus = sum(1 for r in sets.s_minus if r.key in keys)
    eps = weights.epsilon_den
    r_match = hit_plus / (len(sets.s_plus) + eps)
    r_conflict = hit_minus / (len(sets.s_minus) + eps)
    return r_match, r_conflict, _clip01(r_match - weights.eta * r_conflict)


def total_reward(b, w: RewardWeights = RewardWeights()) -> float:
    """Weighted sum of the accuracy, format and KG components of ``b``."""
    return w.lambda_acc * b.r_acc + w.lambda_fmt * b.r_fmt + w.lambda_kg * b.r_kg


def make_breakdown(
    r_acc: int, r_fmt: int, r_match: float, r_conflict: float, w: RewardWeights = RewardWeights()
) -> RewardBreakdown:
    r_kg = _clip01(r_match - w.eta * r_conflict)
    total = w.lambda_acc * r_acc + w.lambda_fmt * r_fmt + w.lambda_kg * r_kg
    return RewardBreakdown(int(r_acc), int(r_fmt), r_match, r_conflict, r_kg, total)


def group_advantages(
    totals: Sequence[float], epsilon_adv: float = 1e-6
) -> tuple[float, float, list[float]]:
    """Group mean, population standard deviation and normalised advantages.

    A group whose totals are all equal gets exactly zero advantages.
    """
    x = np.asarray(totals, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("group_advantages needs a non-empty 1-D sequence of totals")
    if epsilon_adv <= 0:
        raise ValueError("epsilon_adv must be positive")
    if np.all(x == x[0]):
        return float(x[0]), 0.0, [0.0] * x.size
    mu = x.mean()
    centered = x - mu
    sigma = np.sqrt(np.mean(centered**2))
    adv = centered / (sigma + epsilon_adv)
    return float(mu), float(sigma), adv.tolist()


def score_group(
    raws: Sequence[str],
    truth: str,
    g: FaceAttackGraph,
    verifier: VerifierClient | None = None,
    tags: TagConfig = DEFAULT_TAGS,
    norm: LabelNormalizer | None = None,
    w: RewardWeights = RewardWeights(),
    mode: GroundingMode | str | None = None,
) -> GroupScore:
    """Score a group of raw responses to one prompt against the true label.

    Without a verifier, grounding runs pattern-only; with one it defaults to
    verifying only the relations the patterns missed.

    Raises:
        UnknownLabelError: ``truth`` has no attack node in ``g``.
        VerifierError: propagated from grounding.
    """
    if not raws:
        raise ValueError("score_group needs at least one response")
    norm = norm or LabelNormalizer()
    if mode is None:
        mode = GroundingMode.PATTERN_ONLY if verifier is None else GroundingMode.FALLBACK_VERIFIER
    sets = support_sets(g, attack_node_for_label(g, truth))
    breakdowns = []
    for raw in raws:
        parsed = parse_response(raw, tags)
        report = ground(parsed.think, g, verifier, mode)
        r_match, r_conflict, _ = kg_reward(report, sets, w)
        breakdowns.append(
            make_breakdown(accuracy_reward(parsed.answer, truth, norm), format_reward(parsed), r_match, r_conflict, w)
        )
    mu, sigma, adv = group_advantages([b.total for b in breakdowns], w.epsilon_adv)
    return GroupScore(tuple(breakdowns), mu, sigma, tuple(adv))


_CONFIG_KEYS = {"lambda_acc", "lambda_fmt", "lambda_kg", "eta", "epsilon_den", "epsilon_adv", "synonyms"}


def load_reward_config(path: str | Path) -> tuple[RewardWeights, LabelNormalizer]:
    """Read a reward configuration JSON file into weights and a label normaliser."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("reward config must be a JSON object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown reward config keys: {sorted(unknown)}")
    return RewardWeights.from_dict(doc), LabelNormalizer(doc.get("synonyms") or {})
