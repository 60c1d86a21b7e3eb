"""Response parsing and projection of rationale text onto graph relations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol, Sequence

from .graph import FaceAttackGraph, Relation

__all__ = [
    "TagConfig",
    "DEFAULT_TAGS",
    "ParsedResponse",
    "parse_response",
    "render_response",
    "Candidate",
    "VerifierClient",
    "VerifierError",
    "StubVerifier",
    "MatchSource",
    "GroundedRelation",
    "GroundingReport",
    "GroundingMode",
    "pattern_match",
    "ground",
]


@dataclass(frozen=True)
class TagConfig:
    think_open: str = "<think>"
    think_close: str = "</think>"
    answer_open: str = "<answer>"
    answer_close: str = "</answer>"

    def __post_init__(self) -> None:
        tags = (self.think_open, self.think_close, self.answer_open, self.answer_close)
        if not all(isinstance(t, str) and t for t in tags):
            raise ValueError("tag delimiters must be non-empty strings")
        if len(set(tags)) != 4:
            raise ValueError("tag delimiters must be pairwise distinct")


DEFAULT_TAGS = TagConfig()


@dataclass(frozen=True)
class ParsedResponse:
    think: str
    answer: str
    format_valid: bool
    diagnostics: tuple[str, ...] = ()


def _segment(raw: str, open_tag: str, close_tag: str, start: int, stop_at: str | None):
    """First ``open_tag ... close_tag`` at or after ``start``.

    Returns ``(content, open_index, end_index, closed)`` or ``None``. An
    unclosed segment runs to ``stop_at`` (if found) or end of text.
    """
    i = raw.find(open_tag, start)
    if i < 0:
        return None
    body = i + len(open_tag)
    j = raw.find(close_tag, body)
    if j >= 0:
        return raw[body:j].strip(), i, j + len(close_tag), True
    end = raw.find(stop_at, body) if stop_at else -1
    end = len(raw) if end < 0 else end
    return raw[body:end].strip(), i, end, False


def parse_response(raw: str, tags: TagConfig = DEFAULT_TAGS) -> ParsedResponse:
    """Split a raw response into its rationale and answer segments.

    Tag matching is literal and first-occurrence based; nesting is not
    recognised. The response is well-formed only when it holds exactly one
    rationale segment followed by exactly one answer segment with nothing but
    whitespace around them. Malformed input still yields best-effort segments.
    """
    diags: list[str] = []
    counts = {t: raw.count(t) for t in (tags.think_open, tags.think_close, tags.answer_open, tags.answer_close)}

    think_seg = _segment(raw, tags.think_open, tags.think_close, 0, tags.answer_open)
    think = think_seg[0] if think_seg else ""
    if think_seg is None:
        diags.append("missing think segment")
    elif not think_seg[3]:
        diags.append("unclosed think segment")

    answer_start = think_seg[2] if think_seg else 0
    answer_seg = _segment(raw, tags.answer_open, tags.answer_close, answer_start, None)
    if answer_seg is None and answer_start:
        answer_seg = _segment(raw, tags.answer_open, tags.answer_close, 0, None)
    answer = answer_seg[0] if answer_seg else ""
    if answer_seg is None:
        diags.append("missing answer segment")
    elif not answer_seg[3]:
        diags.append("unclosed answer segment")

    for tag, n in counts.items():
        if n > 1:
            diags.append(f"duplicate {tag}")

    valid = not diags and think_seg is not None and answer_seg is not None
    if valid:
        if answer_seg[1] < think_seg[2]:
            diags.append("answer segment precedes or overlaps think segment")
        outside = raw[: think_seg[1]] + raw[think_seg[2] : answer_seg[1]] + raw[answer_seg[2] :]
        if outside.strip():
            diags.append("text outside segments")
        valid = not diags
    return ParsedResponse(think, answer, valid, tuple(diags))


def render_response(think: str, answer: str, tags: TagConfig = DEFAULT_TAGS) -> str:
    return f"{tags.think_open}{think}{tags.think_close}{tags.answer_open}{answer}{tags.answer_close}"


@dataclass(frozen=True)
class Candidate:
    """A relation as presented to a verifier, with display names attached."""

    attack: str
    predicate: str
    feature: str
    attack_name: str
    feature_name: str

    @classmethod
    def from_relation(cls, g: FaceAttackGraph, rel: Relation) -> "Candidate":
        return cls(
            rel.attack,
            rel.predicate,
            rel.feature,
            g.entities[rel.attack].name,
            g.entities[rel.feature].name,
        )

    def to_dict(self) -> dict:
        return {
            "attack": self.attack,
            "predicate": self.predicate,
            "feature": self.feature,
            "attack_name": self.attack_name,
            "feature_name": self.feature_name,
        }


class VerifierClient(Protocol):
    def verify(self, think: str, candidates: Sequence[Candidate]) -> list[bool]:
        """One boolean per candidate, in candidate order."""
        ...


class VerifierError(RuntimeError):
    """A verifier could not answer; ``candidates`` is the batch that failed."""

    def __init__(self, message: str, candidates: Sequence[Candidate] = ()):
        super().__init__(message)
        self.candidates = list(candidates)


class StubVerifier:
    """Deterministic offline verifier.

    By default it confirms a candidate when the relation's predicate string
    occurs in the rationale (case-insensitive). Pass ``rule`` to substitute any
    other pure decision function.
    """

    def __init__(self, rule: Callable[[str, Candidate], bool] | None = None):
        self.rule = rule or (lambda think, c: c.predicate.casefold() in think.casefold())
        self.calls = 0

    def verify(self, think: str, candidates: Sequence[Candidate]) -> list[bool]:
        self.calls += 1
        return [bool(self.rule(think, c)) for c in candidates]


class MatchSource(str, Enum):
    PATTERN = "pattern"
    VERIFIER = "verifier"


class GroundingMode(str, Enum):
    PATTERN_ONLY = "pattern_only"
    FALLBACK_VERIFIER = "fallback_verifier"
    ALWAYS_VERIFIER = "always_verifier"


@dataclass(frozen=True)
class GroundedRelation:
    relation: Relation
    source: MatchSource


@dataclass(frozen=True)
class GroundingReport:
    grounded: tuple[GroundedRelation, ...]
    candidates_checked: int
    verifier_calls: int
    _relations: frozenset = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_relations", frozenset(gr.relation for gr in self.grounded))

    @property
    def relations(self) -> frozenset[Relation]:
        return self._relations

    def source_of(self, rel: Relation) -> MatchSource | None:
        for gr in self.grounded:
            if gr.relation == rel:
                return gr.source
        return None

    def to_dict(self) -> dict:
        return {
            "grounded": [
                {
                    "attack": gr.relation.attack,
                    "predicate": gr.relation.predicate,
                    "feature": gr.relation.feature,
                    "source": gr.source.value,
                }
                for gr in self.grounded
            ],
            "candidates_checked": self.candidates_checked,
            "verifier_calls": self.verifier_calls,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)


def pattern_match(g: FaceAttackGraph, rel: Relation, think: str) -> bool:
    """True when any of the relation's patterns (or its alias fallback) occurs in ``think``."""
    return any(p.search(think) is not None for p in g.compiled_patterns(rel))


def ground(
    think: str,
    g: FaceAttackGraph,
    verifier: VerifierClient | None = None,
    mode: GroundingMode | str = GroundingMode.FALLBACK_VERIFIER,
) -> GroundingReport:
    """Relations of ``g`` evidenced by ``think``.

    A relation is grounded when a pattern matches or the verifier confirms it.
    In ``fallback_verifier`` mode the verifier only sees relations the patterns
    missed; in ``always_verifier`` mode it sees every relation. The verifier can
    only answer for candidates it is given, so the result is always a subset of
    the graph's relations.

    Raises:
        VerifierError: the verifier failed or answered with the wrong length.
    """
    mode = GroundingMode(mode)
    if mode is not GroundingMode.PATTERN_ONLY and verifier is None:
        raise ValueError(f"mode {mode.value!r} requires a verifier")

    by_pattern = [pattern_match(g, r, think) for r in g.relations]
    if mode is GroundingMode.PATTERN_ONLY:
        to_verify = []
    elif mode is GroundingMode.FALLBACK_VERIFIER:
        to_verify = [i for i, hit in enumerate(by_pattern) if not hit]
    else:
        to_verify = list(range(len(g.relations)))

    confirmed: set[int] = set()
    if to_verify:
        batch = [Candidate.from_relation(g, g.relations[i]) for i in to_verify]
        try:
            answers = verifier.verify(think, batch)
        except VerifierError:
            raise
        except Exception as exc:
            raise VerifierError(f"verifier failed: {exc}", batch) from exc
        answers = list(answers)
        if len(answers) != len(batch):
            raise VerifierError(
                f"verifier returned {len(answers)} answers for {len(batch)} candidates", batch
            )
        confirmed = {i for i, ok in zip(to_verify, answers) if bool(ok)}

    grounded = []
    for i, rel in enumerate(g.relations):
        if by_pattern[i]:
            grounded.append(GroundedRelation(rel, MatchSource.PATTERN))
        elif i in confirmed:
            grounded.append(GroundedRelation(rel, MatchSource.VERIFIER))
    return GroundingReport(tuple(grounded), len(g.relations), len(to_verify))
