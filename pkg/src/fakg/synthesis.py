"""Graph-guided QA synthesis over a labelled image manifest.

Each manifest entry goes through: attack node lookup, k-hop ego-subgraph,
skeleton generation, captioning, the structural and fact-conflict filters,
fusion into a question/answer pair, and finally complexity/information pruning.
Generators are pluggable; deterministic stubs are provided for offline runs.
"""

from __future__ import annotations

import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from .graph import (
    FaceAttackGraph,
    Subgraph,
    UnknownLabelError,
    attack_node_for_label,
    ego_subgraph,
)
from .labels import FineLabel, coarsen

log = logging.getLogger(__name__)

__all__ = [
    "ManifestEntry",
    "ManifestError",
    "Skeleton",
    "Caption",
    "FilterVerdict",
    "RejectReason",
    "Provenance",
    "QARecord",
    "AgitRecord",
    "ClientError",
    "GeneratorClients",
    "TemplateSkeletonGenerator",
    "TemplateCaptioner",
    "ConcatFuser",
    "HeuristicJudge",
    "stub_clients",
    "PipelineConfig",
    "PipelineStats",
    "PipelineResult",
    "TripleResolver",
    "synthesize_one",
    "draft_record",
    "fuse_record",
    "structural_filter",
    "logical_flow_filter",
    "pruning_filter",
    "run_pipeline",
    "to_agit_record",
    "read_manifest",
    "write_jsonl",
]


class ManifestError(ValueError):
    pass


class ClientError(RuntimeError):
    """A generator or judge client failed to produce a usable answer."""


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    image_ref: str
    label: str

    def __post_init__(self) -> None:
        if not self.image_ref:
            raise ManifestError(f"sample {self.sample_id!r}: empty image reference")


@dataclass(frozen=True)
class Skeleton:
    question: str
    reasoning_steps: tuple[str, ...] = ()
    cited_triples: tuple[tuple[str, str, str], ...] = ()

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError("skeleton question must be non-empty")
        object.__setattr__(self, "reasoning_steps", tuple(self.reasoning_steps))
        object.__setattr__(self, "cited_triples", tuple(tuple(t) for t in self.cited_triples))

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "reasoning_steps": list(self.reasoning_steps),
            "cited_triples": [list(t) for t in self.cited_triples],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Skeleton":
        triples = []
        for t in d.get("cited_triples", []):
            if isinstance(t, Mapping):
                t = (t["attack"], t["predicate"], t["feature"])
            if len(t) != 3:
                raise ValueError(f"cited triple must have three parts: {t!r}")
            triples.append(tuple(str(x) for x in t))
        return cls(str(d["question"]), tuple(str(s) for s in d.get("reasoning_steps", [])), tuple(triples))


@dataclass(frozen=True)
class Caption:
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("caption must be non-empty")


class RejectReason(str, Enum):
    STRUCTURAL = "structural"
    FACT_CONFLICT = "fact_conflict"
    LOW_COMPLEXITY = "low_complexity"
    LOW_INFO = "low_info"


@dataclass(frozen=True)
class FilterVerdict:
    status: str
    reason: RejectReason | None = None
    detail: str = ""

    def __post_init__(self) -> None:
        if self.status not in ("pass", "reject"):
            raise ValueError(f"bad verdict status {self.status!r}")
        if (self.status == "reject") != (self.reason is not None):
            raise ValueError("a reason is required exactly when the status is 'reject'")

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    @classmethod
    def ok(cls, detail: str = "") -> "FilterVerdict":
        return cls("pass", None, detail)

    @classmethod
    def reject(cls, reason: RejectReason, detail: str) -> "FilterVerdict":
        return cls("reject", RejectReason(reason), detail)

    def to_dict(self) -> dict:
        return {"status": self.status, "reason": self.reason.value if self.reason else None, "detail": self.detail}


@dataclass(frozen=True)
class Provenance:
    k: int
    center: str
    subgraph_hash: str
    skeleton: Skeleton
    caption: Caption

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "center": self.center,
            "subgraph_hash": self.subgraph_hash,
            "skeleton": self.skeleton.to_dict(),
            "caption": self.caption.text,
        }


@dataclass(frozen=True)
class QARecord:
    sample_id: str
    image_ref: str
    label: str
    question: str
    answer: str
    rationale: str | None
    provenance: Provenance
    verdict: FilterVerdict | None = None

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "image": self.image_ref,
            "label": self.label,
            "question": self.question,
            "answer": self.answer,
            "rationale": self.rationale,
            "provenance": self.provenance.to_dict(),
            "verdict": self.verdict.to_dict() if self.verdict else None,
        }


@dataclass(frozen=True)
class AgitRecord:
    """Instruction-tuning sample: image, question, rationale, answer."""

    image: str
    question: str
    think: str
    answer: str
    missing_rationale: bool = False

    def to_dict(self) -> dict:
        return {"image": self.image, "question": self.question, "think": self.think, "answer": self.answer}


# -- client interfaces --------------------------------------------------------


class SkeletonGenerator(Protocol):
    def generate(self, subgraph: Subgraph) -> Skeleton: ...


class Captioner(Protocol):
    def caption(self, image_ref: str, label: str) -> Caption: ...


class Fuser(Protocol):
    def fuse(self, image_ref: str, skeleton: Skeleton, caption: Caption) -> tuple[str, str, str | None]: ...


class Judge(Protocol):
    def judge(self, payload: Mapping[str, Any], rubric: str) -> Mapping[str, Any]: ...


@dataclass
class GeneratorClients:
    skeleton_gen: SkeletonGenerator
    captioner: Captioner
    fuser: Fuser
    judge: Judge


class TripleResolver:
    """Resolves name-level triples to graph triples through entity aliases."""

    def __init__(self, g: FaceAttackGraph):
        self.g = g
        self._forms: dict[str, set[str]] = {}
        for eid, ent in g.entities.items():
            for form in (eid, *ent.surface_forms):
                self._forms.setdefault(_fold(form), set()).add(eid)

    def entity_ids(self, name: str) -> set[str]:
        return self._forms.get(_fold(name), set())

    def resolve(self, triple: Sequence[str]) -> tuple[str, str, str] | None:
        """The graph triple named by ``triple``, or ``None`` if it is not in the graph."""
        a_name, pred, f_name = triple
        pred = _fold(pred)
        for a in sorted(self.entity_ids(a_name)):
            if not self.g.entities[a].is_attack:
                continue
            for r in self.g.relations_from(a):
                if _fold(r.predicate) == pred and r.feature in self.entity_ids(f_name):
                    return r.key
        return None


def _fold(text: str) -> str:
    return " ".join(str(text).casefold().split())


def _entity_label(g: FaceAttackGraph, eid: str) -> str | None:
    for lab, target in g.labels.items():
        if target == eid:
            return lab
    return None


def _family(g: FaceAttackGraph, eid: str) -> str | None:
    """Coarse class (real / physical / digital) of an attack node, if its label is known."""
    lab = _entity_label(g, eid)
    try:
        return coarsen(lab, "P2") if lab is not None else None
    except ValueError:
        return None


def _noun(g: FaceAttackGraph, eid: str) -> str:
    lab = _entity_label(g, eid)
    name = g.entities[eid].name.lower()
    try:
        if lab is not None and FineLabel.parse(lab) is FineLabel.RealFace:
            return f"{name} face"
    except ValueError:
        pass
    return f"{name} attack"


def _article(noun: str) -> str:
    return "an" if noun[:1] in "aeiou" else "a"


class TemplateSkeletonGenerator:
    """Deterministic skeletons built from the subgraph's relations.

    A subgraph holding only the center's own relations yields a single-relation
    question. When other attack types are reachable, one becomes the contrast
    class: same coarse family (physical/digital) first, then most shared
    features, then graph order.
    """

    def __init__(self, g: FaceAttackGraph, seed: int = 0):
        self.g = g
        self.seed = seed

    def generate(self, subgraph: Subgraph) -> Skeleton:
        g = self.g
        center = subgraph.center
        own = [r for r in subgraph.edges if r.attack == center]
        own_features = {r.feature for r in own}
        family = _family(g, center)
        rivals = []
        for order, eid in enumerate(g.entities):
            if eid != center and eid in subgraph.nodes and g.entities[eid].is_attack:
                shared = sum(1 for r in subgraph.edges if r.attack == eid and r.feature in own_features)
                same = family is not None and _family(g, eid) == family
                rivals.append((not same, -shared, order, eid))
        noun = _noun(g, center)
        ents = g.entities
        if rivals:
            rival = min(rivals)[-1]
            rnoun = _noun(g, rival)
            question = f"Why is this {_article(noun)} {noun} and not {_article(rnoun)} {rnoun}?"
            cited = own + [r for r in subgraph.edges if r.attack == rival]
        else:
            rival = None
            question = f"Why is this {_article(noun)} {noun}?"
            cited = own
        steps = [f"{ents[r.attack].name} {r.predicate} {ents[r.feature].name}." for r in cited]
        random.Random(f"{self.seed}:{center}:{subgraph.k}").shuffle(steps)
        if rival is not None:
            rival_features = {x.feature for x in cited if x.attack == rival}
            distinct = [ents[r.feature].name for r in own if r.feature not in rival_features]
            if distinct:
                steps.append(f"Unlike {ents[rival].name}, {ents[center].name} shows {', '.join(distinct)}.")
        triples = tuple((ents[r.attack].name, r.predicate, ents[r.feature].name) for r in cited)
        return Skeleton(question, tuple(steps), triples)


class TemplateCaptioner:
    """Label-keyed caption listing the features the graph links to that label."""

    def __init__(self, g: FaceAttackGraph):
        self.g = g

    def caption(self, image_ref: str, label: str) -> Caption:
        attack = attack_node_for_label(self.g, label)
        feats = [self.g.entities[r.feature].name for r in self.g.relations_from(attack)]
        return Caption(f"The face image shows {', '.join(feats)}." if feats else "The face image shows no salient cues.")


class ConcatFuser:
    """Fuses by concatenation: the caption and reasoning steps form the rationale."""

    def fuse(self, image_ref: str, skeleton: Skeleton, caption: Caption) -> tuple[str, str, str | None]:
        answer = skeleton.cited_triples[0][0] if skeleton.cited_triples else ""
        rationale = " ".join([caption.text, *skeleton.reasoning_steps]).strip()
        return skeleton.question, answer, rationale or None


DEFAULT_CONFLICT_RULES: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("pristine high-resolution textures", ("replay",)),
)


class HeuristicJudge:
    """Offline judge for the fact-conflict and pruning rubrics.

    Fact conflict: the caption contains a rule phrase while the skeleton cites a
    relation of one of the rule's attack ids. Pruning: complexity is the cited
    triple count over the graph's relation count; information is the distinct
    cited feature count over the graph's feature count.
    """

    def __init__(self, g: FaceAttackGraph, conflict_rules=DEFAULT_CONFLICT_RULES):
        self.g = g
        self.rules = tuple((phrase.casefold(), frozenset(ids)) for phrase, ids in conflict_rules)
        self.resolver = TripleResolver(g)
        self.calls = 0

    def judge(self, payload: Mapping[str, Any], rubric: str) -> dict:
        self.calls += 1
        skeleton = payload["skeleton"]
        if not isinstance(skeleton, Skeleton):
            skeleton = Skeleton.from_dict(skeleton)
        resolved = [self.resolver.resolve(t) for t in skeleton.cited_triples]
        resolved = [t for t in resolved if t is not None]
        if rubric == "fact_conflict":
            caption = str(payload.get("caption", "")).casefold()
            for phrase, attacks in self.rules:
                if phrase in caption:
                    hit = next((t for t in resolved if t[0] in attacks), None)
                    if hit is not None:
                        return {"conflict": True, "reason": f"caption reports {phrase!r} but skeleton cites {hit}"}
            return {"conflict": False, "reason": ""}
        if rubric == "pruning":
            n_rel = max(1, len(self.g.relations))
            n_feat = max(1, len(self.g.feature_ids))
            return {
                "complexity": min(1.0, len(skeleton.cited_triples) / n_rel),
                "info": min(1.0, len({t[2] for t in resolved}) / n_feat),
            }
        raise ValueError(f"unknown rubric {rubric!r}")


def stub_clients(g: FaceAttackGraph, seed: int = 0) -> GeneratorClients:
    return GeneratorClients(
        TemplateSkeletonGenerator(g, seed), TemplateCaptioner(g), ConcatFuser(), HeuristicJudge(g)
    )


# -- stages and filters -----------------------------------------------------------


def _retry(fn: Callable, retries: int, what: str):
    last = None
    for attempt in range(retries + 1):
        try:
            return fn()
        except ClientError as exc:
            last = exc
            log.warning("%s failed (attempt %d/%d): %s", what, attempt + 1, retries + 1, exc)
    raise ClientError(f"{what} failed after {retries + 1} attempts: {last}")


def draft_record(
    entry: ManifestEntry, g: FaceAttackGraph, k: int, clients: GeneratorClients, retries: int = 0
) -> QARecord:
    """Pre-fusion record: subgraph, skeleton and caption, with empty question/answer.

    Raises:
        UnknownLabelError: the entry's label has no attack node (names the sample).
        ClientError: a generator kept failing after ``retries`` retries.
    """
    try:
        center = attack_node_for_label(g, entry.label)
    except UnknownLabelError:
        raise UnknownLabelError(f"{entry.label} (sample {entry.sample_id})") from None
    sub = ego_subgraph(g, center, k)
    skeleton = _retry(lambda: clients.skeleton_gen.generate(sub), retries, f"skeleton for {entry.sample_id}")
    caption = _retry(lambda: clients.captioner.caption(entry.image_ref, entry.label), retries, f"caption for {entry.sample_id}")
    prov = Provenance(k, center, sub.content_hash(), skeleton, caption)
    return QARecord(entry.sample_id, entry.image_ref, entry.label, "", "", None, prov)


def fuse_record(record: QARecord, clients: GeneratorClients, retries: int = 0) -> QARecord:
    q, a, rationale = _retry(
        lambda: clients.fuser.fuse(record.image_ref, record.provenance.skeleton, record.provenance.caption),
        retries,
        f"fusion for {record.sample_id}",
    )
    return replace(record, question=q, answer=a, rationale=rationale)


def synthesize_one(
    entry: ManifestEntry, g: FaceAttackGraph, k: int, clients: GeneratorClients, retries: int = 0
) -> QARecord:
    """Unfiltered QA record for one manifest entry."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    return fuse_record(draft_record(entry, g, k, clients, retries), clients, retries)


def structural_filter(s: Skeleton, g: FaceAttackGraph, resolver: TripleResolver | None = None) -> FilterVerdict:
    """Reject skeletons citing no triples or any triple absent from the graph."""
    if not s.cited_triples:
        return FilterVerdict.reject(RejectReason.STRUCTURAL, "no grounded triples")
    resolver = resolver or TripleResolver(g)
    for t in s.cited_triples:
        if resolver.resolve(t) is None:
            return FilterVerdict.reject(RejectReason.STRUCTURAL, f"triple not in graph: {tuple(t)}")
    return FilterVerdict.ok()


def logical_flow_filter(record: QARecord, clients: GeneratorClients, on_error: str = "pass_through") -> FilterVerdict:
    """Ask the judge whether the caption contradicts the skeleton.

    On judge failure, ``on_error="pass_through"`` passes the record with an
    ``unverified`` flag; ``"fail"`` re-raises :class:`ClientError`.
    """
    payload = {"caption": record.provenance.caption.text, "skeleton": record.provenance.skeleton}
    try:
        out = clients.judge.judge(payload, "fact_conflict")
    except ClientError as exc:
        if on_error == "fail":
            raise
        return FilterVerdict.ok(f"unverified: judge unavailable ({exc})")
    if out.get("conflict"):
        return FilterVerdict.reject(RejectReason.FACT_CONFLICT, str(out.get("reason", "")))
    return FilterVerdict.ok()


def pruning_filter(
    record: QARecord,
    clients: GeneratorClients,
    thresholds: tuple[float, float] = (0.0, 0.0),
    on_error: str = "pass_through",
) -> FilterVerdict:
    """Drop records scoring below ``(min_complexity, min_info)``; complexity is checked first."""
    min_complexity, min_info = thresholds
    payload = {
        "skeleton": record.provenance.skeleton,
        "question": record.question,
        "answer": record.answer,
        "rationale": record.rationale,
    }
    try:
        out = clients.judge.judge(payload, "pruning")
    except ClientError as exc:
        if on_error == "fail":
            raise
        return FilterVerdict.ok(f"unverified: judge unavailable ({exc})")
    complexity, info = float(out["complexity"]), float(out["info"])
    if complexity < min_complexity:
        return FilterVerdict.reject(RejectReason.LOW_COMPLEXITY, f"complexity {complexity:.3f} < {min_complexity}")
    if info < min_info:
        return FilterVerdict.reject(RejectReason.LOW_INFO, f"info gain {info:.3f} < {min_info}")
    return FilterVerdict.ok()


# -- orchestration -------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 2
    structural: bool = True
    fact_conflict: bool = True
    pruning: bool = True
    min_complexity: float = 0.1
    min_info: float = 0.1
    retries: int = 1
    judge_failure: str = "pass_through"
    concurrency: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.judge_failure not in ("pass_through", "fail"):
            raise ValueError("judge_failure must be 'pass_through' or 'fail'")
        if self.concurrency < 1 or self.retries < 0:
            raise ValueError("concurrency must be >= 1 and retries >= 0")


@dataclass
class PipelineStats:
    attempted: int = 0
    passed: int = 0
    rejected: dict[str, int] = field(default_factory=lambda: {r.value: 0 for r in RejectReason})
    skipped: int = 0

    @property
    def rejected_total(self) -> int:
        return sum(self.rejected.values())

    def reconciles(self) -> bool:
        return self.attempted == self.passed + self.rejected_total + self.skipped

    def to_dict(self) -> dict:
        return {
            "attempted": self.attempted,
            "passed": self.passed,
            "rejected": dict(self.rejected),
            "skipped": self.skipped,
        }


@dataclass
class PipelineResult:
    corpus: list[QARecord]
    rejected: list[QARecord]
    skipped: list[tuple[str, str]]
    stats: PipelineStats


def _process(entry: ManifestEntry, g: FaceAttackGraph, cfg: PipelineConfig, clients: GeneratorClients, resolver):
    try:
        rec = draft_record(entry, g, cfg.k, clients, cfg.retries)
        if cfg.structural:
            v = structural_filter(rec.provenance.skeleton, g, resolver)
            if not v.passed:
                return "reject", replace(rec, verdict=v)
        detail = []
        if cfg.fact_conflict:
            v = logical_flow_filter(rec, clients, cfg.judge_failure)
            if not v.passed:
                return "reject", replace(rec, verdict=v)
            detail.append(v.detail)
        rec = fuse_record(rec, clients, cfg.retries)
        if cfg.pruning:
            v = pruning_filter(rec, clients, (cfg.min_complexity, cfg.min_info), cfg.judge_failure)
            if not v.passed:
                return "reject", replace(rec, verdict=v)
            detail.append(v.detail)
        return "pass", replace(rec, verdict=FilterVerdict.ok("; ".join(d for d in detail if d)))
    except UnknownLabelError as exc:
        return "skip", str(exc)
    except ClientError as exc:
        return "skip", str(exc)


def run_pipeline(
    manifest: Sequence[ManifestEntry],
    g: FaceAttackGraph,
    config: PipelineConfig = PipelineConfig(),
    clients: GeneratorClients | None = None,
) -> PipelineResult:
    """Synthesize and filter a QA corpus for every manifest entry.

    Output order follows the manifest whatever the concurrency. Entries whose
    label is unknown or whose generators keep failing are skipped and logged.
    """
    if not manifest:
        raise ValueError("manifest is empty")
    clients = clients or stub_clients(g, config.seed)
    resolver = TripleResolver(g)
    work = lambda e: _process(e, g, config, clients, resolver)  # noqa: E731
    if config.concurrency > 1:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            outcomes = list(pool.map(work, manifest))
    else:
        outcomes = [work(e) for e in manifest]

    stats = PipelineStats(attempted=len(manifest))
    result = PipelineResult([], [], [], stats)
    for entry, (status, payload) in zip(manifest, outcomes):
        if status == "pass":
            stats.passed += 1
            result.corpus.append(payload)
        elif status == "reject":
            stats.rejected[payload.verdict.reason.value] += 1
            result.rejected.append(payload)
        else:
            stats.skipped += 1
            result.skipped.append((entry.sample_id, payload))
            log.warning("skipped %s: %s", entry.sample_id, payload)
    return result


def to_agit_record(record: QARecord) -> AgitRecord:
    """Instruction-tuning view of a passing record; the rationale precedes the answer."""
    if record.verdict is None or not record.verdict.passed:
        raise ValueError(f"record {record.sample_id!r} has not passed filtering")
    missing = not record.rationale
    if missing:
        log.warning("record %s has no rationale; exporting empty think", record.sample_id)
    return AgitRecord(record.image_ref, record.question, record.rationale or "", record.answer, missing)


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """Load a manifest JSONL file of ``{"sample_id", "image", "label"}`` rows."""
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                entry = ManifestEntry(str(row["sample_id"]), str(row["image"]), str(row["label"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: bad manifest row: {exc}") from None
            if entry.sample_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate sample_id {entry.sample_id!r}")
            seen.add(entry.sample_id)
            entries.append(entry)
    return entries


def write_jsonl(rows: Iterable[Mapping], fh) -> None:
    for row in rows:
        fh.write(json.dumps(row, ensure_ascii=False) + "\n")
