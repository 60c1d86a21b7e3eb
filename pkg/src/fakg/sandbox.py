"""Desk-scale group-relative policy optimisation over a finite set of response templates.

The policy is a softmax over template logits. Each iteration samples a group,
scores it with the real reward stack (parsing, grounding, KG reward,
group-relative advantages) and takes one plain gradient step on the surrogate
``-(1/G) * sum(A_g * log pi(template_g))``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import FaceAttackGraph, attack_node_for_label
from .grounding import DEFAULT_TAGS, GroundingMode, StubVerifier, TagConfig, VerifierClient, render_response
from .rewards import LabelNormalizer, RewardWeights, score_group

log = logging.getLogger(__name__)

__all__ = [
    "Template",
    "ToyPolicy",
    "TrainConfig",
    "IterationRecord",
    "TrainTrace",
    "softmax",
    "sample_group",
    "surrogate_loss",
    "policy_gradient",
    "train",
    "load_templates",
    "reference_templates",
    "sparkline",
]


@dataclass(frozen=True)
class Template:
    id: int
    think: str
    answer: str

    def render(self, tags: TagConfig = DEFAULT_TAGS) -> str:
        return render_response(self.think, self.answer, tags)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass
class ToyPolicy:
    logits: np.ndarray
    temperature: float = 1.0

    def __post_init__(self) -> None:
        self.logits = np.array(self.logits, dtype=float)
        if self.logits.ndim != 1 or self.logits.size == 0:
            raise ValueError("logits must be a non-empty vector")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def uniform(cls, k: int, temperature: float = 1.0) -> "ToyPolicy":
        return cls(np.zeros(k), temperature)

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits / self.temperature)

    def log_probs(self) -> np.ndarray:
        z = self.logits / self.temperature
        m = z.max()
        return z - (m + np.log(np.exp(z - m).sum()))


def sample_group(p: ToyPolicy, G: int, rng: np.random.Generator) -> list[int]:
    """``G`` i.i.d. template ids drawn from the policy."""
    k = p.logits.size
    if k == 1:
        return [0] * G
    return rng.choice(k, size=G, p=p.probs).tolist()


def _check_lengths(group: Sequence[int], advantages: Sequence[float]) -> None:
    if len(group) != len(advantages):
        raise ValueError(f"group has {len(group)} samples but {len(advantages)} advantages")
    if not len(group):
        raise ValueError("empty group")


def surrogate_loss(p: ToyPolicy, group: Sequence[int], advantages: Sequence[float]) -> float:
    _check_lengths(group, advantages)
    lp = p.log_probs()
    adv = np.asarray(advantages, dtype=float)
    return float(-np.mean(adv * lp[np.asarray(group)]))


def policy_gradient(p: ToyPolicy, group: Sequence[int], advantages: Sequence[float]) -> np.ndarray:
    """Exact gradient of :func:`surrogate_loss` with respect to the logits."""
    _check_lengths(group, advantages)
    G = len(group)
    k = p.logits.size
    adv = np.asarray(advantages, dtype=float)
    onehot_sum = np.bincount(np.asarray(group), weights=adv, minlength=k)
    return -(onehot_sum - adv.sum() * p.probs) / (G * p.temperature)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 200
    group_size: int = 8
    step_size: float = 0.5
    seed: int = 7
    truth: str = "Print"
    weights: RewardWeights = field(default_factory=RewardWeights)
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.group_size < 1:
            raise ValueError("group_size must be at least 1")
        if self.step_size < 0:
            raise ValueError("step_size must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    expected_total: float
    expected_kg: float
    grad_norm: float
    sampled: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "expected_total": self.expected_total,
            "expected_kg": self.expected_kg,
            "grad_norm": self.grad_norm,
            "sampled": list(self.sampled),
        }


@dataclass
class TrainTrace:
    records: list[IterationRecord] = field(default_factory=list)
    initial_expected_total: float = 0.0
    initial_expected_kg: float = 0.0
    final_expected_total: float = 0.0
    final_expected_kg: float = 0.0
    seed: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def summary(self) -> dict:
        return {
            "iterations": len(self.records),
            "seed": self.seed,
            "initial_expected_total": self.initial_expected_total,
            "initial_expected_kg": self.initial_expected_kg,
            "final_expected_total": self.final_expected_total,
            "final_expected_kg": self.final_expected_kg,
        }

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.records)


def train(
    g: FaceAttackGraph,
    templates: Sequence[Template],
    cfg: TrainConfig = TrainConfig(),
    verifier: VerifierClient | None = None,
    tags: TagConfig = DEFAULT_TAGS,
    norm: LabelNormalizer | None = None,
) -> tuple[ToyPolicy, TrainTrace]:
    """Optimise a uniform-initialised template policy for one fixed prompt.

    Each trace record describes the policy that sampled that iteration's group
    (i.e. before the update). Grounding uses the offline :class:`StubVerifier`
    unless another verifier is passed; with a deterministic verifier the run is
    fully reproducible from ``cfg.seed``.
    """
    if not templates:
        raise ValueError("need at least one template")
    ids = [t.id for t in templates]
    if ids != list(range(len(templates))):
        raise ValueError("template ids must be 0..K-1 in order")
    attack_node_for_label(g, cfg.truth)
    if cfg.group_size < 2:
        log.warning("group_size=%d: every group has zero variance, the policy will not move", cfg.group_size)

    verifier = verifier if verifier is not None else StubVerifier()
    mode = GroundingMode.FALLBACK_VERIFIER
    rendered = [t.render(tags) for t in templates]
    per_template = score_group(rendered, cfg.truth, g, verifier, tags, norm, cfg.weights, mode)
    totals = np.array([b.total for b in per_template.breakdowns])
    kgs = np.array([b.r_kg for b in per_template.breakdowns])

    policy = ToyPolicy.uniform(len(templates), cfg.temperature)
    rng = np.random.default_rng(cfg.seed)
    trace = TrainTrace(seed=cfg.seed)
    probs = policy.probs
    trace.initial_expected_total = float(probs @ totals)
    trace.initial_expected_kg = float(probs @ kgs)
    for it in range(1, cfg.iterations + 1):
        probs = policy.probs
        group = sample_group(policy, cfg.group_size, rng)
        scored = score_group([rendered[i] for i in group], cfg.truth, g, verifier, tags, norm, cfg.weights, mode)
        grad = policy_gradient(policy, group, scored.advantages)
        trace.records.append(
            IterationRecord(it, float(probs @ totals), float(probs @ kgs), float(np.linalg.norm(grad)), tuple(group))
        )
        policy.logits = policy.logits - cfg.step_size * grad
    probs = policy.probs
    trace.final_expected_total = float(probs @ totals)
    trace.final_expected_kg = float(probs @ kgs)
    return policy, trace


def load_templates(path: str | Path) -> list[Template]:
    with open(path, encoding="utf-8") as fh:
        return _templates_from(json.load(fh))


def reference_templates() -> list[Template]:
    data = resources.files("fakg").joinpath("data/reference_templates.json").read_text("utf-8")
    return _templates_from(json.loads(data))


def _templates_from(doc) -> list[Template]:
    if not isinstance(doc, list):
        raise ValueError("template file must hold a JSON list")
    out = [Template(int(d["id"]), str(d["think"]), str(d["answer"])) for d in doc]
    out.sort(key=lambda t: t.id)
    if [t.id for t in out] != list(range(len(out))):
        raise ValueError("template ids must be dense 0..K-1")
    return out


_BARS = "▁▂▃▄▅▆▇█"


def sparkline(values: Sequence[float], width: int = 60) -> str:
    """Compact text learning curve, downsampled to at most ``width`` characters."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return ""
    if v.size > width:
        v = np.array([chunk.mean() for chunk in np.array_split(v, width)])
    lo, hi = v.min(), v.max()
    if hi == lo:
        return _BARS[0] * v.size
    idx = np.round((v - lo) / (hi - lo) * (len(_BARS) - 1)).astype(int)
    return "".join(_BARS[i] for i in idx)
