"""ACC / FAR / FRR / HTER under the binary, coarse and fine-grained protocols.

Per-category accuracy is recall. Per-category FAR is one-vs-rest over all
records whose true category differs. Totals are support-weighted means of the
per-category values, so ``total_acc`` equals overall accuracy.

Ratios are accumulated as exact fractions and rounded once, which keeps every
figure independent of record order and of how counts were partitioned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .labels import ATTACK, REAL, FineLabel, Protocol, coarsen

__all__ = [
    "PredictionRecord",
    "CategoryMetrics",
    "BinaryRates",
    "EvalReport",
    "binary_hter",
    "category_metrics",
    "confusion_matrix",
    "evaluate",
    "read_predictions",
    "format_table",
]


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    truth: str
    predicted: str

    @classmethod
    def fine(cls, sample_id: str, truth, predicted) -> "PredictionRecord":
        return cls(sample_id, FineLabel.parse(truth).value, FineLabel.parse(predicted).value)


@dataclass(frozen=True)
class CategoryMetrics:
    category: str
    support: int
    acc: float
    far: float
    frr: float
    hter: float
    diagnostics: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "support": self.support,
            "acc": self.acc,
            "far": self.far,
            "frr": self.frr,
            "hter": self.hter,
            "diagnostics": list(self.diagnostics),
        }


@dataclass(frozen=True)
class BinaryRates:
    far: float
    frr: float
    hter: float
    diagnostics: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"far": self.far, "frr": self.frr, "hter": self.hter, "diagnostics": list(self.diagnostics)}


@dataclass(frozen=True)
class EvalReport:
    protocol: Protocol
    categories: tuple[CategoryMetrics, ...]
    total_acc: float
    total_hter: float
    total_support: int
    binary: BinaryRates | None = None
    diagnostics: tuple[str, ...] = field(default=())

    def category(self, name: str) -> CategoryMetrics:
        for c in self.categories:
            if c.category == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        out = {
            "protocol": self.protocol.value,
            "categories": [c.to_dict() for c in self.categories],
            "total": {
                "acc": self.total_acc,
                "hter": self.total_hter,
                "support": self.total_support,
            },
            "diagnostics": list(self.diagnostics),
        }
        if self.binary is not None:
            out["binary"] = self.binary.to_dict()
        return out


def _labels_in_space(records: Iterable[PredictionRecord], protocol: Protocol, precoarsened: bool):
    space = protocol.labels
    memo: dict[str, str] = {}

    def to_space(lab: str) -> str:
        # few distinct spellings, many records
        if lab not in memo:
            memo[lab] = coarsen(lab, protocol)
        return memo[lab]

    pairs = []
    for r in records:
        if precoarsened:
            t, p = r.truth, r.predicted
            for lab in (t, p):
                if lab not in space:
                    raise ValueError(f"record {r.sample_id!r}: {lab!r} not in {protocol.value} label space")
        else:
            t, p = to_space(r.truth), to_space(r.predicted)
        pairs.append((t, p))
    return pairs


def confusion_matrix(
    records: Sequence[PredictionRecord], protocol: Protocol | str | int, precoarsened: bool = False
) -> np.ndarray:
    """Counts ``C[i, j]`` of true label ``i`` predicted as ``j`` in the protocol's label order."""
    protocol = Protocol.parse(protocol)
    index = {lab: i for i, lab in enumerate(protocol.labels)}
    n = len(index)
    pairs = _labels_in_space(records, protocol, precoarsened)
    if not pairs:
        return np.zeros((n, n), dtype=np.int64)
    t = np.fromiter((index[a] for a, _ in pairs), dtype=np.int64, count=len(pairs))
    p = np.fromiter((index[b] for _, b in pairs), dtype=np.int64, count=len(pairs))
    return np.bincount(t * n + p, minlength=n * n).reshape(n, n)


def _category_from_counts(cm: np.ndarray, i: int, name: str) -> CategoryMetrics:
    diags = []
    support = int(cm[i].sum())
    correct = int(cm[i, i])
    negatives = int(cm.sum()) - support
    false_accept = int(cm[:, i].sum()) - correct
    if support:
        acc = float(Fraction(correct, support))
    else:
        acc = 0.0
        diags.append(f"zero_support: no records with true category {name}")
    if negatives:
        far = float(Fraction(false_accept, negatives))
    else:
        far = 0.0
        diags.append(f"no_negatives: every record belongs to {name}")
    frr = 1.0 - acc
    return CategoryMetrics(name, support, acc, far, frr, (far + frr) / 2, tuple(diags))


def _weighted_totals(cm: np.ndarray) -> tuple[float, float]:
    """Support-weighted mean of per-category ACC and HTER, from exact count ratios."""
    n = int(cm.sum())
    acc_sum = Fraction(0)
    hter_sum = Fraction(0)
    for i in range(cm.shape[0]):
        support = int(cm[i].sum())
        negatives = n - support
        acc = Fraction(int(cm[i, i]), support) if support else Fraction(0)
        far = Fraction(int(cm[:, i].sum()) - int(cm[i, i]), negatives) if negatives else Fraction(0)
        acc_sum += support * acc
        hter_sum += support * (far + 1 - acc) / 2
    return float(acc_sum / n), float(hter_sum / n)


def category_metrics(
    records: Sequence[PredictionRecord],
    p: Protocol | str | int,
    category: str,
    precoarsened: bool = False,
) -> CategoryMetrics:
    """One-vs-rest metrics for ``category`` after coarsening to protocol ``p``."""
    p = Protocol.parse(p)
    if category not in p.labels:
        raise ValueError(f"{category!r} is not a category of {p.value}: {p.labels}")
    cm = confusion_matrix(records, p, precoarsened)
    return _category_from_counts(cm, p.labels.index(category), category)


def binary_hter(records: Sequence[PredictionRecord], precoarsened: bool = False) -> BinaryRates:
    """Standard live-vs-attack FAR, FRR and HTER.

    FAR is the fraction of true attacks accepted as real; FRR the fraction of
    real faces rejected as attacks. A rate whose population is empty is
    reported as 0 with a diagnostic.
    """
    if not records:
        raise ValueError("binary_hter needs at least one record")
    cm = confusion_matrix(records, Protocol.P1, precoarsened)
    r, a = Protocol.P1.labels.index(REAL), Protocol.P1.labels.index(ATTACK)
    diags = []
    n_real, n_attack = int(cm[r].sum()), int(cm[a].sum())
    if n_attack:
        far = float(Fraction(int(cm[a, r]), n_attack))
    else:
        far = 0.0
        diags.append("no true attacks: FAR undefined, reported as 0")
    if n_real:
        frr = float(Fraction(int(cm[r, a]), n_real))
    else:
        frr = 0.0
        diags.append("no true real faces: FRR undefined, reported as 0")
    return BinaryRates(far, frr, (far + frr) / 2, tuple(diags))


def evaluate(
    records: Sequence[PredictionRecord], p: Protocol | str | int, precoarsened: bool = False
) -> EvalReport:
    """Per-category metrics and support-weighted totals under protocol ``p``.

    With ``precoarsened=True`` labels are taken to already live in the
    protocol's label space (for systems that only emit protocol-level output).
    """
    p = Protocol.parse(p)
    records = list(records)
    if not records:
        raise ValueError("evaluate needs at least one record")
    cm = confusion_matrix(records, p, precoarsened)
    cats = tuple(_category_from_counts(cm, i, lab) for i, lab in enumerate(p.labels))
    n = len(records)
    total_acc, total_hter = _weighted_totals(cm)
    binary = binary_hter(records, precoarsened) if p is Protocol.P1 else None
    diags = tuple(d for c in cats for d in c.diagnostics)
    return EvalReport(p, cats, total_acc, total_hter, n, binary, diags)


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    """Load a predictions JSONL file. Blank lines are skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out.append(PredictionRecord.fine(str(row["sample_id"]), row["truth"], row["predicted"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad prediction record: {exc}") from None
    return out


def _pct(x: float) -> str:
    return f"{100 * x:.1f}"


def format_table(report: EvalReport) -> str:
    """Aligned text table of ACC/HTER percentages with one decimal place."""
    rows = [("Category", "Support", "ACC(%)", "FAR(%)", "FRR(%)", "HTER(%)")]
    for c in report.categories:
        rows.append((c.category, str(c.support), _pct(c.acc), _pct(c.far), _pct(c.frr), _pct(c.hter)))
    rows.append(("#Total", str(report.total_support), _pct(report.total_acc), "", "", _pct(report.total_hter)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = [f"Protocol {report.protocol.value}"]
    for j, r in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[0]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(r)))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    if report.binary is not None:
        b = report.binary
        lines.append(f"Binary: FAR {_pct(b.far)}  FRR {_pct(b.frr)}  HTER {_pct(b.hter)}")
    return "\n".join(lines)
