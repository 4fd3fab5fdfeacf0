"""Top-k localisation accuracy and support-weighted precision/recall/F1."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

logger = logging.getLogger(__name__)

RankedResult = tuple[Sequence[str], str]


def a_at_k(results: Sequence[RankedResult], k: int) -> float:
    """Fraction of cases whose true root cause is among the first k entries."""
    if not results:
        raise ValueError("empty test set")
    if not 1 <= k <= 5:
        raise ValueError("k must be in 1..5")
    hits = sum(truth in list(ranked)[:k] for ranked, truth in results)
    return hits / len(results)


def avg_at_5(results: Sequence[RankedResult]) -> float:
    return sum(a_at_k(results, k) for k in range(1, 6)) / 5


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    support: int = 0


def class_counts(pred: Sequence[str], true: Sequence[str]) -> dict[str, ClassCounts]:
    if len(pred) != len(true):
        raise ValueError("prediction and truth lengths differ")
    counts = {c: ClassCounts() for c in sorted(set(pred) | set(true))}
    for p, t in zip(pred, true):
        counts[t].support += 1
        if p == t:
            counts[t].tp += 1
        else:
            counts[p].fp += 1
            counts[t].fn += 1
    return counts


def _ratio(num: int, den: int, what: str, cls: str) -> float:
    if den == 0:
        logger.warning("%s undefined for class %r; using 0", what, cls)
        return 0.0
    return num / den


def weighted_prf(pred_types: Sequence[str], true_types: Sequence[str]) -> tuple[float, float, float]:
    """Per-class precision, recall and F1 averaged with weights proportional
    to each class's support in the truth."""
    if not true_types:
        raise ValueError("empty input")
    counts = class_counts(pred_types, true_types)
    n = len(true_types)
    p_w = r_w = f_w = 0.0
    for cls, c in counts.items():
        if c.support == 0:
            continue
        p = _ratio(c.tp, c.tp + c.fp, "precision", cls)
        r = _ratio(c.tp, c.tp + c.fn, "recall", cls)
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        w = c.support / n
        p_w += w * p
        r_w += w * r
        f_w += w * f
    return p_w, r_w, f_w


@dataclass
class EvalReport:
    a_at_k: dict[int, float]
    avg_at_5: float
    precision: float
    recall: float
    f1: float
    counts: dict[str, dict] = field(default_factory=dict)
    n_cases: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["a_at_k"] = {str(k): v for k, v in self.a_at_k.items()}
        return d


def evaluate(ranked: Sequence[RankedResult], pred_types: Sequence[str], true_types: Sequence[str]) -> EvalReport:
    a = {k: a_at_k(ranked, k) for k in range(1, 6)}
    p, r, f = weighted_prf(pred_types, true_types)
    counts = {c: asdict(v) for c, v in class_counts(pred_types, true_types).items()}
    return EvalReport(a, sum(a.values()) / 5, p, r, f, counts, len(ranked))


def write_report(path, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)


def write_case_csv(path, rows: Sequence[dict]) -> None:
    fields = ["case_id", "root_instance", "rank", "ranked_instances", "true_type", "pred_type"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})
