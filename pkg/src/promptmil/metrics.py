"""Bag-level evaluation metrics: AUC, F1, accuracy, attention localization."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, FormatError

CSV_HEADER = ["split", "seed", "method", "backbone_preset", "K", "prompt_sites", "auc", "f1", "acc", "n_bags"]
NA = "n/a"


class DegenerateMetricError(ContractError):
    """AUC is undefined when only one class is present."""


def midranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    n = xs.size
    # boundaries of runs of equal values in sorted order
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], n]
    ranks_sorted = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    ranks = np.empty(n)
    ranks[order] = ranks_sorted
    return ranks


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ContractError("scores and labels differ in length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateMetricError("AUC needs at least one positive and one negative label")
    r = midranks(s)
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_or_none(scores, labels) -> Optional[float]:
    try:
        return auc(scores, labels)
    except DegenerateMetricError:
        return None


def confusion(scores, labels, threshold: float = 0.5) -> Tuple[int, int, int, int]:
    """``(tp, fp, fn, tn)`` with prediction ``score >= threshold``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    pred = s >= threshold
    tp = int((pred & (y == 1)).sum())
    fp = int((pred & (y == 0)).sum())
    fn = int((~pred & (y == 1)).sum())
    tn = int((~pred & (y == 0)).sum())
    return tp, fp, fn, tn


def f1_acc(scores, labels, threshold: float = 0.5) -> Tuple[float, float]:
    if len(scores) == 0:
        raise ContractError("f1_acc needs at least one prediction")
    tp, fp, fn, tn = confusion(scores, labels, threshold)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    acc = (tp + tn) / (tp + fp + fn + tn)
    return f1, acc


def attention_localization(alphas: Sequence[float], instance_truth: Sequence[int],
                           rho: Optional[float] = None) -> float:
    """Precision of the top-ceil(rho n) attention-ranked patches against instance truth.

    ``rho`` defaults to the bag's actual positive fraction.  Ties go to the
    smaller patch index.
    """
    a = np.asarray(alphas, dtype=np.float64)
    t = np.asarray(instance_truth).astype(int)
    if a.shape != t.shape:
        raise ContractError("alphas and instance truth differ in length")
    if t.sum() == 0:
        raise ContractError("localization is only defined for positive bags")
    n = a.size
    k = int(math.ceil((t.sum() / n if rho is None else rho) * n - 1e-9))
    k = min(max(k, 1), n)
    top = np.argsort(-a, kind="stable")[:k]
    return float(t[top].mean())


@dataclass
class MetricsRecord:
    auc: Optional[float]
    f1: float
    acc: float
    n_bags: int
    seed: int = 0
    config_fingerprint: str = ""
    split: str = "test"
    method: str = ""
    backbone_preset: str = ""
    K: Optional[int] = None
    prompt_sites: Tuple[int, ...] = ()
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, probs, labels, **kw) -> "MetricsRecord":
        if len(probs) < 1:
            raise ContractError("no bags to evaluate")
        f1, acc = f1_acc(probs, labels)
        return cls(auc=auc_or_none(probs, labels), f1=f1, acc=acc, n_bags=len(probs), **kw)

    def csv_row(self) -> List[str]:
        return [
            self.split,
            str(self.seed),
            self.method,
            self.backbone_preset,
            "" if self.K is None else str(self.K),
            ";".join(str(s) for s in self.prompt_sites),
            NA if self.auc is None else f"{self.auc:.6f}",
            f"{self.f1:.6f}",
            f"{self.acc:.6f}",
            str(self.n_bags),
        ]

    def metrics_tuple(self):
        return (self.auc, self.f1, self.acc, self.n_bags)


def write_csv(records: Iterable[MetricsRecord], path: str, append: bool = False) -> None:
    import os

    exists = append and os.path.exists(path) and os.path.getsize(path) > 0
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not exists:
            w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.csv_row())


def read_csv(path: str) -> List[dict]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise FormatError(f"{path}: cannot read metrics CSV ({exc.strerror})") from None
    if rows and list(rows[0].keys()) != CSV_HEADER:
        raise FormatError(f"{path}: unexpected CSV header")
    for r in rows:
        r["auc"] = None if r["auc"] == NA else float(r["auc"])
        r["f1"] = float(r["f1"])
        r["acc"] = float(r["acc"])
        r["n_bags"] = int(r["n_bags"])
    return rows
