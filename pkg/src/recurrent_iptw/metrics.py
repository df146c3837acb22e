"""RMSE, AUC-ROC, Spearman correlation and nearest-rank quantiles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass
class MetricReport:
    name: str
    value: float
    n: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.value) or self.n <= 0:
            raise ValueError(f"invalid metric report {self.name}: value={self.value}, n={self.n}")

    def to_json(self) -> dict:
        return {"name": self.name, "value": self.value, "n": self.n, "metadata": self.metadata}


def rmse(estimates, truth) -> float:
    e = np.asarray(estimates, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if e.shape != t.shape or e.size == 0:
        raise ValueError(f"rmse: length mismatch {e.size} vs {t.size}")
    return float(np.sqrt(np.mean((e - t) ** 2)))


def auc_roc(scores, labels) -> float:
    """Probability a random positive outscores a random negative; ties count half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("auc_roc: scores and labels differ in length")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((y == 0).sum())
    if n_pos == 0 or n_neg == 0 or n_pos + n_neg != y.size:
        raise ValueError("auc_roc: labels must be binary with both classes present")
    ranks = rankdata(s)  # mid-ranks
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def spearman_rho(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ValueError("spearman_rho: need two equal-length vectors of length >= 2")
    rx, ry = rankdata(x), rankdata(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        raise ValueError("spearman_rho: zero rank variance")
    return float(np.clip((rx @ ry) / denom, -1.0, 1.0))


def nearest_rank_quantile(values, q: float) -> float:
    """Smallest value with at least a fraction q of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("quantile of empty sample")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile level {q} outside [0, 1]")
    rank = max(1, math.ceil(q * v.size - 1e-12))
    return float(v[rank - 1])
