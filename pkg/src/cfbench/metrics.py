"""Per-user ranking quality: Spearman's rho with average-rank ties, precision@k.

Per-user values that are undefined (too few test items, constant ranks)
come back as NaN and are left out of the averages; the aggregates report
how many users were excluded.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError

DEFAULT_KS = (1, 2, 3)


@dataclass(frozen=True, eq=False)
class RankedPrediction:
    """One user's test items with predicted scores and observed ratings.

    Equal scores in a top-k list are ordered by ``tiebreak`` (one key per
    item, smaller first) and then by item id. Without ``tiebreak`` the item id
    alone decides, which can leak id order into precision when ids carry
    meaning (e.g. popularity).
    """

    user: object
    items: np.ndarray
    predicted: np.ndarray
    actual: np.ndarray
    tiebreak: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "items", np.asarray(self.items, dtype=np.int64))
        object.__setattr__(self, "predicted", np.asarray(self.predicted, dtype=np.float64))
        object.__setattr__(self, "actual", np.asarray(self.actual, dtype=np.float64))
        if not (len(self.items) == len(self.predicted) == len(self.actual)):
            raise ValueError("items, predicted and actual must have equal length")
        if len(np.unique(self.items)) != len(self.items):
            raise ValueError("each test item must appear exactly once")
        if self.tiebreak is not None:
            object.__setattr__(self, "tiebreak", np.asarray(self.tiebreak))
            if len(self.tiebreak) != len(self.items):
                raise ValueError("tiebreak needs one key per item")


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """Rank 1 for the largest value; tied values share the mean of their ranks."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot rank an empty sequence")
    return rankdata(-v, method="average")


def spearman_rho_user(pred: RankedPrediction) -> float:
    """Pearson correlation of the average-rank vectors, NaN when undefined."""
    if len(pred.items) < 2:
        return math.nan
    s = average_ranks(pred.predicted)
    s_star = average_ranks(pred.actual)
    ds = s - s.mean()
    dt = s_star - s_star.mean()
    denom = math.sqrt(float(ds @ ds)) * math.sqrt(float(dt @ dt))
    if denom == 0.0:
        return math.nan
    return float(ds @ dt) / denom


def top_k(items: np.ndarray, scores: np.ndarray, k: int, tiebreak=None) -> np.ndarray:
    """Highest scores first; ties by ascending ``tiebreak`` key, then item id."""
    keys = (items, -scores) if tiebreak is None else (items, tiebreak, -scores)
    order = np.lexsort(keys)
    return items[order[:k]]


def precision_at_k_user(pred: RankedPrediction, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(pred.items) < k:
        return math.nan
    actual = top_k(pred.items, pred.actual, k, pred.tiebreak)
    predicted = top_k(pred.items, pred.predicted, k, pred.tiebreak)
    return len(np.intersect1d(actual, predicted)) / k


def _mean_defined(values, what):
    arr = np.asarray(values, dtype=np.float64)
    ok = ~np.isnan(arr)
    if not ok.any():
        raise UndefinedMetricError(f"{what} is undefined for every user")
    return float(arr[ok].mean())


def spearman_rho(preds: Sequence[RankedPrediction]) -> float:
    return _mean_defined([spearman_rho_user(p) for p in preds], "Spearman's rho")


def precision_at_k(preds: Sequence[RankedPrediction], k: int) -> float:
    return _mean_defined([precision_at_k_user(p, k) for p in preds], f"precision@{k}")


@dataclass(frozen=True)
class UserMetrics:
    user: object
    n_items: int
    rho: float
    precision: tuple[float, ...]


@dataclass(frozen=True)
class FoldMetrics:
    """Aggregates of one evaluation pass plus the per-user rows behind them."""

    fold: int
    spearman_rho: float
    precision_at: dict[int, float]
    n_users: int
    excluded_rho: int
    excluded_precision: dict[int, int]
    per_user: tuple[UserMetrics, ...] = field(repr=False, default=())


def evaluate_users(preds: Sequence[RankedPrediction], ks: Sequence[int] = DEFAULT_KS,
                   fold: int = 0) -> FoldMetrics:
    rows = []
    for p in preds:
        rows.append(UserMetrics(p.user, len(p.items), spearman_rho_user(p),
                                tuple(precision_at_k_user(p, k) for k in ks)))
    return summarize(rows, ks, fold)


def summarize(rows: Sequence[UserMetrics], ks: Sequence[int] = DEFAULT_KS, fold: int = 0) -> FoldMetrics:
    """Aggregate per-user rows; the result is reproducible from the rows alone."""
    rho = [r.rho for r in rows]
    prec = {k: [r.precision[j] for r in rows] for j, k in enumerate(ks)}
    return FoldMetrics(
        fold=fold,
        spearman_rho=_mean_defined(rho, "Spearman's rho"),
        precision_at={k: _mean_defined(v, f"precision@{k}") for k, v in prec.items()},
        n_users=len(rows),
        excluded_rho=int(np.isnan(np.asarray(rho, dtype=float)).sum()),
        excluded_precision={k: int(np.isnan(np.asarray(v, dtype=float)).sum()) for k, v in prec.items()},
        per_user=tuple(rows),
    )


def format_user_rows(rows: Sequence[UserMetrics], ks: Sequence[int] = DEFAULT_KS) -> str:
    """Tab-delimited per-user dump: user, rho, precision@k..., excluded flags."""
    head = ["user", "rho"] + [f"precision@{k}" for k in ks] + ["excluded"]
    out = ["\t".join(head)]
    for r in rows:
        flags = []
        if math.isnan(r.rho):
            flags.append("rho")
        flags += [f"p@{k}" for k, v in zip(ks, r.precision) if math.isnan(v)]
        cells = [str(r.user), repr(r.rho)] + [repr(v) for v in r.precision] + [",".join(flags) or "-"]
        out.append("\t".join(cells))
    return "\n".join(out) + "\n"
