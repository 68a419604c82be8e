"""
Ranking metrics restricted to the songs whose true hit score is in the top
fraction (10% by default) of the evaluated set.

nDCG uses linear gain (relevance = raw true score) and a ``log2(rank + 1)``
discount. Kendall's tau is the tie-corrected tau-b and Spearman's rho the
Pearson correlation of mid-ranks. When a correlation is undefined (a ranking
with zero variance) the value is ``nan``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

DEFAULT_FRACTION = 0.10


def _check(true_scores, predicted, fraction):
    y = np.asarray(true_scores, dtype=np.float64).reshape(-1)
    p = np.asarray(predicted, dtype=np.float64).reshape(-1)
    if y.shape != p.shape:
        raise ValueError(f"true and predicted scores differ in length: {y.size} vs {p.size}")
    if y.size < 2:
        raise ValueError("need at least two songs")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    return y, p


def subset_size(n: int, fraction: float) -> int:
    # guard against 0.1 * 1500 = 150.00000000000003 rounding up
    return min(n, max(1, math.ceil(round(fraction * n, 9))))


def top_fraction_subset(true_scores, predicted=None, fraction: float = DEFAULT_FRACTION) -> np.ndarray:
    """Indices of the ``ceil(fraction * n)`` highest true scores, ties kept in index order."""
    y = np.asarray(true_scores, dtype=np.float64).reshape(-1)
    if predicted is not None:
        y, _ = _check(y, predicted, fraction)
    k = subset_size(y.size, fraction)
    if k < 2 and y.size >= 2:
        raise ValueError(f"fraction {fraction} of {y.size} songs leaves fewer than two")
    return np.argsort(-y, kind="stable")[:k]


def _dcg(rel_in_rank_order: np.ndarray) -> float:
    discounts = np.log2(np.arange(2, rel_in_rank_order.size + 2))
    return float(np.sum(rel_in_rank_order / discounts))


def ndcg(true_scores, predicted, fraction: float = DEFAULT_FRACTION, mode: str = "subset") -> float:
    """Normalized DCG with linear gain.

    ``mode="subset"`` ranks only the true-top subset by prediction.
    ``mode="truncated"`` ranks the whole set by prediction and scores the
    first ``|subset|`` positions against the ideal top ``|subset|``.
    All-zero relevance gives 1.
    """
    y, p = _check(true_scores, predicted, fraction)
    if mode == "subset":
        s = top_fraction_subset(y, fraction=fraction)
        rel = y[s]
        # stable on original index when predictions tie
        order = np.lexsort((s, -p[s]))
        actual = _dcg(rel[order])
        ideal = _dcg(np.sort(rel)[::-1])
    elif mode == "truncated":
        k = subset_size(y.size, fraction)
        order = np.lexsort((np.arange(y.size), -p))[:k]
        actual = _dcg(y[order])
        ideal = _dcg(np.sort(y)[::-1][:k])
    else:
        raise ValueError(f"unknown nDCG mode {mode!r}")
    if np.any(y < 0):
        raise ValueError("nDCG needs non-negative relevance")
    if ideal == 0.0:
        return 1.0
    return actual / ideal


def kendall_tau(true_scores, predicted, fraction: float = DEFAULT_FRACTION) -> float:
    """Tau-b between true and predicted scores within the true-top subset."""
    y, p = _check(true_scores, predicted, fraction)
    s = top_fraction_subset(y, fraction=fraction)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tau = stats.kendalltau(y[s], p[s], variant="b").statistic
    return float(tau)


def spearman_rho(true_scores, predicted, fraction: float = DEFAULT_FRACTION) -> float:
    """Pearson correlation of mid-ranks within the true-top subset."""
    y, p = _check(true_scores, predicted, fraction)
    s = top_fraction_subset(y, fraction=fraction)
    ry, rp = stats.rankdata(y[s]), stats.rankdata(p[s])
    if np.ptp(ry) == 0 or np.ptp(rp) == 0:
        return math.nan
    return float(np.corrcoef(ry, rp)[0, 1])


@dataclass
class MetricReport:
    ndcg: float
    kendall: float
    spearman: float
    model: str = ""
    sampler: Optional[str] = None
    features: str = "audio"
    fold: Optional[int] = None
    margin: Optional[float] = None
    w: Optional[float] = None
    mu: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        """One JSON object; undefined metrics are written as null."""
        obj = asdict(self)
        for k in ("ndcg", "kendall", "spearman"):
            if math.isnan(obj[k]):
                obj[k] = None
        return json.dumps(obj, sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        obj = json.loads(text)
        for k in ("ndcg", "kendall", "spearman"):
            if obj[k] is None:
                obj[k] = math.nan
        return cls(**obj)


def evaluate(true_scores, predicted, fraction: float = DEFAULT_FRACTION, **labels) -> MetricReport:
    return MetricReport(
        ndcg=ndcg(true_scores, predicted, fraction),
        kendall=kendall_tau(true_scores, predicted, fraction),
        spearman=spearman_rho(true_scores, predicted, fraction),
        **labels,
    )
