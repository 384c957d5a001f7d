"""Robustness statistics over hyperparameter grids and the Wilcoxon signed-rank test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import ContractError, DegenerateTestError

ALTERNATIVES = ("two-sided", "greater", "less")
EXACT_MAX_N = 12


def _scores(scores) -> np.ndarray:
    arr = np.asarray(list(scores), dtype=np.float64)
    if arr.size == 0:
        raise ContractError("scores must be non-empty")
    return arr


def spread(scores) -> float:
    arr = _scores(scores)
    return float(arr.max() - arr.min())


def median(scores) -> float:
    """Median; an even-length list gives the mean of the two central values."""
    return float(np.median(_scores(scores)))


def intrinsic_robustness(nll_scores) -> float:
    med = median(nll_scores)
    if not med > 0:
        raise ContractError(f"intrinsic robustness needs a positive median NLL, got {med}")
    return 1.0 / med


def extrinsic_robustness(acc_scores) -> float:
    return median(acc_scores)


# -- Wilcoxon signed-rank ------------------------------------------------------------


class WilcoxonResult(NamedTuple):
    statistic: float  # W+, the sum of ranks of positive differences
    pvalue: float
    n: int  # differences left after dropping zeros
    method: str  # exact | normal


def signed_rank_null(ranks: np.ndarray) -> np.ndarray:
    """W+ for every one of the 2^n sign patterns of the given ranks."""
    n = len(ranks)
    patterns = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
    return patterns @ ranks


def _tail_p(null: np.ndarray, w: float, alternative: str) -> float:
    tol = 1e-9 * max(1.0, abs(w))
    upper = float(np.mean(null >= w - tol))
    lower = float(np.mean(null <= w + tol))
    if alternative == "greater":
        return upper
    if alternative == "less":
        return lower
    return min(1.0, 2.0 * min(upper, lower))


def wilcoxon_signed_rank(a, b=None, alternative: str = "two-sided", exact: bool | None = None) -> WilcoxonResult:
    """Signed-rank test of a - b (or of ``a`` alone when ``b`` is None).

    Zero differences are dropped and tied magnitudes get average ranks.
    ``greater`` tests whether a tends to exceed b. The p-value is exact by
    enumeration for n <= 12 (or when ``exact`` is True); otherwise it uses the
    normal approximation with continuity and tie corrections.
    """
    if alternative not in ALTERNATIVES:
        raise ValueError(f"alternative must be one of {ALTERNATIVES}, got {alternative!r}")
    a = np.asarray(a, dtype=np.float64)
    d = a if b is None else a - np.asarray(b, dtype=np.float64)
    if b is not None and np.shape(b) != a.shape:
        raise ContractError(f"samples differ in length: {a.shape} vs {np.shape(b)}")
    if d.size == 0:
        raise ContractError("need at least one pair")
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise DegenerateTestError("all differences are zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    use_exact = n <= EXACT_MAX_N if exact is None else exact
    if use_exact:
        return WilcoxonResult(w_plus, _tail_p(signed_rank_null(ranks), w_plus, alternative), n, "exact")
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts ** 3 - counts)) / 48.0
    sd = math.sqrt(var)
    if alternative == "greater":
        p = 1.0 - ndtr((w_plus - mean - 0.5) / sd)
    elif alternative == "less":
        p = ndtr((w_plus - mean + 0.5) / sd)
    else:
        z = max(abs(w_plus - mean) - 0.5, 0.0) / sd
        p = min(1.0, 2.0 * (1.0 - ndtr(z)))
    return WilcoxonResult(w_plus, float(p), n, "normal")


# -- aggregate report -----------------------------------------------------------------


@dataclass
class StrategySummary:
    n_cells: int
    spread: float
    median: float
    intrinsic_robustness: float
    extrinsic_robustness: float
    nll_median: float
    diverged: int


@dataclass
class RobustnessReport:
    strategies: dict = field(default_factory=dict)  # name -> StrategySummary
    wilcoxon: dict = field(default_factory=dict)  # "a vs b" -> {alternative: {statistic, pvalue, n, method}}
    failed_cells: int = 0

    def to_dict(self) -> dict:
        return {
            "strategies": {k: vars(v) for k, v in self.strategies.items()},
            "wilcoxon": self.wilcoxon,
            "failed_cells": self.failed_cells,
        }


def summarize(acc, nll, diverged=0) -> StrategySummary:
    acc = _scores(acc)
    nll = _scores(nll)
    finite = nll[np.isfinite(nll)]
    intrinsic = intrinsic_robustness(finite) if finite.size and np.median(finite) > 0 else float("nan")
    return StrategySummary(
        n_cells=int(acc.size), spread=spread(acc), median=median(acc), intrinsic_robustness=intrinsic,
        extrinsic_robustness=extrinsic_robustness(acc), nll_median=median(nll), diverged=int(diverged),
    )


def pairwise_wilcoxon(paired: dict) -> dict:
    """Wilcoxon results for every ordered pair of strategies over matched cells.

    ``paired`` maps strategy -> {cell key: score}; only keys present in both are used.
    """
    out = {}
    names = sorted(paired)
    for i, first in enumerate(names):
        for second in names[i + 1:]:
            keys = sorted(set(paired[first]) & set(paired[second]))
            entry = {}
            for alternative in ALTERNATIVES:
                try:
                    res = wilcoxon_signed_rank(
                        [paired[first][k] for k in keys], [paired[second][k] for k in keys], alternative
                    )
                    entry[alternative] = res._asdict()
                except (DegenerateTestError, ContractError) as exc:
                    entry[alternative] = {"error": str(exc)}
            out[f"{first} vs {second}"] = entry
    return out
