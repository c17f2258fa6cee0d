"""Hypothesis tests and agreement statistics used to compare translations."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Hashable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import beta, rankdata

EXACT_MAX_N = 25


class StatsError(ValueError):
    pass


class DegenerateInputError(StatsError):
    pass


@dataclass(frozen=True)
class StatResult:
    statistic: float
    p_value: float | None
    effect_size: float | None
    ci: tuple[float, float] | None
    n: int
    method: str
    details: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value,
                "effect_size": self.effect_size,
                "ci": list(self.ci) if self.ci is not None else None,
                "n": self.n, "method": self.method, "details": dict(self.details)}


def effect_size_r(z: float, n: int) -> float:
    """r = |z| / sqrt(N)."""
    return abs(z) / math.sqrt(n)


# -- Wilcoxon signed-rank, Pratt zero handling ----------------------------------

def _pratt_ranks(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ranks of |d| over all pairs (zeros included), returned for non-zero d."""
    ranks = rankdata(np.abs(d))
    nz = d != 0
    return ranks[nz], d[nz]


def _exact_two_sided(ranks: np.ndarray, w_plus: float) -> float:
    # Averaged tie ranks are multiples of 1/2, so doubled ranks are integers.
    r2 = np.rint(ranks * 2).astype(np.int64)
    total = int(r2.sum())
    dist = np.zeros(total + 1, dtype=object)
    dist[0] = 1
    for r in r2:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[:total + 1 - r]
        dist = dist + shifted
    count = sum(int(c) for c in dist)
    w2 = int(round(w_plus * 2))
    dev = abs(2 * w2 - total)
    hits = sum(int(dist[k]) for k in range(total + 1) if abs(2 * k - total) >= dev)
    return min(1.0, hits / count)


def wilcoxon_pratt(pairs: Sequence[tuple[float, float]], method: str = "auto") -> StatResult:
    """Wilcoxon signed-rank test of a - b with Pratt zero handling.

    Zero differences take part in ranking and are then dropped from the rank
    sum. ``z`` is continuity-corrected and signed (positive when a > b tends
    to hold); the effect size r = |z|/sqrt(N) counts zero pairs in N. With
    ``method="auto"`` the p-value is exact for N <= 25 and normal otherwise.
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise StatsError("expected a sequence of (a, b) pairs")
    n = arr.shape[0]
    if n < 5:
        raise StatsError(f"need at least 5 pairs, got {n}")
    d = arr[:, 0] - arr[:, 1]
    if not np.all(np.isfinite(d)):
        raise StatsError("non-finite values")
    ranks, dnz = _pratt_ranks(d)
    if ranks.size == 0:
        raise DegenerateInputError("all differences are zero")
    w_plus = float(ranks[dnz > 0].sum())
    w_minus = float(ranks[dnz < 0].sum())
    mean = float(ranks.sum()) / 2.0
    var = float((ranks ** 2).sum()) / 4.0
    dev = w_plus - mean
    corrected = max(abs(dev) - 0.5, 0.0)
    z = math.copysign(corrected, dev) / math.sqrt(var) if corrected else 0.0
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        p = _exact_two_sided(ranks, w_plus)
    elif method == "normal":
        p = float(min(1.0, 2.0 * ndtr(-abs(z))))
    else:
        raise StatsError(f"unknown method {method!r}")
    return StatResult(z, p, effect_size_r(z, n), None, n, f"wilcoxon-pratt/{method}",
                      {"w_plus": w_plus, "w_minus": w_minus, "n_zero": int(n - ranks.size)})


# -- binomial -------------------------------------------------------------------

def _binom_pmf(k: int, n: int, p: float) -> float:
    if p == 0.0:
        return 1.0 if k == 0 else 0.0
    if p == 1.0:
        return 1.0 if k == n else 0.0
    logp = (math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
            + k * math.log(p) + (n - k) * math.log1p(-p))
    return math.exp(logp)


def clopper_pearson(successes: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    alpha = 1.0 - level
    lo = 0.0 if successes == 0 else float(beta.ppf(alpha / 2, successes, trials - successes + 1))
    hi = 1.0 if successes == trials else float(beta.ppf(1 - alpha / 2, successes + 1, trials - successes))
    return lo, hi


def binomial_test(successes: int, trials: int, p0: float = 0.5) -> StatResult:
    """Exact two-sided binomial test with a Clopper-Pearson 95% interval.

    The p-value sums the probabilities of every outcome no more likely than
    the observed one under ``p0``.
    """
    if trials < 1 or not 0 <= successes <= trials:
        raise StatsError("need 0 <= successes <= trials and trials >= 1")
    if not 0 <= p0 <= 1:
        raise StatsError("p0 must be in [0, 1]")
    pmf = [_binom_pmf(k, trials, p0) for k in range(trials + 1)]
    observed = pmf[successes]
    # Relative slack so outcomes tied with the observed one are not lost to rounding.
    p = math.fsum(q for q in pmf if q <= observed * (1 + 1e-7))
    return StatResult(successes / trials, min(1.0, p), None,
                      clopper_pearson(successes, trials), trials, "binomial/exact+clopper-pearson")


# -- Krippendorff's alpha (nominal) ---------------------------------------------

def coincidence_matrix(ratings: Sequence[Sequence[Hashable | None]]) -> tuple[list, np.ndarray]:
    """Coincidences o_ck over pairable values; ``ratings`` is raters x items."""
    if len(ratings) < 2:
        raise StatsError("need at least two raters")
    n_items = len(ratings[0])
    if any(len(row) != n_items for row in ratings):
        raise StatsError("every rater row must cover the same items")
    units = []
    for j in range(n_items):
        vals = [row[j] for row in ratings if row[j] is not None and not _is_nan(row[j])]
        if len(vals) >= 2:
            units.append(vals)
    if not units:
        raise StatsError("no item has two or more ratings (no pairable values)")
    cats = sorted({v for u in units for v in u}, key=lambda v: (str(type(v)), v))
    pos = {c: k for k, c in enumerate(cats)}
    o = np.zeros((len(cats), len(cats)), dtype=np.float64)
    for vals in units:
        m = len(vals)
        counts = Counter(vals)
        for c, nc in counts.items():
            for k, nk in counts.items():
                pairs = nc * (nk - 1) if c == k else nc * nk
                o[pos[c], pos[k]] += pairs / (m - 1)
    return cats, o


def _is_nan(v) -> bool:
    return isinstance(v, float) and math.isnan(v)


def krippendorff_alpha(ratings: Sequence[Sequence[Hashable | None]]) -> StatResult:
    """Nominal Krippendorff's alpha, 1 - D_o/D_e, with missing ratings as None."""
    cats, o = coincidence_matrix(ratings)
    n_c = o.sum(axis=1)
    n = float(n_c.sum())
    off = ~np.eye(len(cats), dtype=bool)
    observed = float(o[off].sum())
    expected = float(np.outer(n_c, n_c)[off].sum())
    if observed == 0.0:
        alpha = 1.0
    elif expected == 0.0:
        raise StatsError("expected disagreement is zero")
    else:
        alpha = 1.0 - (n - 1.0) * observed / expected
    return StatResult(alpha, None, None, None, int(round(n)), "krippendorff-alpha/nominal",
                      {"categories": [str(c) for c in cats], "pairable_values": n})


# -- paired bootstrap -----------------------------------------------------------

def paired_bootstrap(pairs: Sequence[tuple[float, float]], resamples: int = 1000, seed: int = 0,
                     level: float = 0.95) -> StatResult:
    """Percentile bootstrap CI of the mean difference a - b."""
    if resamples < 100:
        raise StatsError("resamples must be >= 100")
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] == 0:
        raise StatsError("expected a non-empty sequence of (a, b) pairs")
    d = arr[:, 0] - arr[:, 1]
    n = d.size
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(resamples, n))
    means = d[idx].mean(axis=1)
    tail = (1.0 - level) / 2 * 100
    lo, hi = np.percentile(means, [tail, 100 - tail])
    return StatResult(float(d.mean()), None, None, (float(min(lo, hi)), float(max(lo, hi))), n,
                      "paired-bootstrap/percentile", {"resamples": resamples, "seed": seed})
