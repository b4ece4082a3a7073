"""Exact oracles and the goodness-of-fit tests used by the validation suite."""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import DegenerateInput, DomainError, TooFewSamples
from .model import MmbmParams


def erlang_central_moment(a: int, b: float, k: int) -> float:
    """E[(Y - EY)^k] for Y ~ Erlang(a, b).

    Uses m_{j+1} = j! a sum_{i<j} m_i / i! at unit rate (integer exact) and
    rescales by b^-k.
    """
    if a < 1 or b <= 0 or k < 0:
        raise ValueError("need a >= 1, b > 0, k >= 0")
    m = [1, 0]
    for j in range(1, k):
        # j!/i! is an integer, so the recursion stays in exact integers.
        m.append(a * sum(m[i] * (math.factorial(j) // math.factorial(i)) for i in range(j)))
    return float(m[k]) / b**k


def erlang_moment_bound(a: int, b: float, k: int) -> float:
    """k! sqrt(a) (sqrt(a)^(k+1) - 1) / ((sqrt(a) - 1) b^k), valid for a >= 2."""
    if a < 2 or b <= 0 or k < 1:
        raise ValueError("need a >= 2, b > 0, k >= 1")
    ra = math.sqrt(a)
    return math.factorial(k) * ra * (ra ** (k + 1) - 1.0) / ((ra - 1.0) * b**k)


@dataclass(frozen=True)
class SupBound:
    """Tail bounds for sup_{s<=t} |R(s)| > a.

    ``stated`` is the formula with sigma_max inside the Gaussian scale, as
    stated; ``conservative`` doubles it to cover both tails.  The
    ``variance_*`` pair uses sigma_max^2, the dimensionally consistent
    scale, and is the one that remains a bound when sigma_max > 1.
    """

    stated: float
    conservative: float
    variance: float
    variance_conservative: float


def _gauss_tail_bound(scale_t: float, gap: float) -> float:
    return 2.0 / math.sqrt(2.0 * math.pi) * math.sqrt(scale_t) / gap * math.exp(-(gap * gap) / (2.0 * scale_t))


def mmbm_sup_bound(params: MmbmParams, t: float, a: float) -> SupBound:
    if t <= 0:
        raise DomainError("t must be positive")
    mu_max = float(np.max(np.abs(params.mu)))
    sigma_max = float(np.max(params.sigma))
    gap = a - mu_max * t
    if gap <= 0:
        raise DomainError(f"a={a} must exceed mu_max*t={mu_max * t}")
    stated = _gauss_tail_bound(sigma_max * t, gap)
    var = _gauss_tail_bound(sigma_max**2 * t, gap)
    return SupBound(stated, 2.0 * stated, var, 2.0 * var)


def kolmogorov_critical(alpha: float) -> float:
    """c with 2(exp(-2c^2) - exp(-8c^2)) = alpha (asymptotic, two terms)."""
    return brentq(lambda c: 2.0 * (math.exp(-2 * c * c) - math.exp(-8 * c * c)) - alpha, 0.5, 5.0)


@dataclass(frozen=True)
class KsResult:
    statistic: float
    critical: float
    passed: bool


def ks_exponential(samples, rate: float, alpha: float = 0.01) -> KsResult:
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    if n < 50:
        raise TooFewSamples(f"KS needs at least 50 samples, got {n}")
    cdf = -np.expm1(-rate * x)
    i = np.arange(1, n + 1)
    d = max(float(np.max(i / n - cdf)), float(np.max(cdf - (i - 1) / n)))
    crit = kolmogorov_critical(alpha) / math.sqrt(n)
    return KsResult(d, crit, d < crit)


def ks_two_sample(x, y, alpha: float = 0.01) -> KsResult:
    x = np.sort(np.asarray(x, dtype=float))
    y = np.sort(np.asarray(y, dtype=float))
    nx, ny = len(x), len(y)
    if min(nx, ny) < 50:
        raise TooFewSamples("two-sample KS needs at least 50 samples per side")
    grid = np.concatenate([x, y])
    fx = np.searchsorted(x, grid, side="right") / nx
    fy = np.searchsorted(y, grid, side="right") / ny
    d = float(np.max(np.abs(fx - fy)))
    crit = kolmogorov_critical(alpha) * math.sqrt((nx + ny) / (nx * ny))
    return KsResult(d, crit, d < crit)


def chi2_critical(dof: int, alpha: float) -> float:
    """Wilson-Hilferty approximation to the upper-alpha chi-square quantile."""
    if dof <= 0:
        return 0.0
    z = NormalDist().inv_cdf(1.0 - alpha)
    h = 2.0 / (9.0 * dof)
    return dof * (1.0 - h + z * math.sqrt(h)) ** 3


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    dof: int
    critical: float
    passed: bool


def chi_square_transitions(chain, P, alpha: float = 0.01) -> ChiSquareResult:
    """Pearson test of observed one-step transition counts against ``P``.

    Rows are conditioned on the observed number of departures; within a
    row, cells with expected count below 5 are pooled into one cell.
    """
    chain = np.asarray(chain, dtype=np.int64)
    P = np.asarray(P, dtype=float)
    m = len(P)
    if len(chain) < 100 * m * m:
        raise TooFewSamples(f"chain of length {len(chain)} < 100 m^2 = {100 * m * m}")
    counts = np.zeros((m, m))
    np.add.at(counts, (chain[:-1], chain[1:]), 1)
    stat = 0.0
    dof = 0
    for i in range(m):
        n_i = counts[i].sum()
        if n_i == 0:
            continue
        exp = n_i * P[i]
        small = exp < 5
        cells_obs = list(counts[i][~small])
        cells_exp = list(exp[~small])
        if np.any(small):
            cells_obs.append(counts[i][small].sum())
            cells_exp.append(exp[small].sum())
        for o, e in zip(cells_obs, cells_exp):
            if e > 0:
                stat += (o - e) ** 2 / e
            elif o > 0:
                stat = math.inf
        dof += len(cells_obs) - 1
    crit = chi2_critical(dof, alpha)
    if dof == 0:
        return ChiSquareResult(stat, 0, crit, stat == 0.0)
    return ChiSquareResult(stat, dof, crit, stat < crit)


@dataclass(frozen=True)
class RateFit:
    points: tuple
    slope: float
    intercept: float
    slope_logcorrected: float
    intercept_logcorrected: float
    rss: float


def fit_rate(points: Sequence[tuple]) -> RateFit:
    """Least-squares slopes of log(stat) and log(stat / log n) against log n."""
    pts = tuple((float(n), float(s)) for n, s in points)
    ns = np.array([p[0] for p in pts])
    st = np.array([p[1] for p in pts])
    if len(set(ns.tolist())) < 3:
        raise DegenerateInput("need at least three distinct n")
    if np.any(st <= 0) or np.any(ns <= 1):
        raise DegenerateInput("statistics must be positive and n > 1")
    x = np.log(ns)
    A = np.column_stack([x, np.ones_like(x)])
    (slope, icpt), rss, *_ = np.linalg.lstsq(A, np.log(st), rcond=None)
    (slope_c, icpt_c), *_ = np.linalg.lstsq(A, np.log(st / np.log(ns)), rcond=None)
    return RateFit(pts, float(slope), float(icpt), float(slope_c), float(icpt_c), float(rss[0]) if len(rss) else 0.0)


def mean_within_se(samples, target: float, k: float = 3.0) -> bool:
    x = np.asarray(samples, dtype=float)
    se = x.std(ddof=1) / math.sqrt(len(x))
    return abs(x.mean() - target) <= k * se
