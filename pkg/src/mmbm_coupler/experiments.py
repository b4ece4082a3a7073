"""Replication-level experiment drivers shared by the CLI and the test suite.

Replication r always draws from ``substream(base_seed, r)`` and results are
returned in replication order, so output does not depend on the number of
worker threads.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, TypeVar

import numpy as np

from .coupling import CoupledBundle, DiscrepancyReport, level_report, simulate_bundle
from .model import LevelSchedule, MmbmParams
from .passage import PassageEstimate, mc_passage
from .sampling import substream
from .stats import RateFit, fit_rate

log = logging.getLogger(__name__)
T_ = TypeVar("T_")


def run_replications(fn: Callable[[int], T_], replications: int, threads: int = 1) -> list:
    """Evaluate ``fn(r)`` for r in range(replications), ordered by r.

    A replication that raises is logged and recorded as ``None``.
    """

    def guarded(r):
        try:
            return fn(r)
        except Exception as exc:  # a failed replication is skipped, not fatal
            log.warning("replication %d failed: %s", r, exc)
            return None

    if threads <= 1:
        return [guarded(r) for r in range(replications)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(guarded, range(replications)))


def replicate_bundle(params, schedule, n_max, horizon, base_seed, r) -> CoupledBundle:
    return simulate_bundle(substream(base_seed, r), params, schedule, n_max, horizon)


@dataclass
class RateResult:
    reports: list  # per replication: list[DiscrepancyReport] or None
    levels: tuple
    medians: dict = field(default_factory=dict)
    fit: RateFit | None = None
    failed: int = 0

    def rows(self):
        for r, reps in enumerate(self.reports):
            if reps is None:
                continue
            for rep in reps:
                yield r, rep


def run_rate(
    params: MmbmParams,
    schedule: LevelSchedule,
    levels: Sequence[int],
    n_max: int,
    T: float,
    horizon: float,
    replications: int,
    base_seed: int = 0,
    threads: int = 1,
) -> RateResult:
    levels = tuple(sorted(levels))

    def one(r):
        bundle = replicate_bundle(params, schedule, n_max, horizon, base_seed, r)
        return [level_report(bundle, n, T) for n in levels]

    reports = run_replications(one, replications, threads)
    res = RateResult(reports, levels, failed=sum(x is None for x in reports))
    ok = [x for x in reports if x is not None]
    if ok:
        for j, n in enumerate(levels):
            res.medians[n] = {
                "sup_gap": float(np.median([x[j].sup_level_gap for x in ok])),
                "chi_theta_gap": float(np.median([x[j].chi_theta_gap for x in ok])),
                "phase_mismatch": float(np.mean([x[j].phase_mismatch for x in ok])),
                "partial": int(sum(x[j].partial for x in ok)),
            }
        if len(levels) >= 3 and all(res.medians[n]["sup_gap"] > 0 for n in levels) and min(levels) > 1:
            res.fit = fit_rate([(n, res.medians[n]["sup_gap"]) for n in levels])
    return res


def run_mc_passage(
    params: MmbmParams,
    schedule: LevelSchedule,
    x: float,
    start_phase: int,
    bundles: int,
    horizon: float,
    n_max: int = 0,
    base_seed: int = 0,
    threads: int = 1,
) -> PassageEstimate:
    """Monte Carlo passage law from ``bundles`` skeletons started in ``start_phase``.

    The passage phase is exact at any skeleton level, so a coarse n_max
    suffices.
    """
    forced = params.with_initial_phase(start_phase)
    sims = run_replications(
        lambda r: replicate_bundle(forced, schedule, n_max, horizon, base_seed, r), bundles, threads
    )
    return mc_passage([b for b in sims if b is not None], x, start_phase, params.m)


@dataclass(frozen=True)
class SupTail:
    """Empirical P(sup_{s<=t} |R(s)| > a) for each ``a``, over ``windows`` replications."""

    t: float
    a: tuple
    frequencies: tuple
    windows: int


def sup_tail_frequency(
    params: MmbmParams,
    schedule: LevelSchedule,
    n_max: int,
    t: float,
    a_values: Sequence[float],
    replications: int,
    base_seed: int = 0,
    chunk: int = 10_000,
) -> SupTail:
    """Estimate sup-tail probabilities from skeleton grids.

    Long bundles are cut into consecutive windows of length t, each starting
    at a fine epoch; by the strong Markov property every window is a fresh
    replication started in the phase current at its start.  Within a window
    the upward excursion is read at the fine epochs and the downward one at
    the exact minima of the fine intervals lying inside the window, so the
    result bounds the continuous-time supremum from below.
    """
    if t <= 0 or replications < 1:
        raise ValueError("need t > 0 and replications >= 1")
    a_arr = np.asarray(a_values, dtype=float)
    exceed = np.zeros(len(a_arr), dtype=np.int64)
    done = 0
    c = 0
    rate = schedule.lam(n_max) / 2.0
    while done < replications:
        want = min(chunk, replications - done)
        horizon = want * (t + 1.0 / max(rate, 1e-12)) * 1.1 + 10.0 * t
        b = simulate_bundle(substream(base_seed, c), params, schedule, n_max, horizon)
        c += 1
        theta = np.concatenate([[0.0], b.ledger.epochs])
        r = np.concatenate([[0.0], b.r_at_epoch])
        imin = b.interval_min  # interval k runs from theta[k] to theta[k+1]
        starts, ends = [], []
        s = 0
        last = len(theta) - 1
        while len(starts) < want:
            j = int(np.searchsorted(theta, theta[s] + t, side="right")) - 1
            if j >= last:
                break  # the window would run past the simulated data
            starts.append(s)
            ends.append(j)
            s = j + 1
        if not starts:
            continue
        starts = np.asarray(starts)
        ends = np.asarray(ends)
        stop = ends[-1] + 1
        up = np.maximum.reduceat(r[:stop], starts) - r[starts]
        # drop the interval starting at each window's last epoch: it leaves the window
        inner = imin[:stop].copy()
        inner[ends] = np.inf
        down = r[starts] - np.minimum.reduceat(inner, starts)
        sup = np.maximum(up, np.where(np.isfinite(down), down, 0.0))
        exceed += (sup[:, None] > a_arr[None, :]).sum(axis=0)
        done += len(starts)
    return SupTail(float(t), tuple(a_arr.tolist()), tuple((exceed / done).tolist()), done)
