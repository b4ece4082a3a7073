"""Coupled MMBM skeleton, exact coarsening, the level-n fluid path and the
discrepancy metrics between them.

The finest level carries R at every epoch and the minimum of R over every
fine interval.  Because level-n epochs are a subset of the finest ones,
every coarser level's drops and rises follow from minima of fine minima,
so all levels live on the same sample path.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import LengthMismatch
from .model import FlipFlopLevel, LevelSchedule, MmbmParams, build_level
from .sampling import (
    EpochLedger,
    PhaseSequence,
    WhIncrements,
    assign_phases,
    sample_ledger,
    sample_phase_chain,
    sample_wh_increments,
)


def _prefix_sum(x: np.ndarray, compensated: bool = False) -> np.ndarray:
    if not compensated:
        return np.cumsum(x)
    out = np.empty_like(x)
    s = 0.0
    c = 0.0
    for k, v in enumerate(x.tolist()):
        t = s + v
        if abs(s) >= abs(v):
            c += (s - t) + v
        else:
            c += (v - t) + s
        s = t
        out[k] = s + c
    return out


@dataclass(frozen=True)
class CoupledBundle:
    ledger: EpochLedger
    phases: PhaseSequence
    increments: WhIncrements
    r_at_epoch: np.ndarray
    interval_min: np.ndarray
    params: Optional[MmbmParams] = None
    schedule: Optional[LevelSchedule] = None

    @property
    def n_max(self) -> int:
        return self.ledger.n_max

    @property
    def interval_start(self) -> np.ndarray:
        """R at the left end of each fine interval."""
        return np.concatenate([[0.0], self.r_at_epoch[:-1]])


def build_bundle(
    ledger: EpochLedger,
    phases: PhaseSequence,
    increments: WhIncrements,
    params: Optional[MmbmParams] = None,
    schedule: Optional[LevelSchedule] = None,
    compensated: bool = False,
) -> CoupledBundle:
    L = np.asarray(increments.L, dtype=float)
    H = np.asarray(increments.H, dtype=float)
    k = len(ledger)
    if len(L) != k or len(H) != k or len(phases.phase_at_epoch) != k:
        raise LengthMismatch(f"ledger has {k} epochs, increments {len(L)}/{len(H)}, phases {len(phases.phase_at_epoch)}")
    r = _prefix_sum(H - L, compensated)
    start = np.concatenate([[0.0], r[:-1]])
    return CoupledBundle(ledger, phases, WhIncrements(L, H), r, start - L, params, schedule)


def simulate_bundle(
    rng: np.random.Generator,
    params: MmbmParams,
    schedule: LevelSchedule,
    n_max: int,
    horizon: float,
) -> CoupledBundle:
    """Sample ledger, phases and skeleton increments and assemble the bundle."""
    ledger = sample_ledger(rng, schedule, n_max, horizon)
    level0 = build_level(params, schedule, 0)
    x0 = sample_phase_chain(rng, params, level0, int(np.count_nonzero(ledger.layers == 0)))
    phases = assign_phases(ledger, x0)
    increments = sample_wh_increments(rng, build_level(params, schedule, n_max), phases, ledger)
    return build_bundle(ledger, phases, increments, params, schedule)


def restrict_bundle(bundle: CoupledBundle, n: int) -> CoupledBundle:
    """The same sample path seen through the level-n epochs only."""
    if n > bundle.n_max:
        raise ValueError(f"level {n} exceeds bundle n_max={bundle.n_max}")
    mask = bundle.ledger.level_mask(n)
    idx = np.flatnonzero(mask)
    ledger = bundle.ledger.restrict(n)
    phases = bundle.phases.restrict(mask)
    if len(idx) == 0:
        empty = np.empty(0)
        return CoupledBundle(ledger, phases, WhIncrements(empty, empty), empty, empty, bundle.params, bundle.schedule)
    starts = np.concatenate([[0], idx[:-1] + 1])
    cmin = np.minimum.reduceat(bundle.interval_min[: idx[-1] + 1], starts)
    r = bundle.r_at_epoch[idx]
    start_level = np.concatenate([[0.0], r[:-1]])
    # Single-interval blocks keep the fine values bit for bit.
    single = (idx - starts) == 0
    L = np.where(single, bundle.increments.L[idx], start_level - cmin)
    H = np.where(single, bundle.increments.H[idx], r - cmin)
    inc = WhIncrements(L, H)
    return CoupledBundle(ledger, phases, inc, r, cmin, bundle.params, bundle.schedule)


@dataclass(frozen=True)
class CoarseLevelData:
    """Level-n view of a bundle.

    ``phases_n`` has K+1 entries X^n(0..K); cycle k (1-based) runs in phase
    ``phases_n[k-1]``.  ``L_n, H_n, L_hat, H_hat, theta, chi`` have K entries.
    """

    n: int
    lam: float
    theta: np.ndarray
    phases_n: np.ndarray
    L_n: np.ndarray
    H_n: np.ndarray
    L_hat: np.ndarray
    H_hat: np.ndarray
    chi: np.ndarray
    r_at_theta: np.ndarray
    coarse_min: np.ndarray

    def __len__(self):
        return len(self.theta)


def coarsen(bundle: CoupledBundle, n: int, level: Optional[FlipFlopLevel] = None) -> CoarseLevelData:
    if level is None:
        if bundle.params is None or bundle.schedule is None:
            raise ValueError("bundle carries no model; pass the level explicitly")
        level = build_level(bundle.params, bundle.schedule, n)
    sub = restrict_bundle(bundle, n)
    x0 = bundle.phases.x0
    phases_n = np.concatenate([x0[:1], sub.phases.phase_at_epoch]).astype(np.int64)
    cyc = phases_n[:-1]
    lam = level.lam
    L_hat = level.omega[cyc] * sub.increments.L / lam
    H_hat = level.eta[cyc] * sub.increments.H / lam
    durations = np.empty(2 * len(cyc))
    durations[0::2] = L_hat
    durations[1::2] = H_hat
    chi = np.cumsum(durations)[1::2]
    return CoarseLevelData(
        n=n,
        lam=lam,
        theta=sub.ledger.epochs,
        phases_n=phases_n,
        L_n=sub.increments.L,
        H_n=sub.increments.H,
        L_hat=L_hat,
        H_hat=H_hat,
        chi=chi,
        r_at_theta=sub.r_at_epoch,
        coarse_min=sub.interval_min,
    )


@dataclass(frozen=True)
class SfpPath:
    """Piecewise-linear level path of the fluid process at one level.

    Segment 2(k-1) is the down stretch of cycle k, segment 2k-1 the up
    stretch.  ``times``/``values`` list the 2K+1 breakpoints; values are
    running sums of the segment displacements (-L_1, +H_1, -L_2, ...).
    """

    level: FlipFlopLevel
    coarse: CoarseLevelData
    times: np.ndarray
    values: np.ndarray
    signs: np.ndarray
    seg_phase: np.ndarray
    slopes: np.ndarray

    @property
    def n(self) -> int:
        return self.coarse.n


def build_sfp_path(coarse: CoarseLevelData, level: FlipFlopLevel) -> SfpPath:
    if coarse.n != level.n:
        raise ValueError(f"coarse data is level {coarse.n}, level object is {level.n}")
    K = len(coarse)
    cyc = coarse.phases_n[:-1]
    dur = np.empty(2 * K)
    dur[0::2] = coarse.L_hat
    dur[1::2] = coarse.H_hat
    disp = np.empty(2 * K)
    disp[0::2] = -coarse.L_n
    disp[1::2] = coarse.H_n
    signs = np.tile([-1, 1], K)
    seg_phase = np.repeat(cyc, 2)
    slopes = np.empty(2 * K)
    slopes[0::2] = level.slope_down[cyc]
    slopes[1::2] = level.slope_up[cyc]
    times = np.concatenate([[0.0], np.cumsum(dur)])
    values = np.concatenate([[0.0], np.cumsum(disp)])
    return SfpPath(level, coarse, times, values, signs, seg_phase, slopes)


@dataclass(frozen=True)
class PathValue:
    value: np.ndarray | float
    extrapolated: bool


def eval_sfp(path: SfpPath, t) -> PathValue:
    """Evaluate R^n at time(s) ``t`` by linear interpolation between breakpoints.

    Past the last breakpoint the last segment's slope is used and the
    result is flagged as extrapolated.
    """
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    last = path.times[-1]
    beyond = t > last
    if len(path.slopes) == 0:
        out = np.zeros_like(t)
    else:
        out = np.interp(t, path.times, path.values)
        if np.any(beyond):
            out[beyond] = path.values[-1] + path.slopes[-1] * (t[beyond] - last)
    return PathValue(float(out[0]) if scalar else out, bool(np.any(beyond)))


def path_phase(path: SfpPath, t) -> np.ndarray:
    """Phase coordinate of J^n at time(s) t."""
    chi0 = np.concatenate([[0.0], path.coarse.chi])
    k = np.searchsorted(chi0, np.asarray(t, dtype=float), side="right") - 1
    return path.coarse.phases_n[k]


def path_state_labels(path: SfpPath, labels=None) -> list[str]:
    out = []
    for s, ph in zip(path.signs, path.seg_phase):
        lab = labels[ph] if labels is not None else int(ph)
        out.append(f"{'+' if s > 0 else '-'}:{lab}")
    return out


def delta_diagnostic(n: int, q: float = 2.0) -> float:
    """Reference scale 2 p n^((q+1/2)/p - 1) with p = floor(log n); nan if p = 0."""
    if n < 1:
        return math.nan
    p = math.floor(math.log(n))
    if p < 1:
        return math.nan
    return 2.0 * p * n ** ((q + 0.5) / p - 1.0)


@dataclass(frozen=True)
class DiscrepancyReport:
    n: int
    sup_level_gap: float
    embed_gap: float
    min_gap: float
    time_gap_chi: float
    time_gap_theta: float
    chi_theta_gap: float
    phase_mismatch: float
    delta_n: float
    partial: bool


def discrepancy(bundle: CoupledBundle, path: SfpPath, T: float) -> DiscrepancyReport:
    coarse = path.coarse
    epochs = bundle.ledger.epochs
    last_fine = epochs[-1] if len(epochs) else 0.0
    last_chi = path.times[-1]
    partial = bool(T > last_fine or T > last_chi)

    sel = epochs <= T
    theta = np.concatenate([[0.0], epochs[sel]])
    r_true = np.concatenate([[0.0], bundle.r_at_epoch[sel]])
    r_fluid = eval_sfp(path, theta).value
    sup_gap = float(np.max(np.abs(r_true - r_fluid)))

    if np.any(sel):
        j_true = bundle.phases.phase_at_epoch[sel]
        j_fluid = path_phase(path, epochs[sel])
        mismatch = float(np.mean(j_true != j_fluid))
    else:
        mismatch = 0.0

    K = len(coarse)
    if K:
        embed = float(np.max(np.abs(path.values[2::2] - coarse.r_at_theta)))
        min_gap = float(np.max(np.abs(path.values[1::2] - coarse.coarse_min)))
    else:
        embed = min_gap = 0.0
    kT = int(np.count_nonzero(coarse.theta <= T))
    if kT:
        k = np.arange(1, kT + 1)
        ref = 2.0 * k / coarse.lam
        gap_chi = float(np.max(np.abs(coarse.chi[:kT] - ref)))
        gap_theta = float(np.max(np.abs(coarse.theta[:kT] - ref)))
        chi_theta = float(np.max(np.abs(coarse.chi[:kT] - coarse.theta[:kT])))
    else:
        gap_chi = gap_theta = chi_theta = 0.0
    return DiscrepancyReport(
        n=coarse.n,
        sup_level_gap=sup_gap,
        embed_gap=embed,
        min_gap=min_gap,
        time_gap_chi=gap_chi,
        time_gap_theta=gap_theta,
        chi_theta_gap=chi_theta,
        phase_mismatch=mismatch,
        delta_n=delta_diagnostic(coarse.n),
        partial=partial,
    )


def level_report(bundle: CoupledBundle, n: int, T: float) -> DiscrepancyReport:
    """Coarsen, build the fluid path and measure it in one call."""
    level = build_level(bundle.params, bundle.schedule, n)
    path = build_sfp_path(coarsen(bundle, n, level), level)
    return discrepancy(bundle, path, T)


def write_path_csv(path_obj: SfpPath, fh_path, labels=None) -> None:
    """Dump breakpoints as ``t,value,state``; state is that of the segment
    starting at the breakpoint (empty for the final one)."""
    states = path_state_labels(path_obj, labels)
    with open(fh_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "value", "state"])
        for k, (t, v) in enumerate(zip(path_obj.times, path_obj.values)):
            if k == len(path_obj.times) - 1 and k == 0:
                break
            w.writerow([repr(float(t)), repr(float(v)), states[k] if k < len(states) else ""])
