"""Layered Poisson observation epochs, the uniformized phase chain and the
Wiener-Hopf skeleton increments at the finest level.

Every sampler takes an explicit ``numpy.random.Generator``; use
:func:`substream` to obtain the per-replication stream for
``(base_seed, replication_index)``.
"""

from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientChain, LengthMismatch
from .model import FlipFlopLevel, LevelSchedule, MmbmParams


def substream(base_seed: int, index: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(base_seed, index)``."""
    seq = np.random.SeedSequence([int(base_seed), int(index)])
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class EpochLedger:
    """Merged arrivals of the layers M^0, M~^1, ..., M~^n_max on (0, horizon].

    ``layers[k]`` is the layer that produced ``epochs[k]``; the level-n
    epochs are exactly those with ``layers <= n``.
    """

    horizon: float
    n_max: int
    epochs: np.ndarray
    layers: np.ndarray

    def __len__(self):
        return len(self.epochs)

    def level_mask(self, n: int) -> np.ndarray:
        return self.layers <= n

    def level_epochs(self, n: int) -> np.ndarray:
        return self.epochs[self.layers <= n]

    def restrict(self, n: int) -> "EpochLedger":
        mask = self.layers <= n
        return EpochLedger(self.horizon, min(n, self.n_max), self.epochs[mask], self.layers[mask])

    @property
    def durations(self) -> np.ndarray:
        """Length of each interval [epochs[k-1], epochs[k]), with epochs[-1] := 0."""
        return np.diff(self.epochs, prepend=0.0)


def sample_ledger(rng: np.random.Generator, schedule: LevelSchedule, n_max: int, horizon: float) -> EpochLedger:
    if n_max < 0:
        raise ValueError("n_max must be nonnegative")
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    rates = schedule.layer_rates(n_max)
    times, tags = [], []
    for layer, rate in enumerate(rates):
        count = rng.poisson(rate * horizon) if rate > 0 and horizon > 0 else 0
        times.append(rng.uniform(0.0, horizon, size=count))
        tags.append(np.full(count, layer, dtype=np.int64))
    times = np.concatenate(times) if times else np.empty(0)
    tags = np.concatenate(tags) if tags else np.empty(0, dtype=np.int64)
    # Exact float ties are ordered by layer index.
    order = np.lexsort((tags, times))
    epochs = times[order]
    epochs.setflags(write=False)
    layers = tags[order]
    layers.setflags(write=False)
    return EpochLedger(float(horizon), int(n_max), epochs, layers)


@dataclass(frozen=True)
class PhaseSequence:
    """Phase chain X^0 and the phase J(theta) right after each ledger epoch."""

    x0: np.ndarray
    phase_at_epoch: np.ndarray

    @property
    def interval_phases(self) -> np.ndarray:
        """Phase on each fine interval; interval 0 is the leading one from 0."""
        return np.concatenate([self.x0[:1], self.phase_at_epoch[:-1]]).astype(np.int64)

    def restrict(self, mask: np.ndarray) -> "PhaseSequence":
        return PhaseSequence(self.x0, self.phase_at_epoch[mask])


def sample_phase_chain(rng: np.random.Generator, params: MmbmParams, level0: FlipFlopLevel, k_steps: int) -> np.ndarray:
    """Draw X^0(0..k_steps) with X^0(0) ~ p and transitions from ``level0.P``."""
    if k_steps < 0:
        raise ValueError("k_steps must be nonnegative")
    m = params.m
    out = np.empty(k_steps + 1, dtype=np.int64)
    u = rng.random(k_steps + 1)
    cum_p = np.cumsum(params.p)
    out[0] = min(int(np.searchsorted(cum_p, u[0], side="right")), m - 1)
    if m == 1:
        out[:] = 0
        return out
    cum_rows = [np.cumsum(row).tolist() for row in level0.P]
    state = int(out[0])
    for k in range(1, k_steps + 1):
        state = min(bisect.bisect_right(cum_rows[state], u[k]), m - 1)
        out[k] = state
    return out


def assign_phases(ledger: EpochLedger, x0: np.ndarray) -> PhaseSequence:
    x0 = np.asarray(x0, dtype=np.int64)
    n_layer0 = np.cumsum(ledger.layers == 0)
    needed = int(n_layer0[-1]) + 1 if len(ledger) else 1
    if len(x0) < needed:
        raise InsufficientChain(f"need {needed} chain states, got {len(x0)}")
    phase_at_epoch = x0[n_layer0] if len(ledger) else np.empty(0, dtype=np.int64)
    return PhaseSequence(x0, phase_at_epoch)


@dataclass(frozen=True)
class WhIncrements:
    """Per-interval drop to the minimum (L) and rise from it (H)."""

    L: np.ndarray
    H: np.ndarray


def sample_wh_increments(
    rng: np.random.Generator,
    level: FlipFlopLevel,
    phases: PhaseSequence,
    ledger: EpochLedger,
) -> WhIncrements:
    """Sample (L_k, H_k) for every fine interval of ``ledger``.

    Each pair is drawn jointly with the interval's actual duration t: the
    Brownian endpoint X ~ N(mu t, sigma^2 t) and the bridge minimum
    M = (X - sqrt(X^2 + 2 sigma^2 t E)) / 2, E ~ Exp(1).  Integrating t
    against Exp(lambda/2) gives independent L ~ Exp(omega), H ~ Exp(eta),
    while keeping R(theta_k) consistent with the epoch times.
    """
    if len(phases.phase_at_epoch) != len(ledger):
        raise LengthMismatch("phase sequence and ledger disagree in length")
    k = len(ledger)
    if k == 0:
        empty = np.empty(0)
        return WhIncrements(empty, empty)
    idx = phases.interval_phases
    t = ledger.durations
    mu = np.asarray(level.mu)[idx]
    sig2 = np.asarray(level.sigma)[idx] ** 2
    z = rng.standard_normal(k)
    e = rng.standard_exponential(k)
    x = mu * t + np.sqrt(sig2 * t) * z
    q = sig2 * t * e
    big = 0.5 * (np.sqrt(x * x + 2.0 * q) + np.abs(x))
    # L * H = q / 2 exactly; avoids cancellation in the smaller of the two.
    with np.errstate(divide="ignore", invalid="ignore"):
        small = np.where(big > 0, 0.5 * q / big, 0.0)
    L = np.where(x >= 0, small, big)
    H = np.where(x >= 0, big, small)
    return WhIncrements(L, H)


def write_ledger_csv(path, ledger: EpochLedger, phases: PhaseSequence, labels=None) -> None:
    """Dump ``epoch,layer,phase`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "layer", "phase"])
        for t, layer, ph in zip(ledger.epochs, ledger.layers, phases.phase_at_epoch):
            w.writerow([repr(float(t)), int(layer), labels[ph] if labels is not None else int(ph)])
