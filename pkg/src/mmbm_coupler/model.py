"""MMBM parameters and the level-n flip-flop quantities derived from them.

A Markov-modulated Brownian motion is described by an initial phase
distribution ``p``, a generator ``Q`` and per-phase drift ``mu`` and
volatility ``sigma``.  For an observation intensity ``lam`` the fluid
approximation at level n is fully determined by the Wiener-Hopf rates

    omega_i = sqrt(mu_i^2 / sigma_i^4 + lam / sigma_i^2) + mu_i / sigma_i^2
    eta_i   = sqrt(mu_i^2 / sigma_i^4 + lam / sigma_i^2) - mu_i / sigma_i^2

and the uniformized transition matrix ``P = I + (lam / 2)^-1 Q``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from os import PathLike
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    LevelTooCoarse,
    NonDistribution,
    NonGenerator,
    NonPositiveSigma,
)

GENERATOR_TOL = 1e-12
DISTRIBUTION_TOL = 1e-12


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MmbmParams:
    """Validated MMBM model.  Build through :func:`validate_params`."""

    phases: tuple
    p: np.ndarray
    Q: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def m(self) -> int:
        return len(self.phases)

    @property
    def sigma2(self) -> np.ndarray:
        return self.sigma**2

    def stationary_distribution(self) -> np.ndarray:
        """Solve pi Q = 0, pi 1 = 1 in the least-squares sense."""
        m = self.m
        A = np.vstack([self.Q.T, np.ones((1, m))])
        b = np.zeros(m + 1)
        b[-1] = 1.0
        pi, *_ = np.linalg.lstsq(A, b, rcond=None)
        return pi

    def stationary_drift(self) -> float:
        return float(self.stationary_distribution() @ self.mu)

    def with_initial_phase(self, i: int) -> "MmbmParams":
        p = np.zeros(self.m)
        p[i] = 1.0
        return MmbmParams(self.phases, _frozen(p), self.Q, self.mu, self.sigma)

    def to_dict(self) -> dict:
        return {
            "phases": list(self.phases),
            "p": self.p.tolist(),
            "Q": self.Q.tolist(),
            "mu": self.mu.tolist(),
            "sigma2": self.sigma2.tolist(),
        }


def validate_params(raw: Mapping[str, Any]) -> MmbmParams:
    """Check a raw model mapping and return an immutable :class:`MmbmParams`.

    ``raw`` holds ``Q``, ``mu``, either ``sigma`` or ``sigma2`` (variances),
    and optionally ``p`` (defaults to uniform) and ``phases`` (defaults to
    ``1..m``).
    """
    try:
        Q = np.atleast_2d(np.asarray(raw["Q"], dtype=float))
        mu = np.atleast_1d(np.asarray(raw["mu"], dtype=float))
    except KeyError as exc:
        raise DimensionMismatch(f"model is missing key {exc.args[0]!r}") from None
    if "sigma" in raw:
        sigma = np.atleast_1d(np.asarray(raw["sigma"], dtype=float))
    elif "sigma2" in raw:
        sigma2 = np.atleast_1d(np.asarray(raw["sigma2"], dtype=float))
        if np.any(sigma2 <= 0) or not np.all(np.isfinite(sigma2)):
            raise NonPositiveSigma(f"variances must be positive, got {sigma2.tolist()}")
        sigma = np.sqrt(sigma2)
    else:
        raise DimensionMismatch("model needs either 'sigma' or 'sigma2'")

    m = Q.shape[0]
    if m < 1 or Q.ndim != 2 or Q.shape != (m, m):
        raise DimensionMismatch(f"Q must be square, got shape {Q.shape}")
    p = np.full(m, 1.0 / m) if raw.get("p") is None else np.atleast_1d(np.asarray(raw["p"], dtype=float))
    for name, vec in (("p", p), ("mu", mu), ("sigma", sigma)):
        if vec.shape != (m,):
            raise DimensionMismatch(f"{name} has shape {vec.shape}, expected ({m},)")
    phases = tuple(raw.get("phases") or range(1, m + 1))
    if len(phases) != m:
        raise DimensionMismatch(f"{len(phases)} phase labels for {m} phases")
    if len(set(phases)) != m:
        raise DimensionMismatch("phase labels must be distinct")

    for arr in (Q, p, mu, sigma):
        if not np.all(np.isfinite(arr)):
            raise DimensionMismatch("model entries must be finite")
    off = Q - np.diag(np.diag(Q))
    if np.any(off < 0):
        raise NonGenerator("Q has a negative off-diagonal entry")
    rows = Q.sum(axis=1)
    if np.any(np.abs(rows) > GENERATOR_TOL):
        bad = int(np.argmax(np.abs(rows)))
        raise NonGenerator(f"row {bad} of Q sums to {rows[bad]!r}, not 0")
    if np.any(p < 0) or abs(p.sum() - 1.0) > DISTRIBUTION_TOL:
        raise NonDistribution(f"p={p.tolist()} is not a probability vector")
    if np.any(sigma <= 0):
        raise NonPositiveSigma(f"sigma must be strictly positive, got {sigma.tolist()}")

    return MmbmParams(phases, _frozen(p), _frozen(Q), _frozen(mu), _frozen(sigma))


def load_params(path: str | PathLike) -> MmbmParams:
    """Read a model JSON file (keys ``phases, p, Q, mu, sigma2``)."""
    with open(path) as fh:
        return validate_params(json.load(fh))


@dataclass(frozen=True)
class LevelSchedule:
    """Observation intensities lambda_n = max(lambda0, coefficient * n^2).

    ``values`` overrides the rule with an explicit nondecreasing sequence
    (lambda_0, lambda_1, ...); it is padded by its last value.
    """

    lambda0: float
    coefficient: float = 2.0
    values: tuple = field(default=())

    @classmethod
    def for_params(cls, params: MmbmParams, coefficient: float = 2.0, values: Sequence[float] = ()) -> "LevelSchedule":
        lambda0 = 2.0 * float(np.max(np.abs(np.diag(params.Q))))
        sched = cls(lambda0, coefficient, tuple(float(v) for v in values))
        if sched.values:
            if sched.values[0] < lambda0 or np.any(np.diff(sched.values) < 0):
                raise LevelTooCoarse("explicit schedule must start at >= lambda0 and be nondecreasing")
        return sched

    def lam(self, n: int) -> float:
        if n < 0:
            raise ValueError("level index must be nonnegative")
        if self.values:
            return self.values[min(n, len(self.values) - 1)]
        if n == 0:
            return self.lambda0
        return max(self.lambda0, self.coefficient * n * n)

    def layer_rates(self, n_max: int) -> np.ndarray:
        """Arrival rates of M^0 and of the increments M~^1..M~^n_max."""
        lams = np.array([self.lam(k) for k in range(n_max + 1)])
        return np.concatenate([[lams[0]], np.diff(lams)]) / 2.0


@dataclass(frozen=True)
class FlipFlopLevel:
    """All level-n quantities of the fluid approximation.

    ``mu`` and ``sigma`` are carried along so the skeleton sampler can
    draw Brownian increments over given durations.
    """

    n: int
    lam: float
    omega: np.ndarray
    eta: np.ndarray
    slope_up: np.ndarray
    slope_down: np.ndarray
    P: np.ndarray
    sfp_generator: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def m(self) -> int:
        return len(self.omega)

    def T_blocks(self):
        """Return (T_++, T_+-, T_-+, T_--) of the fluid phase generator."""
        m = self.m
        G = self.sfp_generator
        return G[:m, :m], G[:m, m:], G[m:, :m], G[m:, m:]


def wiener_hopf_rates(mu, sigma, lam):
    """Rates (omega, eta) of the drop-to-minimum and rise-from-minimum.

    The smaller of the two is computed as ``b / (s + |a|)`` so it keeps full
    relative accuracy when |mu| dominates.
    """
    mu = np.asarray(mu, dtype=float)
    sigma2 = np.asarray(sigma, dtype=float) ** 2
    a = mu / sigma2
    b = lam / sigma2
    s = np.sqrt(a * a + b)
    big = s + np.abs(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        small = np.where(big > 0, b / big, 0.0)
    omega = np.where(a >= 0, big, small)
    eta = np.where(a >= 0, small, big)
    return omega, eta


def build_level(params: MmbmParams, schedule: LevelSchedule, n: int) -> FlipFlopLevel:
    lam = schedule.lam(n)
    return level_at(params, lam, n)


def level_at(params: MmbmParams, lam: float, n: int = -1) -> FlipFlopLevel:
    """Build the flip-flop level for an explicit intensity ``lam``."""
    m = params.m
    qmax = float(np.max(np.abs(np.diag(params.Q))))
    if lam < 2.0 * qmax:
        raise LevelTooCoarse(f"lambda={lam} < 2 max|Q_ii| = {2 * qmax}")
    omega, eta = wiener_hopf_rates(params.mu, params.sigma, lam)
    eye = np.eye(m)
    P = eye + (2.0 / lam) * params.Q if lam > 0 else eye.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        slope_up = lam / eta
        slope_down = -lam / omega
    G = np.block([[-lam * eye, 2.0 * params.Q + lam * eye], [lam * eye, -lam * eye]])
    return FlipFlopLevel(
        n=n,
        lam=float(lam),
        omega=_frozen(omega),
        eta=_frozen(eta),
        slope_up=_frozen(slope_up),
        slope_down=_frozen(slope_down),
        P=_frozen(P),
        sfp_generator=_frozen(G),
        mu=params.mu,
        sigma=params.sigma,
    )


def check_level(level: FlipFlopLevel, rel_tol: float = 1e-10) -> list[str]:
    """Return the names of violated level invariants (empty when all hold)."""
    failures = []
    sigma2 = level.sigma**2
    lam = level.lam
    if lam <= 0:
        return failures
    if not np.allclose(level.omega * level.eta * sigma2, lam, rtol=rel_tol, atol=0):
        failures.append("product identity omega*eta*sigma^2 = lambda")
    scale = np.maximum(np.abs(level.omega) + np.abs(level.eta), 1.0)
    if np.any(np.abs((level.omega - level.eta) * sigma2 - 2 * level.mu) > rel_tol * scale * sigma2):
        failures.append("difference identity (omega-eta)*sigma^2 = 2 mu")
    drift = -1.0 / level.omega + 1.0 / level.eta
    if np.any(np.abs(drift - 2 * level.mu / lam) > rel_tol * np.maximum(1.0 / level.eta, 1.0 / level.omega)):
        failures.append("per-cycle drift 1/eta - 1/omega = 2 mu / lambda")
    if np.any(level.P < -GENERATOR_TOL) or not np.allclose(level.P.sum(axis=1), 1.0, atol=1e-12):
        failures.append("P row-stochastic")
    G = level.sfp_generator
    off = G - np.diag(np.diag(G))
    if np.any(off < 0) or np.any(np.abs(G.sum(axis=1)) > 1e-12 * max(lam, 1.0)):
        failures.append("fluid generator rows sum to 0")
    return failures
