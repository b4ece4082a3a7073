"""First passage below a level: the return matrix Psi_n of the fluid
approximation, the passage generator U_n, and Monte Carlo checks.

With the fluid slopes r_+ = lambda/eta and r_- = -lambda/omega the Riccati
equation for Psi reduces to

    -diag(eta) Psi - Psi diag(omega) + Psi diag(omega) Psi + C = 0,
    C = diag(eta / lambda) (2Q + lambda I),

whose minimal nonnegative solution is reached by the elementwise
fixed-point update

    Psi[i, j] <- (C + Psi diag(omega) Psi)[i, j] / (eta_i + omega_j)

started at Psi = 0.  Then U = diag(omega) (Psi - I).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.linalg import solve_sylvester

from .coupling import CoupledBundle
from .errors import EmptySample, NoConvergence
from .model import FlipFlopLevel, LevelSchedule, MmbmParams, build_level

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PsiResult:
    psi: np.ndarray
    iterations: int
    residual: float
    converged: bool
    newton_steps: int = 0


@dataclass(frozen=True)
class PassageSolution:
    n: int
    psi: np.ndarray
    u: np.ndarray
    riccati_residual: float
    quadratic_residual: float
    iterations: int
    converged: bool

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "psi": self.psi.tolist(),
            "u": self.u.tolist(),
            "riccati_residual": self.riccati_residual,
            "quadratic_residual": self.quadratic_residual,
            "iterations": self.iterations,
            "converged": self.converged,
        }


def _riccati_terms(level: FlipFlopLevel):
    lam = level.lam
    Q2 = level.T_blocks()[1]  # 2Q + lam I
    C = (level.eta / lam)[:, None] * Q2
    return C, level.omega, level.eta


def riccati_defect(psi: np.ndarray, level: FlipFlopLevel) -> float:
    """Sup-norm of the Riccati left-hand side at ``psi``."""
    C, omega, eta = _riccati_terms(level)
    lhs = -eta[:, None] * psi - psi * omega[None, :] + (psi * omega[None, :]) @ psi + C
    return float(np.max(np.abs(lhs)))


def fixed_point_iterates(level: FlipFlopLevel, count: int) -> Iterable[np.ndarray]:
    """Yield the first ``count`` fixed-point iterates starting from zero."""
    C, omega, eta = _riccati_terms(level)
    denom = eta[:, None] + omega[None, :]
    psi = np.zeros_like(C)
    for _ in range(count):
        psi = (C + (psi * omega) @ psi) / denom
        yield psi


def _nare_blocks(level: FlipFlopLevel, shift: bool):
    """Coefficients (A, B, Cn, D) of X Cn X - X D - A X + B = 0.

    The unshifted equation is singular at zero mean drift, where the
    Hamiltonian [[D, -Cn], [B, -A]] has a double zero eigenvalue and
    Newton loses half the digits.  With ``shift`` the zero eigenvalue that
    carries no information is moved away by a rank-one update that leaves
    the minimal solution unchanged: along the right null vector [1; 1]
    when the drift is nonpositive (Psi 1 = 1), otherwise along the left
    null vector [-pi/omega; pi/eta].
    """
    C, omega, eta = _riccati_terms(level)
    m = len(omega)
    A, B, Cn, D = np.diag(eta), C.copy(), np.diag(omega), np.diag(omega)
    if not shift:
        return A, B, Cn, D
    s = float(max(omega.max(), eta.max()))
    Q = 0.5 * (level.T_blocks()[1] - level.lam * np.eye(m))
    pi = _stationary(Q)
    ones = np.ones(m)
    if float(pi @ level.mu) <= 0.0:
        # H + s [1;1] [0, 1/m]
        Cn = Cn - (s / m) * np.outer(ones, ones)
        A = A - (s / m) * np.outer(ones, ones)
    else:
        # H - s [0; w] [u1, u2] with u2 = pi/eta, u1 = -pi/omega, w = 1/sum(u2)
        u1, u2 = -pi / omega, pi / eta
        w = ones / u2.sum()
        B = B - s * np.outer(w, u1)
        A = A + s * np.outer(w, u2)
    return A, B, Cn, D


def _stationary(Q: np.ndarray) -> np.ndarray:
    m = len(Q)
    M = np.vstack([Q.T, np.ones((1, m))])
    rhs = np.zeros(m + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    return pi


def _newton_polish(psi, level, step_tol, max_steps=60, shift=True):
    # Newton on the (shifted) Riccati equation: each step solves the
    # Sylvester equation (A - X Cn) Y + Y (D - Cn X) = B - X Cn X.
    A, B, Cn, D = _nare_blocks(level, shift)
    steps = 0
    for _ in range(max_steps):
        a = A - psi @ Cn
        b = D - Cn @ psi
        rhs = B - psi @ Cn @ psi
        try:
            with np.errstate(all="ignore"):
                nxt = solve_sylvester(a, b, rhs)
        except (np.linalg.LinAlgError, ValueError):
            break
        if not np.all(np.isfinite(nxt)):
            break
        step = float(np.max(np.abs(nxt - psi)))
        psi = nxt
        steps += 1
        if step < step_tol:
            break
    return psi, steps


def solve_psi(
    level: FlipFlopLevel,
    max_iters: int = 1_000_000,
    tol: float = 1e-12,
    step_tol: float = 1e-14,
    polish_after: Optional[int] = 500,
) -> PsiResult:
    """Minimal nonnegative solution of the fluid Riccati equation.

    Runs the fixed-point update from zero until the defect drops below
    ``tol``, the step below ``step_tol``, or ``polish_after`` sweeps have
    been spent.  The iterate lies below the minimal solution and is then
    refined by Newton steps on the shifted equation, which converge
    quadratically even at zero mean drift where the plain update is
    sublinear.  A polished result that leaves the substochastic range or
    falls below the starting iterate is rejected in favour of unshifted
    Newton, which increases monotonically to the minimal solution.
    ``polish_after=None`` runs the plain update alone, up to ``max_iters``
    sweeps.
    """
    C, omega, eta = _riccati_terms(level)
    denom = eta[:, None] + omega[None, :]
    psi = np.zeros_like(C)
    budget = max_iters if polish_after is None else min(max_iters, polish_after)
    res = riccati_defect(psi, level)
    it = 0
    step = math.inf
    while res > tol and step >= step_tol and it < budget:
        nxt = (C + (psi * omega) @ psi) / denom
        step = float(np.max(np.abs(nxt - psi)))
        psi = nxt
        it += 1
        res = riccati_defect(psi, level)
    steps = 0
    if polish_after is not None:
        polished, steps = _newton_polish(psi, level, step_tol)
        plausible = (
            np.all(np.isfinite(polished))
            and np.all(polished >= psi - 1e-10)
            and np.all(polished.sum(axis=1) <= 1.0 + 1e-10)
            and riccati_defect(polished, level) <= max(res, tol)
        )
        if plausible:
            psi = polished
        else:
            psi, more = _newton_polish(psi, level, step_tol, shift=False)
            steps += more
        res = riccati_defect(psi, level)
    converged = res <= tol or (polish_after is None and step < step_tol)
    if not converged:
        log.warning("Riccati solve stopped at defect %.3g after %d sweeps", res, it + steps)
    return PsiResult(psi, it + steps, res, converged, steps)


def compute_u(psi: np.ndarray, level: FlipFlopLevel) -> np.ndarray:
    return level.omega[:, None] * (psi - np.eye(len(psi)))


def quadratic_residual(u: np.ndarray, params: MmbmParams) -> float:
    """Sup-norm of U^2 + 2 diag(mu/sigma^2) U + 2 diag(1/sigma^2) Q."""
    u = np.asarray(u, dtype=float)
    inv_s2 = 1.0 / params.sigma2
    lhs = u @ u + 2.0 * (params.mu * inv_s2)[:, None] * u + 2.0 * inv_s2[:, None] * params.Q
    return float(np.max(np.abs(lhs)))


def expm(a: np.ndarray, order: int = 13) -> np.ndarray:
    """Matrix exponential by scaling and squaring a truncated Taylor series.

    The matrix is scaled by 2^-s so its 1-norm is at most 1/2, the series
    is summed to ``order`` terms, and the result squared s times.
    """
    a = np.asarray(a, dtype=float)
    norm = np.max(np.sum(np.abs(a), axis=0)) if a.size else 0.0
    s = max(0, math.ceil(math.log2(norm / 0.5))) if norm > 0.5 else 0
    b = a / (2.0**s)
    eye = np.eye(len(a))
    term = eye.copy()
    out = eye.copy()
    for k in range(1, order + 1):
        term = term @ b / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def passage_matrix(u: np.ndarray, x: float) -> np.ndarray:
    """P(tau_x < inf, J(tau_x) = j | J(0) = i) as the matrix exp(U x)."""
    if x < 0:
        raise ValueError("x must be nonnegative")
    return expm(np.asarray(u, dtype=float) * x)


def solve_passage(params: MmbmParams, schedule: LevelSchedule, n: int, **solver_kw) -> PassageSolution:
    level = build_level(params, schedule, n)
    res = solve_psi(level, **solver_kw)
    u = compute_u(res.psi, level)
    return PassageSolution(
        n=n,
        psi=res.psi,
        u=u,
        riccati_residual=res.residual,
        quadratic_residual=quadratic_residual(u, params),
        iterations=res.iterations,
        converged=res.converged,
    )


def level_independence(params: MmbmParams, schedule: LevelSchedule, levels: Sequence[int], **solver_kw) -> float:
    """Largest sup-norm distance between the U_n of the given levels."""
    if len(levels) < 2:
        raise ValueError("need at least two levels")
    us = []
    for n in levels:
        sol = solve_passage(params, schedule, n, **solver_kw)
        if not sol.converged:
            raise NoConvergence(f"Riccati solve did not converge at level {n}", sol)
        us.append(sol.u)
    return max(float(np.max(np.abs(a - b))) for k, a in enumerate(us) for b in us[k + 1 :])


@dataclass(frozen=True)
class PassageEstimate:
    """Empirical law of the phase at first passage below -x."""

    counts: np.ndarray
    never: int
    total: int

    @property
    def probabilities(self) -> np.ndarray:
        return self.counts / self.total

    @property
    def never_fraction(self) -> float:
        return self.never / self.total

    @property
    def std_errors(self) -> np.ndarray:
        p = self.probabilities
        return np.sqrt(p * (1 - p) / self.total)


def first_crossing(bundle: CoupledBundle, x: float) -> Optional[int]:
    """Phase of the first fine interval whose minimum drops below -x."""
    hit = bundle.interval_min < -x
    if not np.any(hit):
        return None
    k = int(np.argmax(hit))
    return int(bundle.phases.interval_phases[k])


def mc_passage(bundles: Iterable[CoupledBundle], x: float, i: int, m: Optional[int] = None) -> PassageEstimate:
    """Tally the passage phase over bundles started in phase ``i``."""
    bundles = list(bundles)
    if not bundles:
        raise EmptySample("no bundles")
    if m is None:
        params = bundles[0].params
        if params is None:
            raise ValueError("pass m when bundles carry no model")
        m = params.m
    counts = np.zeros(m, dtype=np.int64)
    never = 0
    for b in bundles:
        if len(b.phases.x0) and int(b.phases.x0[0]) != i:
            raise ValueError(f"bundle starts in phase {int(b.phases.x0[0])}, expected {i}")
        j = first_crossing(b, x)
        if j is None:
            never += 1
        else:
            counts[j] += 1
    return PassageEstimate(counts, never, len(bundles))
