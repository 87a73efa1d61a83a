"""Convergence bookkeeping, decay-rate fitting and dense spectral oracles.

The dense matrices assembled here are deliberately written cell by cell with
plain loops.  They are the reference the vectorised solvers are checked
against, so they must not share code with them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

MAX_ORACLE_UNKNOWNS = 2500
EIG_TOL = 1e-10


def rel_rms_error(rho: np.ndarray, pi: np.ndarray) -> float:
    """Relative root mean square error ``sqrt(mean((rho/pi - 1)**2))``."""
    u = np.asarray(rho, dtype=float) / np.asarray(pi, dtype=float) - 1.0
    return float(np.sqrt(np.mean(u * u)))


@dataclass
class DecayFit:
    rate: float
    r_squared: float
    converged: bool = False
    decaying: bool = True
    n_used: int = 0


@dataclass
class ConvergenceReport:
    """Per-step error and mass history of a run, one series per channel."""

    channels: list[str]
    steps: list[int] = field(default_factory=list)
    times: list[float] = field(default_factory=list)
    phases: list[str] = field(default_factory=list)
    errors: dict[str, list[float]] = field(default_factory=dict)
    mass: dict[str, list[float]] = field(default_factory=dict)
    fits: dict[str, DecayFit] = field(default_factory=dict)
    converged: bool | None = None
    converged_round: int | None = None
    converged_step: int | None = None
    linear_steps: int = 0
    threshold_residuals: list[float] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for ch in self.channels:
            self.errors.setdefault(ch, [])
            self.mass.setdefault(ch, [])
        self.metadata.setdefault("error_metric", "sqrt(mean((rho/pi-1)^2))")

    def record(self, step, time, errors, mass=None, phase="linear"):
        self.steps.append(int(step))
        self.times.append(float(time))
        self.phases.append(phase)
        for ch in self.channels:
            self.errors[ch].append(float(errors[ch]))
            self.mass[ch].append(float(mass[ch]) if mass is not None else math.nan)

    def __len__(self):
        return len(self.steps)

    def final_error(self, channel=None):
        ch = channel if channel is not None else self.channels[0]
        return self.errors[ch][-1]

    def fit(self, discard_prefix=0.5):
        """Fit per-channel decay rates; silently skips series that are too short."""
        self.fits = {}
        for ch in self.channels:
            try:
                self.fits[ch] = fit_decay_rate(self.errors[ch], discard_prefix)
            except ValueError:
                continue
        return self.fits

    @property
    def fitted_rate(self):
        if not self.fits:
            return None
        if len(self.channels) == 1:
            fit = self.fits.get(self.channels[0])
            return None if fit is None else fit.rate
        return {ch: f.rate for ch, f in self.fits.items()}

    def first_step_below(self, threshold, channel=None):
        """First recorded step whose error is at or below ``threshold``."""
        ch = channel if channel is not None else self.channels[0]
        for step, err in zip(self.steps, self.errors[ch]):
            if err <= threshold:
                return step
        return None


def fit_decay_rate(errors, discard_prefix: float = 0.5) -> DecayFit:
    """Least-squares fit of ``log(error)`` against step over the trailing window.

    Returns the exponentiated slope, i.e. the per-step geometric ratio, and the
    coefficient of determination of the linear fit.  A window that reaches an
    exact zero is reported as converged rather than rejected.
    """
    e = np.asarray(errors, dtype=float)
    if not 0.0 <= discard_prefix < 1.0:
        raise ValueError("discard_prefix must lie in [0, 1)")
    start = int(math.floor(len(e) * discard_prefix))
    window = e[start:]
    if len(window) < 10:
        raise ValueError(f"need at least 10 samples after the prefix, got {len(window)}")
    if np.any(window < 0) or not np.all(np.isfinite(window)):
        raise ValueError("error series must be finite and non-negative")

    k = np.arange(start, len(e), dtype=float)
    nonpos = np.flatnonzero(window <= 0.0)
    converged = nonpos.size > 0
    if converged:
        window, k = window[: nonpos[0]], k[: nonpos[0]]
        if len(window) < 2:
            return DecayFit(rate=0.0, r_squared=1.0, converged=True, decaying=True, n_used=len(window))

    y = np.log(window)
    slope, intercept = np.polyfit(k, y, 1)
    resid = y - (slope * k + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    rate = float(np.exp(slope))
    if ss_tot == 0.0:
        rate = 1.0
    return DecayFit(
        rate=rate,
        r_squared=r2,
        converged=converged,
        decaying=rate < 1.0,
        n_used=len(window),
    )


# ---------------------------------------------------------------------------
# dense oracles


def grid_iteration_matrix(pi, dx: float, dy: float, dt: float) -> np.ndarray:
    """Dense map ``u^k -> u^{k+1}`` of the explicit grid scheme, ``u = rho/pi``.

    Built one cell at a time.  A neighbour outside the grid is the mirrored
    ghost cell, which carries the same ``u`` and ``pi`` as the cell itself, so
    its coupling lands on the diagonal.  Accepts any ``N x M`` with
    ``N, M >= 1``.
    """
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 2:
        raise ValueError("pi must be a 2-D array")
    n, m = pi.shape
    size = n * m
    if size > MAX_ORACLE_UNKNOWNS:
        raise ValueError(f"oracle limited to {MAX_ORACLE_UNKNOWNS} unknowns, got {size}")
    if np.any(pi <= 0):
        raise ValueError("equilibrium must be strictly positive")

    A = np.zeros((size, size))

    def idx(i, j):
        return i * m + j

    for i in range(n):
        for j in range(m):
            p = pi[i, j]
            row = idx(i, j)
            diag_gain = 0.0
            total = 0.0
            for di, dj, h in ((1, 0, dx), (-1, 0, dx), (0, 1, dy), (0, -1, dy)):
                ii, jj = i + di, j + dj
                inside = 0 <= ii < n and 0 <= jj < m
                q = pi[ii, jj] if inside else p
                coef = dt * (p + q) / (2.0 * h * h * p)
                total += coef
                if inside:
                    A[row, idx(ii, jj)] += coef
                else:
                    diag_gain += coef
            A[row, row] += 1.0 + diag_gain
            A[row, :] /= 1.0 + total
    return A


def grid_inner_weights(pi, dx: float, dy: float, dt: float) -> np.ndarray:
    """Flattened ``(1 + dt*lambda) * pi``; the grid matrix is self-adjoint in this weight."""
    pi = np.asarray(pi, dtype=float)
    n, m = pi.shape
    w = np.empty(n * m)
    for i in range(n):
        for j in range(m):
            p = pi[i, j]
            lam = 0.0
            for di, dj, h in ((1, 0, dx), (-1, 0, dx), (0, 1, dy), (0, -1, dy)):
                ii, jj = i + di, j + dj
                q = pi[ii, jj] if (0 <= ii < n and 0 <= jj < m) else p
                lam += (p + q) / (2.0 * h * h * p)
            w[i * m + j] = (1.0 + dt * lam) * p
    return w


def cloud_iteration_matrix(lambda_i, P, dt: float) -> np.ndarray:
    """Dense ``I + dt*B_hat`` for the point-cloud scheme.

    ``P[i, j]`` is the probability of a jump from ``j`` to ``i``.
    """
    lam = np.asarray(lambda_i, dtype=float)
    P = P.toarray() if hasattr(P, "toarray") else np.asarray(P, dtype=float)
    n = lam.size
    if n > MAX_ORACLE_UNKNOWNS:
        raise ValueError(f"oracle limited to {MAX_ORACLE_UNKNOWNS} unknowns, got {n}")
    M = np.zeros((n, n))
    for i in range(n):
        g = lam[i] / (1.0 + lam[i] * dt)
        for j in range(n):
            if j == i:
                M[i, j] = 1.0 - dt * g
            else:
                M[i, j] = dt * g * P[j, i]
    return M


def cloud_inner_weights(lambda_i, pi, cell_area, dt: float) -> np.ndarray:
    """``(1 + lambda*dt) * pi * |C|``; the cloud matrix is self-adjoint in this weight."""
    lam = np.asarray(lambda_i, dtype=float)
    return (1.0 + lam * dt) * np.asarray(pi, dtype=float) * np.asarray(cell_area, dtype=float)


def iteration_matrix(problem) -> tuple[np.ndarray, np.ndarray]:
    """Dense iteration matrix and self-adjointness weight for a grid or cloud problem.

    ``problem`` is either a grid equilibrium (has ``pi``, ``shape`` and ``dt``)
    or a ``(rates, tessellation, pi)`` triple for a point cloud.
    """
    if hasattr(problem, "shape") and hasattr(problem, "pi"):
        s = problem.shape
        A = grid_iteration_matrix(problem.pi, s.dx, s.dy, problem.dt)
        return A, grid_inner_weights(problem.pi, s.dx, s.dy, problem.dt)
    rates, tess, pi = problem
    A = cloud_iteration_matrix(rates.lambda_i, rates.p, rates.dt)
    return A, cloud_inner_weights(rates.lambda_i, pi, tess.cell_area, rates.dt)


def _check_perron(A: np.ndarray, mags: np.ndarray) -> None:
    ones = np.ones(A.shape[0])
    if np.max(np.abs(A @ ones - ones)) > EIG_TOL:
        raise ArithmeticError("iteration matrix does not fix the constant vector")
    if abs(mags[0] - 1.0) > EIG_TOL:
        raise ArithmeticError(f"leading eigenvalue magnitude {mags[0]!r} is not 1")


def dense_operator_mu2(problem) -> float:
    """Second-largest eigenvalue magnitude of the dense iteration matrix.

    ``problem`` may be a square matrix or anything :func:`iteration_matrix`
    accepts.  The leading eigenvalue is checked to be 1 with the constant
    vector as its eigenvector.
    """
    if isinstance(problem, np.ndarray):
        A = problem
    else:
        A, _ = iteration_matrix(problem)
    if A.shape[0] > MAX_ORACLE_UNKNOWNS:
        raise ValueError(f"oracle limited to {MAX_ORACLE_UNKNOWNS} unknowns")
    if A.shape[0] < 2:
        raise ValueError("need at least two unknowns")
    mags = np.sort(np.abs(np.linalg.eigvals(A)))[::-1]
    _check_perron(A, mags)
    return float(mags[1])


def symmetric_mu2(A: np.ndarray, weights: np.ndarray) -> float:
    """Same quantity as :func:`dense_operator_mu2` via a symmetric eigensolve.

    ``A`` is self-adjoint in the ``weights`` inner product, so
    ``W^(1/2) A W^(-1/2)`` is symmetric and ``eigh`` applies.
    """
    s = np.sqrt(np.asarray(weights, dtype=float))
    S = (s[:, None] * A) / s[None, :]
    S = 0.5 * (S + S.T)
    ev = scipy.linalg.eigh(S, eigvals_only=True)
    mags = np.sort(np.abs(ev))[::-1]
    _check_perron(A, mags)
    return float(mags[1])
