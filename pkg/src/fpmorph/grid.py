"""Finite volume Fokker-Planck scheme on a uniform 2-D grid.

Arrays are indexed ``[i, j]`` with ``i`` along x (``n_cols`` cells) and ``j``
along y (``n_rows`` cells, increasing upward).  The no-flux boundary is the
mirrored ghost layer ``pi_0j = pi_1j``, ``rho_0j = rho_1j`` etc., realised by
clamping neighbour indices rather than padding arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diagnostics import ConvergenceReport, rel_rms_error


@dataclass(frozen=True)
class GridShape:
    n_cols: int
    n_rows: int
    dx: float = 1.0
    dy: float = 1.0

    def __post_init__(self):
        if int(self.n_cols) < 2 or int(self.n_rows) < 2:
            raise ValueError(f"grid needs at least 2x2 cells, got {self.n_cols}x{self.n_rows}")
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError("grid spacings must be positive")

    @property
    def dims(self) -> tuple[int, int]:
        return (int(self.n_cols), int(self.n_rows))

    @classmethod
    def like(cls, arr, dx=1.0, dy=1.0) -> "GridShape":
        n, m = np.shape(arr)
        return cls(n, m, dx, dy)


@dataclass
class DensityGrid:
    shape: GridShape
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.shape.dims:
            raise ValueError(f"values have shape {self.values.shape}, expected {self.shape.dims}")


def _check_pi(pi, shape: GridShape) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != shape.dims:
        raise ValueError(f"equilibrium has shape {pi.shape}, expected {shape.dims}")
    if not np.all(pi > 0) or not np.all(np.isfinite(pi)):
        raise ValueError("equilibrium must be strictly positive")
    return pi


def _neighbours(n: int):
    k = np.arange(n)
    return np.minimum(k + 1, n - 1), np.maximum(k - 1, 0)


def compute_lambda(pi, shape: GridShape) -> np.ndarray:
    """Diagonal rate ``lambda_ij``: the four half-sum ratios over the squared spacings.

    Each ratio is ``(pi_ij + pi_nb) / (2 pi_ij)``; at the boundary the ghost
    neighbour equals the cell, so that ratio is exactly 1.
    """
    pi = _check_pi(pi, shape)
    ip, im = _neighbours(shape.n_cols)
    jp, jm = _neighbours(shape.n_rows)
    half = 0.5 / pi
    lx = ((pi + pi[ip, :]) * half + (pi[im, :] + pi) * half) / shape.dx**2
    ly = ((pi + pi[:, jp]) * half + (pi[:, jm] + pi) * half) / shape.dy**2
    return lx + ly


@dataclass
class GridEquilibrium:
    """Target density with the loop-invariant coefficients of the scheme.

    ``coef`` holds, per direction (E, W, N, S), ``dt/h^2 * (pi_ij + pi_nb)/2``,
    the factor multiplying ``rho_nb/pi_nb`` on the right-hand side.
    """

    shape: GridShape
    pi: np.ndarray
    lam: np.ndarray
    dt: float
    coef: tuple = field(repr=False, default=())

    @classmethod
    def build(cls, pi, shape: GridShape, dt: float) -> "GridEquilibrium":
        if not dt > 0:
            raise ValueError("time step must be positive")
        pi = _check_pi(pi, shape)
        lam = compute_lambda(pi, shape)
        ip, im = _neighbours(shape.n_cols)
        jp, jm = _neighbours(shape.n_rows)
        ax = dt / shape.dx**2 / 2.0
        ay = dt / shape.dy**2 / 2.0
        coef = (
            ax * (pi + pi[ip, :]),
            ax * (pi + pi[im, :]),
            ay * (pi + pi[:, jp]),
            ay * (pi + pi[:, jm]),
        )
        return cls(shape=shape, pi=pi, lam=lam, dt=float(dt), coef=coef)

    @property
    def weights(self) -> np.ndarray:
        """Per-cell mass weight ``1 + dt*lambda``."""
        return 1.0 + self.dt * self.lam

    def with_dt(self, dt: float) -> "GridEquilibrium":
        return GridEquilibrium.build(self.pi, self.shape, dt)


@dataclass
class ChannelSet:
    """One to three independently evolving (density, equilibrium) pairs sharing a grid."""

    names: list[str]
    densities: list[DensityGrid]
    equilibria: list[GridEquilibrium]

    def __post_init__(self):
        if not 1 <= len(self.names) <= 3:
            raise ValueError("a channel set holds 1 to 3 channels")
        if not len(self.names) == len(self.densities) == len(self.equilibria):
            raise ValueError("channel names, densities and equilibria differ in length")
        shapes = {d.shape for d in self.densities} | {e.shape for e in self.equilibria}
        if len(shapes) != 1:
            raise ValueError("all channels must share one grid shape")

    @classmethod
    def single(cls, rho: DensityGrid, eq: GridEquilibrium, name="gray") -> "ChannelSet":
        return cls([name], [rho], [eq])

    @property
    def shape(self) -> GridShape:
        return self.densities[0].shape


def weighted_mass(rho, eq: GridEquilibrium) -> float:
    return float(np.sum(eq.weights * np.asarray(rho)))


def mass_adjustment_factor(rho0, eq: GridEquilibrium) -> float:
    """Scalar ``c`` with ``sum (1+dt*lambda) c*rho0 == sum (1+dt*lambda) pi``."""
    rho0 = np.asarray(rho0, dtype=np.float64)
    if rho0.shape != eq.shape.dims:
        raise ValueError("initial density does not match the equilibrium grid")
    if not np.all(rho0 > 0):
        raise ValueError("initial density must be strictly positive")
    w = eq.weights
    return float(np.sum(w * eq.pi) / np.sum(w * rho0))


def adjust_initial_mass(rho0, eq: GridEquilibrium) -> np.ndarray:
    return mass_adjustment_factor(rho0, eq) * np.asarray(rho0, dtype=np.float64)


def step_values(rho: np.ndarray, eq: GridEquilibrium) -> np.ndarray:
    """One explicit step on a raw array: ``rho^{k+1} = RHS(rho^k) / (1 + dt*lambda)``."""
    n, m = eq.shape.dims
    ip, im = _neighbours(n)
    jp, jm = _neighbours(m)
    u = rho / eq.pi
    cE, cW, cN, cS = eq.coef
    rhs = rho + cE * u[ip, :] + cW * u[im, :] + cN * u[:, jp] + cS * u[:, jm]
    return rhs / (1.0 + eq.dt * eq.lam)


def fp_step_grid(rho_k: DensityGrid, eq: GridEquilibrium) -> DensityGrid:
    if rho_k.shape != eq.shape:
        raise ValueError(f"density grid {rho_k.shape} does not match equilibrium grid {eq.shape}")
    return DensityGrid(rho_k.shape, step_values(rho_k.values, eq))


def run_grid(channels: ChannelSet, n_steps: int, frame_stride: int = 1, sink=None) -> ConvergenceReport:
    """Iterate the explicit scheme on every channel, recording errors and frames.

    Frames go to ``sink.emit(step, time, {name: rho})`` at step 0, every
    ``frame_stride`` steps and at the final step.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    if frame_stride < 1:
        raise ValueError("frame_stride must be positive")
    names = channels.names
    eqs = dict(zip(names, channels.equilibria))
    dt = channels.equilibria[0].dt
    state = {nm: d.values.copy() for nm, d in zip(names, channels.densities)}
    report = ConvergenceReport(channels=list(names))

    def record(k):
        report.record(
            k,
            k * dt,
            {nm: rel_rms_error(state[nm], eqs[nm].pi) for nm in names},
            {nm: weighted_mass(state[nm], eqs[nm]) for nm in names},
        )

    record(0)
    _emit(sink, 0, 0.0, state)
    for k in range(1, n_steps + 1):
        for nm in names:
            state[nm] = step_values(state[nm], eqs[nm])
        record(k)
        if k % frame_stride == 0 or k == n_steps:
            _emit(sink, k, k * dt, state)
    report.linear_steps = n_steps
    report.fit()
    return report


def _emit(sink, step, time, state):
    if sink is None:
        return
    try:
        sink.emit(step, time, {k: v.copy() for k, v in state.items()})
    except OSError as exc:
        raise RuntimeError(f"frame sink failed at step {step}: {exc}") from exc
