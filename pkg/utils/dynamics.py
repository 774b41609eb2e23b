"""
Fixed-step RK4 integration of the networked swing equation

    d(delta_i)/dt = omega_i
    d(omega_i)/dt = -alpha_i omega_i + P_i + sum_j K_ij sin(delta_j - delta_i)

plus the synchronized-equilibrium solver and the finite-horizon stability
verdict used to label perturbation samples.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ContractError,
    EquilibriumNotFoundError,
    InputError,
    NumericalBlowupError,
    ShapeError,
    TrajectoryFormatError,
)

logger = logging.getLogger(__name__)

NEWTON_FLOOR = 1e-13
BALANCE_TOL = 1e-9


def step_count(t_end, dt):
    """Number of RK4 steps that fit in t_end (tolerant to 1.25/0.0125 style rounding)."""
    return int(math.floor(t_end / dt + 1e-9))


@dataclass(frozen=True, eq=False)
class SystemState:
    delta: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        delta = np.array(self.delta, dtype=np.float64)
        omega = np.array(self.omega, dtype=np.float64)
        if delta.shape != omega.shape or delta.ndim != 1:
            raise ShapeError(f"delta {delta.shape} and omega {omega.shape} must be vectors of equal length")
        delta.setflags(write=False)
        omega.setflags(write=False)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "omega", omega)

    @classmethod
    def rest(cls, n_nodes):
        return cls(np.zeros(n_nodes), np.zeros(n_nodes))

    @property
    def n_nodes(self):
        return len(self.delta)

    def is_finite(self):
        return bool(np.isfinite(self.delta).all() and np.isfinite(self.omega).all())


@dataclass(frozen=True)
class StabilitySettings:
    """Finite-horizon surrogate for the asymptotic synchronization definition."""
    dt: float = 0.0125
    t_label: float = 50.0
    omega_tol: float = 0.1
    window: float = 5.0
    gamma: float = math.pi / 2

    def __post_init__(self):
        if self.dt <= 0 or self.t_label < self.dt:
            raise ContractError(f"need dt > 0 and t_label >= dt, got dt={self.dt}, t_label={self.t_label}")
        if self.omega_tol < 0 or self.window < 0 or not 0 <= self.gamma <= math.pi:
            raise ContractError("omega_tol and window must be >= 0 and gamma in [0, pi]")

    @property
    def n_steps(self):
        return step_count(self.t_label, self.dt)

    @property
    def window_steps(self):
        return int(round(self.window / self.dt))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True, eq=False)
class Trajectory:
    dt: float
    delta: np.ndarray
    omega: np.ndarray
    grid: object = None

    def __post_init__(self):
        if self.delta.shape != self.omega.shape or self.delta.ndim != 2 or len(self.delta) < 1:
            raise ShapeError(f"trajectory arrays must be (steps, N) and equal, got {self.delta.shape}, {self.omega.shape}")

    def __len__(self):
        return len(self.delta)

    @property
    def times(self):
        return np.arange(len(self)) * self.dt

    def state(self, k):
        return SystemState(self.delta[k], self.omega[k])

    @property
    def final_state(self):
        return self.state(len(self) - 1)

    def to_csv(self, path):
        n = self.delta.shape[1]
        header = ["t"] + [f"delta_{i}" for i in range(n)] + [f"omega_{i}" for i in range(n)]
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle)
                writer.writerow(header)
                for t, d, w in zip(self.times, self.delta, self.omega):
                    writer.writerow([f"{t:.17g}"] + [f"{x:.17g}" for x in d] + [f"{x:.17g}" for x in w])
        except OSError as e:
            raise InputError(f"cannot write trajectory to {path}: {e.strerror or e}") from e


@dataclass(frozen=True)
class StabilityVerdict:
    label: int
    max_omega: float
    max_gap: float
    blown_up: bool = False

    @property
    def stable(self):
        return self.label == 1


def _check_dims(grid, delta, omega):
    if delta.shape[-1] != grid.n_nodes or omega.shape != delta.shape:
        raise ShapeError(f"state shapes {delta.shape}/{omega.shape} do not match grid with N={grid.n_nodes}")


def _coupling(grid, delta):
    # Works on (..., N) arrays. The sum runs over a fixed number of gather
    # slots so every row is reduced identically whatever the batch size.
    a, b = grid.edges[:, 0], grid.edges[:, 1]
    s = np.sin(delta[..., b] - delta[..., a])
    index, coef = grid.incidence
    coupling = np.zeros(delta.shape)
    for k in range(index.shape[1]):
        coupling = coupling + coef[:, k] * s[..., index[:, k]]
    return coupling


def _rhs(grid, delta, omega):
    return omega, -grid.alpha * omega + grid.power + _coupling(grid, delta)


def _rk4(grid, delta, omega, dt):
    k1d, k1w = _rhs(grid, delta, omega)
    k2d, k2w = _rhs(grid, delta + 0.5 * dt * k1d, omega + 0.5 * dt * k1w)
    k3d, k3w = _rhs(grid, delta + 0.5 * dt * k2d, omega + 0.5 * dt * k2w)
    k4d, k4w = _rhs(grid, delta + dt * k3d, omega + dt * k3w)
    delta = delta + (dt / 6.0) * (k1d + 2.0 * k2d + 2.0 * k3d + k4d)
    omega = omega + (dt / 6.0) * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)
    return delta, omega


def swing_rhs(grid, state):
    """Time derivative of a state, returned as a SystemState (d delta/dt, d omega/dt)."""
    _check_dims(grid, state.delta, state.omega)
    d_delta, d_omega = _rhs(grid, state.delta, state.omega)
    return SystemState(d_delta, d_omega)


def rk4_step(grid, state, dt, t=0.0):
    if dt <= 0:
        raise ContractError(f"step size must be positive, got {dt}")
    _check_dims(grid, state.delta, state.omega)
    with np.errstate(all="ignore"):
        delta, omega = _rk4(grid, state.delta, state.omega, dt)
    if not (np.isfinite(delta).all() and np.isfinite(omega).all()):
        raise NumericalBlowupError(t + dt)
    return SystemState(delta, omega)


def integrate(grid, state0, dt, t_end):
    """Integrates from state0 and returns floor(t_end/dt) + 1 uniformly spaced states."""
    if dt <= 0 or t_end < dt:
        raise ContractError(f"need dt > 0 and t_end >= dt, got dt={dt}, t_end={t_end}")
    _check_dims(grid, state0.delta, state0.omega)
    n = step_count(t_end, dt)
    deltas = np.empty((n + 1, grid.n_nodes))
    omegas = np.empty((n + 1, grid.n_nodes))
    deltas[0], omegas[0] = state0.delta, state0.omega
    delta, omega = deltas[0], omegas[0]
    with np.errstate(all="ignore"):
        for k in range(1, n + 1):
            delta, omega = _rk4(grid, delta, omega, dt)
            if not (np.isfinite(delta).all() and np.isfinite(omega).all()):
                raise NumericalBlowupError(k * dt)
            deltas[k], omegas[k] = delta, omega
    return Trajectory(dt, deltas, omegas, grid)


def edge_gaps(grid, delta):
    """Largest wrapped phase gap |delta_i - delta_j| over edges, per row of delta."""
    if grid.n_edges == 0:
        return np.zeros(delta.shape[:-1])
    diff = delta[..., grid.edges[:, 0]] - delta[..., grid.edges[:, 1]]
    wrapped = np.mod(diff + np.pi, 2.0 * np.pi) - np.pi
    return np.abs(wrapped).max(axis=-1)


def classify_batch(grid, delta0, omega0, settings=None, record=0):
    """
    Integrates every row of (delta0, omega0) to t_label and labels it.

    Returns (labels, max_omega, max_gap, blown_up, recorded) where ``recorded``
    holds the first ``record`` omega samples per row as a (B, N, record) array.
    A row that turns non-finite is frozen at its last finite state and labeled 0.
    Frequencies are measured against the frame frequency, so an unbalanced grid
    that settles into its rotating synchronous state still counts as stable.
    """
    settings = settings or StabilitySettings()
    delta = np.array(delta0, dtype=np.float64, ndmin=2)
    omega = np.array(omega0, dtype=np.float64, ndmin=2)
    _check_dims(grid, delta, omega)
    batch = delta.shape[0]
    n = settings.n_steps
    if record > n + 1:
        raise ContractError(f"cannot record {record} samples from a {n + 1}-sample horizon")
    start = max(n - settings.window_steps, 0)
    frame = _frame_frequency(grid)

    recorded = np.empty((batch, grid.n_nodes, record))
    if record:
        recorded[:, :, 0] = omega
    max_omega = np.abs(omega - frame).max(axis=-1) if start == 0 else np.zeros(batch)
    blown = ~(np.isfinite(delta).all(axis=-1) & np.isfinite(omega).all(axis=-1))

    with np.errstate(all="ignore"):
        for k in range(1, n + 1):
            new_delta, new_omega = _rk4(grid, delta, omega, settings.dt)
            bad = ~(np.isfinite(new_delta).all(axis=-1) & np.isfinite(new_omega).all(axis=-1))
            if bad.any():
                fresh = bad & ~blown
                if fresh.any():
                    logger.debug("%d trajectories blew up at t=%.4f s", int(fresh.sum()), k * settings.dt)
                blown |= bad
                new_delta[bad] = delta[bad]
                new_omega[bad] = omega[bad]
            delta, omega = new_delta, new_omega
            if k < record:
                recorded[:, :, k] = omega
            if k >= start:
                max_omega = np.maximum(max_omega, np.abs(omega - frame).max(axis=-1))

    max_gap = edge_gaps(grid, delta)
    labels = (~blown) & (max_omega <= settings.omega_tol) & (max_gap <= settings.gamma)
    max_omega = np.where(blown, np.inf, max_omega)
    return labels.astype(np.uint8), max_omega, max_gap, blown, recorded


def classify_stability(grid, state0, settings=None):
    labels, max_omega, max_gap, blown, _ = classify_batch(
        grid, state0.delta[None, :], state0.omega[None, :], settings)
    return StabilityVerdict(int(labels[0]), float(max_omega[0]), float(max_gap[0]), bool(blown[0]))


def _frame_frequency(grid):
    # Common frequency of the synchronous state; zero for a balanced grid
    weights = 1.0 / grid.scale
    mech = float(np.sum(weights * grid.power))
    if abs(mech) <= BALANCE_TOL * float(np.sum(weights)):
        return 0.0
    return mech / float(np.sum(weights * grid.alpha))


def _jacobian(grid, delta):
    a, b = grid.edges[:, 0], grid.edges[:, 1]
    c = np.cos(delta[b] - delta[a])
    ka = grid.capacity * grid.scale[a] * c
    kb = grid.capacity * grid.scale[b] * c
    jac = np.zeros((grid.n_nodes, grid.n_nodes))
    np.add.at(jac, (a, b), ka)
    np.add.at(jac, (a, a), -ka)
    np.add.at(jac, (b, a), kb)
    np.add.at(jac, (b, b), -kb)
    return jac


def solve_equilibrium(grid, guess=None, tol=1e-10, max_iter=100):
    """
    Newton iteration for the phase-locked state with delta_0 pinned to 0.

    Returns (delta*, omega) where omega is zero for balanced grids and the common
    frame frequency otherwise.
    """
    n = grid.n_nodes
    if guess is not None:
        _check_dims(grid, guess.delta, guess.omega)
        delta = np.array(guess.delta, dtype=np.float64) - guess.delta[0]
    else:
        delta = np.zeros(n)
    frame = _frame_frequency(grid)
    injection = grid.power - grid.alpha * frame

    def residual(d):
        return injection + _coupling(grid, d)

    for iteration in range(max_iter):
        f = residual(delta)
        if np.abs(f).max() <= NEWTON_FLOOR:
            break
        try:
            step = np.linalg.solve(_jacobian(grid, delta)[1:, 1:], -f[1:])
        except np.linalg.LinAlgError as e:
            raise EquilibriumNotFoundError(f"singular Jacobian at Newton iteration {iteration}") from e
        if not np.isfinite(step).all():
            raise EquilibriumNotFoundError(f"non-finite Newton step at iteration {iteration}")
        delta[1:] += step
        if np.abs(step).max() <= 1e-15 * max(1.0, np.abs(delta).max()):
            break

    res = np.abs(residual(delta)).max()
    if not res <= tol:
        raise EquilibriumNotFoundError(f"Newton did not converge in {max_iter} iterations (residual {res:.3e})")
    return SystemState(delta, np.full(n, frame))


def find_equilibrium(grid, guess=None, relax_time=200.0, dt=0.0125):
    """Newton first; on failure relax the dynamics from rest and polish the result with Newton."""
    try:
        return solve_equilibrium(grid, guess)
    except EquilibriumNotFoundError as e:
        logger.warning("Newton failed on grid '%s' (%s); relaxing for %.0f s", grid.name, e, relax_time)

    delta, omega = np.zeros(grid.n_nodes), np.zeros(grid.n_nodes)
    with np.errstate(all="ignore"):
        for _ in range(step_count(relax_time, dt)):
            delta, omega = _rk4(grid, delta, omega, dt)
    if not (np.isfinite(delta).all() and np.isfinite(omega).all()):
        raise EquilibriumNotFoundError("relaxation from rest blew up")
    return solve_equilibrium(grid, SystemState(delta, np.zeros(grid.n_nodes)))


def read_trajectory_csv(path, n_nodes=None):
    """
    Reads a trajectory written by Trajectory.to_csv.
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
    except OSError as e:
        raise TrajectoryFormatError(f"{path}: {e.strerror or e}") from e
    if not rows:
        raise TrajectoryFormatError(f"{path}: empty file")

    header = [h.strip() for h in rows[0]]
    if len(header) < 3 or header[0] != "t" or (len(header) - 1) % 2:
        raise TrajectoryFormatError(f"{path}:1: expected header 't,delta_0..,omega_0..'")
    n = (len(header) - 1) // 2
    expected = ["t"] + [f"delta_{i}" for i in range(n)] + [f"omega_{i}" for i in range(n)]
    if header != expected:
        raise TrajectoryFormatError(f"{path}:1: expected header 't,delta_0..,omega_0..'")
    if n_nodes is not None and n != n_nodes:
        raise TrajectoryFormatError(f"{path}: trajectory has {n} nodes, expected {n_nodes}")

    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise TrajectoryFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            values.append([float(x) for x in row])
        except ValueError as e:
            raise TrajectoryFormatError(f"{path}:{lineno}: {e}") from e
    if not values:
        raise TrajectoryFormatError(f"{path}: no samples")

    data = np.array(values)
    times = data[:, 0]
    dt = float(times[1] - times[0]) if len(times) > 1 else 0.0
    if len(times) > 1 and not np.allclose(np.diff(times), dt, rtol=1e-9, atol=1e-12):
        raise TrajectoryFormatError(f"{path}: samples are not uniformly spaced")
    return Trajectory(dt, data[:, 1:1 + n], data[:, 1 + n:])
