"""Reference data: random initial conditions, time integration, snapshot sets."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from .filterbank import FilterMatrix, filter_snapshots
from .stencils import CirculantOperator, Grid, apply, convection_operator

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Integration failed. ``t_fail`` is the last time reached; ``partial``
    holds the outputs produced before the failure."""

    def __init__(self, message, t_fail=None, partial=None):
        super().__init__(message)
        self.t_fail = t_fail
        self.partial = partial


class BlowUpError(SolverError):
    pass


class MaxStepsError(SolverError):
    pass


class SolverMethod(str, enum.Enum):
    ADAPTIVE = "adaptive"
    RK4 = "rk4"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class SolverConfig:
    abs_tol: float = 1e-10
    rel_tol: float = 1e-8
    max_steps: int = 10_000_000
    method: SolverMethod = SolverMethod.ADAPTIVE
    rk4_steps: int = 100  # per output interval, fixed-step method only

    def __post_init__(self):
        object.__setattr__(self, "method", SolverMethod(self.method))
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("solver tolerances must be positive")
        if self.max_steps <= 0 or self.rk4_steps <= 0:
            raise ValueError("max_steps and rk4_steps must be positive")


# Initial conditions ----------------------------------------------------------

DATASET_IDS = {"train": 0, "valid": 1, "test": 2, "long": 3}

# (n_IC, n_t, T)
DATASET_TABLE = {
    "train": (1000, 50, 0.1),
    "valid": (20, 10, 1.0),
    "test": (100, 20, 1.0),
    "long": (50, 500, 100.0),
}


class NoiseMode(str, enum.Enum):
    PER_WAVE = "per_wave"
    PER_CONDITION = "per_condition"


@dataclass(frozen=True)
class InitialConditionSpec:
    """Random Fourier initial conditions

        u0(x) = sum_{k=0}^K (1 + eps_k) / (5 + k)^2 cos(2 pi k x + theta_k)

    with ``eps_k ~ N(0, amplitude_noise_std^2)`` and ``theta_k ~ U[0, 2 pi]``.

    With ``noise="per_wave"`` every wave of every condition gets its own draw.
    ``noise="per_condition"`` shares one ``(eps, theta)`` across all waves of
    a condition; all such conditions then lie in a fixed two-dimensional
    space, which is too poor to fit an operator from.
    """

    max_frequency: int = 250
    amplitude_noise_std: float = 1 / np.sqrt(5)
    seed: int = 0
    count: int = 1
    noise: NoiseMode = NoiseMode.PER_WAVE

    def __post_init__(self):
        object.__setattr__(self, "noise", NoiseMode(self.noise))
        if self.max_frequency < 0 or self.count < 1:
            raise ValueError("max_frequency must be >= 0 and count >= 1")
        if self.amplitude_noise_std < 0:
            raise ValueError("amplitude_noise_std must be non-negative")


def ic_parameters(spec: InitialConditionSpec, index: int, dataset: str = "train"):
    """Return ``(eps, theta)`` arrays of length K + 1 for condition ``index``.

    Each (seed, dataset, index) triple has its own stream, so the draw does
    not depend on how many other conditions are generated or in what order.
    """
    ss = np.random.SeedSequence([spec.seed, DATASET_IDS.get(dataset, dataset), index])
    rng = np.random.Generator(np.random.Philox(ss))
    n = spec.max_frequency + 1 if spec.noise is NoiseMode.PER_WAVE else 1
    eps = spec.amplitude_noise_std * rng.standard_normal(n)
    theta = rng.uniform(0.0, 2 * np.pi, n)
    shape = spec.max_frequency + 1
    return np.broadcast_to(eps, shape).copy(), np.broadcast_to(theta, shape).copy()


def fourier_profile(max_frequency: int, grid: Grid, eps=0.0, theta=0.0) -> np.ndarray:
    """``sum_k (1 + eps_k) / (5 + k)^2 cos(2 pi k x + theta_k)`` on the grid."""
    k = np.arange(max_frequency + 1)
    coef = (1.0 + np.asarray(eps, dtype=float)) / (5.0 + k) ** 2
    phase = 2 * np.pi * np.outer(grid.points, k) + theta
    return np.cos(phase) @ coef


def sample_initial_condition(spec: InitialConditionSpec, index: int, grid: Grid,
                             dataset: str = "train") -> np.ndarray:
    if 2 * spec.max_frequency >= grid.n_points:
        raise ValueError(
            f"grid with {grid.n_points} points does not resolve frequency "
            f"{spec.max_frequency}")
    eps, theta = ic_parameters(spec, index, dataset)
    return fourier_profile(spec.max_frequency, grid, eps, theta)


# Time integration ------------------------------------------------------------

def _as_rhs(op):
    if isinstance(op, CirculantOperator):
        return lambda u: apply(op, u), op.size
    mat = np.asarray(op, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"operator must be square, got shape {mat.shape}")
    return (lambda u: mat @ u), mat.shape[0]


def _dense(op):
    return op.dense() if isinstance(op, CirculantOperator) else np.asarray(op, float)


# Dormand-Prince 5(4)
_A = [np.array(row) for row in [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]]
_B5 = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_B4 = np.array([5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200,
                187 / 2100, 1 / 40])
_E = _B5 - _B4

_SAFETY = 0.9
_BETA = 0.04
_ALPHA = 1 / 5 - 0.75 * _BETA
_MIN_FACTOR, _MAX_FACTOR = 0.2, 10.0


def _rms(x):
    return float(np.sqrt(np.mean(x * x)))


def _initial_step(f, u, f0, atol, rtol):
    # Hairer, Norsett & Wanner, starting step selection (order 5)
    scale = atol + rtol * np.abs(u)
    d0, d1 = _rms(u / scale), _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = f(u + h0 * f0)
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def _solve_adaptive(f, u0, t_out, cfg):
    out = np.empty((len(t_out),) + u0.shape)
    t = float(t_out[0])
    u = u0.copy()
    out[0] = u
    k1 = f(u)
    h = _initial_step(f, u, k1, cfg.abs_tol, cfg.rel_tol)
    err_prev = 1.0
    steps = 0
    k = np.empty((7,) + u.shape)
    for j in range(1, len(t_out)):
        t_end = float(t_out[j])
        while t < t_end:
            if steps >= cfg.max_steps:
                raise MaxStepsError(f"exceeded {cfg.max_steps} steps at t = {t:.6g}",
                                    t_fail=t, partial=out[:j])
            # stretch slightly to avoid leaving a sliver before the output time
            last = t + 1.01 * h >= t_end
            step = t_end - t if last else h
            k[0] = k1
            for s in range(1, 7):
                stage = u + step * np.tensordot(_A[s], k[:s], axes=1)
                k[s] = f(stage)
            u_new = stage
            err_vec = np.tensordot(_E, k, axes=1) * step
            scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(u), np.abs(u_new))
            err = _rms(err_vec / scale)
            steps += 1
            if not np.isfinite(err) or not np.all(np.isfinite(u_new)):
                raise BlowUpError(f"non-finite state near t = {t:.6g}",
                                  t_fail=t, partial=out[:j])
            if err <= 1.0:
                t = t_end if last else t + step
                u = u_new
                k1 = k[6].copy()
                factor = _SAFETY * max(err, 1e-10) ** -_ALPHA * err_prev ** _BETA
                factor = min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
                # a shortened final step does not inform the next step size
                if not (last and step < h):
                    h = step * factor
                    err_prev = max(err, 1e-4)
            else:
                h = step * max(_MIN_FACTOR, _SAFETY * err ** -_ALPHA)
        out[j] = u
    return out


def _rk4_step(f, u, h):
    k1 = f(u)
    k2 = f(u + (h / 2) * k1)
    k3 = f(u + (h / 2) * k2)
    k4 = f(u + h * k3)
    return u + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


def _solve_rk4(f, u0, t_out, cfg):
    out = np.empty((len(t_out),) + u0.shape)
    out[0] = u = u0.copy()
    for j in range(1, len(t_out)):
        dt = float(t_out[j] - t_out[j - 1])
        if dt > 0:
            h = dt / cfg.rk4_steps
            for _ in range(cfg.rk4_steps):
                u = _rk4_step(f, u, h)
            if not np.all(np.isfinite(u)):
                raise BlowUpError(f"non-finite state near t = {t_out[j]:.6g}",
                                  t_fail=float(t_out[j - 1]), partial=out[:j])
        out[j] = u
    return out


def _solve_exponential(op, u0, t_out):
    mat = _dense(op)
    out = np.empty((len(t_out),) + u0.shape)
    out[0] = u = u0.copy()
    cache = {}
    for j in range(1, len(t_out)):
        dt = float(t_out[j] - t_out[j - 1])
        if dt > 0:
            key = round(dt, 14)
            if key not in cache:
                cache[key] = expm(dt * mat)
            u = cache[key] @ u
            if not np.all(np.isfinite(u)):
                raise BlowUpError(f"non-finite state near t = {t_out[j]:.6g}",
                                  t_fail=float(t_out[j - 1]), partial=out[:j])
        out[j] = u
    return out


def solve_ode(op, u0, t_out, cfg: SolverConfig | None = None) -> np.ndarray:
    """Integrate ``du/dt = op u`` and return the states at ``t_out``.

    ``u0`` is a state vector or a matrix whose columns are independent states
    (integrated together, sharing step sizes). The result has shape
    ``(len(t_out),) + u0.shape``; the first entry is ``u0`` at ``t_out[0]``.

    Raises
    ------
    BlowUpError
        A non-finite state appeared.
    MaxStepsError
        The adaptive method used more than ``cfg.max_steps`` steps.
    """
    cfg = cfg or SolverConfig()
    t_out = np.atleast_1d(np.asarray(t_out, dtype=float))
    if t_out[0] < 0 or np.any(np.diff(t_out) < 0):
        raise ValueError("output times must be non-negative and non-decreasing")
    u0 = np.asarray(u0, dtype=float)
    f, n = _as_rhs(op)
    if u0.shape[0] != n:
        raise ValueError(f"state has length {u0.shape[0]}, operator has size {n}")
    # non-finite states are detected and reported explicitly
    with np.errstate(over="ignore", invalid="ignore"):
        if cfg.method is SolverMethod.ADAPTIVE:
            return _solve_adaptive(f, u0, t_out, cfg)
        if cfg.method is SolverMethod.RK4:
            return _solve_rk4(f, u0, t_out, cfg)
        return _solve_exponential(op, u0, t_out)


# Snapshot sets ---------------------------------------------------------------

@dataclass(eq=False)
class SnapshotSet:
    """Snapshots of ``n_IC`` trajectories at ``n_t`` shared times.

    Column ``i * n_t + j`` holds trajectory ``i`` at ``times[j]``. The fine
    matrices ``U``/``Udot`` may be ``None`` for filtered-only sets.
    """

    U: np.ndarray | None
    Udot: np.ndarray | None
    Ubar: np.ndarray
    Ubar_dot: np.ndarray
    times: np.ndarray
    n_IC: int
    n_t: int
    name: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.n_IC * self.n_t
        for label in ("U", "Udot", "Ubar", "Ubar_dot"):
            mat = getattr(self, label)
            if mat is not None and mat.shape[1] != d:
                raise ValueError(f"{label} has {mat.shape[1]} columns, expected {d}")
        if len(self.times) != self.n_t:
            raise ValueError("times length does not match n_t")

    @property
    def d(self) -> int:
        return self.n_IC * self.n_t

    @property
    def M(self) -> int:
        return self.Ubar.shape[0]

    def trajectories(self) -> np.ndarray:
        """Filtered states as an ``(n_IC, n_t, M)`` array."""
        return self.Ubar.T.reshape(self.n_IC, self.n_t, self.M)

    def filtered_with(self, W: FilterMatrix, keep_fine: bool = True) -> "SnapshotSet":
        """Re-filter the fine snapshots with another filter matrix."""
        if self.U is None:
            raise ValueError("snapshot set has no fine-grid data")
        return replace(
            self,
            U=self.U if keep_fine else None,
            Udot=self.Udot if keep_fine else None,
            Ubar=filter_snapshots(W, self.U),
            Ubar_dot=filter_snapshots(W, self.Udot),
            meta=dict(self.meta, M=W.rows),
        )

    def subset(self, n_IC: int) -> "SnapshotSet":
        """The first ``n_IC`` trajectories."""
        n = n_IC * self.n_t

        def cut(m):
            return None if m is None else m[:, :n]

        return replace(self, U=cut(self.U), Udot=cut(self.Udot), Ubar=cut(self.Ubar),
                       Ubar_dot=cut(self.Ubar_dot), n_IC=n_IC)


def time_stamps(n_t: int, T: float) -> np.ndarray:
    """``n_t`` uniform times on [0, T], endpoints included; ``[0]`` if n_t == 1."""
    if n_t == 1:
        return np.zeros(1)
    return np.linspace(0.0, T, n_t)


def generate_dataset(name: str, fine: Grid, W: FilterMatrix | None,
                     ic: InitialConditionSpec | None = None,
                     cfg: SolverConfig | None = None, *, n_IC: int | None = None,
                     n_t: int | None = None, T: float | None = None,
                     chunk: int = 100, keep_fine: bool = True) -> SnapshotSet:
    """Solve the fine-grid convection equation from random initial conditions.

    Table defaults for ``name`` are used unless overridden. Derivative
    snapshots are the fine right-hand side ``A u``; filtered counterparts
    are ``W U`` and ``W A U``. Initial conditions are integrated ``chunk`` at
    a time.
    """
    base_n_IC, base_n_t, base_T = DATASET_TABLE.get(name, (None, None, None))
    n_IC = n_IC if n_IC is not None else base_n_IC
    n_t = n_t if n_t is not None else base_n_t
    T = T if T is not None else base_T
    if n_IC is None or n_t is None or T is None:
        raise ValueError(f"dataset {name!r} needs explicit n_IC, n_t and T")
    ic = ic or InitialConditionSpec()
    cfg = cfg or SolverConfig()
    A = convection_operator(fine)
    times = time_stamps(n_t, T)
    N = fine.n_points

    U = np.empty((N, n_IC * n_t))
    for start in range(0, n_IC, chunk):
        idx = range(start, min(start + chunk, n_IC))
        u0 = np.column_stack([sample_initial_condition(ic, i, fine, name) for i in idx])
        try:
            sol = solve_ode(A, u0, times, cfg)  # (n_t, N, batch)
        except SolverError as exc:
            raise type(exc)(f"{name} initial conditions {idx.start}..{idx.stop - 1}: "
                            f"{exc}", exc.t_fail, exc.partial) from exc
        block = sol.transpose(1, 2, 0).reshape(N, -1)
        U[:, idx.start * n_t:idx.stop * n_t] = block
        log.debug("%s: integrated initial conditions %d..%d", name, idx.start,
                  idx.stop - 1)
    Udot = apply(A, U)
    if W is None:
        Ubar, Ubar_dot = U, Udot
    else:
        Ubar, Ubar_dot = filter_snapshots(W, U), filter_snapshots(W, Udot)
    return SnapshotSet(
        U=U if keep_fine else None, Udot=Udot if keep_fine else None,
        Ubar=Ubar, Ubar_dot=Ubar_dot, times=times, n_IC=n_IC, n_t=n_t,
        name=name, seed=ic.seed,
        meta={"N": N, "M": Ubar.shape[0], "T": T, "K": ic.max_frequency},
    )
