"""Inference of coarse filtered operators from snapshot data.

Three routes produce an ``M x M`` operator for ``d(ubar)/dt = Abar ubar``:

* intrusive: ``W A R`` with a ridge-regression reconstruction ``R``;
* derivative fitting: regularized least squares of ``Abar Ubar ~ Ubar_dot``;
* embedded: ADAM on the trajectory misfit of an RK4 solve, with gradients
  from the discrete adjoint in :mod:`discfilter.adjoint`.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import adjoint
from .dns import SnapshotSet
from .filterbank import FilterMatrix
from .stencils import CirculantOperator

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = tuple(10.0 ** p for p in range(-12, 1))


class Route(str, enum.Enum):
    BASELINE = "baseline"
    INTRUSIVE = "intrusive"
    DERIVATIVE_FIT = "df"
    EMBEDDED = "embedded"


class SingularSystemError(np.linalg.LinAlgError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration


@dataclass
class InferredOperator:
    matrix: np.ndarray
    route: Route
    hyperparams: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    history: np.ndarray | None = None

    def __post_init__(self):
        self.route = Route(self.route)
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError(f"operator must be square, got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("operator has non-finite entries")

    @property
    def M(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class RegularizationConfig:
    lam: float = 0.0
    lam_prior: float = 0.0
    lam_stab: float = 0.0
    grid: tuple = DEFAULT_LAMBDA_GRID

    def __post_init__(self):
        if min(self.lam, self.lam_prior, self.lam_stab) < 0:
            raise ValueError("regularization weights must be non-negative")
        if not self.grid or min(self.grid) < 0:
            raise ValueError("regularization grid must be non-empty and non-negative")


def _dense(op):
    if isinstance(op, CirculantOperator):
        return op.dense()
    if isinstance(op, InferredOperator):
        return op.matrix
    if isinstance(op, FilterMatrix):
        return op.weights
    return np.asarray(op, dtype=float)


def baseline_operator(A_M) -> InferredOperator:
    return InferredOperator(_dense(A_M), Route.BASELINE)


# Closed-form fits ------------------------------------------------------------

def _shifted_solve(cross, gram, shift):
    """Return ``cross @ inv(gram + shift I)`` for symmetric PSD ``gram``."""
    lhs = gram + shift * np.eye(gram.shape[0])
    with warnings.catch_warnings():
        warnings.simplefilter("error", sla.LinAlgWarning)
        try:
            sol = sla.solve(lhs, cross.T, assume_a="pos")
        except (np.linalg.LinAlgError, sla.LinAlgWarning) as exc:
            if shift > 0:
                # ill-conditioned but regularized: accept the solve
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", sla.LinAlgWarning)
                    sol = sla.solve(lhs, cross.T, assume_a="sym")
            else:
                raise SingularSystemError(
                    "normal equations are singular; use a positive "
                    "regularization weight") from exc
    return sol.T


class ReconstructionProblem:
    """Ridge regression ``R = argmin (1/d)||R Ubar - U||^2 + lam ||R||^2``.

    The Gram matrices are formed once so that many ``lam`` can be tried.
    """

    def __init__(self, Ubar, U):
        Ubar = np.asarray(Ubar, dtype=float)
        U = np.asarray(U, dtype=float)
        if Ubar.shape[1] != U.shape[1] or Ubar.shape[1] < 1:
            raise ValueError("Ubar and U must have the same positive number of columns")
        self.d = Ubar.shape[1]
        self.gram = Ubar @ Ubar.T / self.d
        self.cross = U @ Ubar.T / self.d

    def solve(self, lam: float) -> np.ndarray:
        if lam < 0:
            raise ValueError("lam must be non-negative")
        # (1/d) scaling of both factors turns d*lam into lam
        return _shifted_solve(self.cross, self.gram, lam)


def fit_reconstruction(Ubar, U, lam: float) -> np.ndarray:
    """``R = U Ubar^T (Ubar Ubar^T + d lam I)^{-1}``, an ``N x M`` matrix."""
    return ReconstructionProblem(Ubar, U).solve(lam)


def intrusive_operator(W, A, R, **hyperparams) -> InferredOperator:
    W, R = _dense(W), np.asarray(R, dtype=float)
    if W.shape[1] != R.shape[0] or R.shape[1] != W.shape[0]:
        raise ValueError(f"cannot chain W {W.shape}, A, R {R.shape}")
    if isinstance(A, CirculantOperator):
        if A.size != W.shape[1]:
            raise ValueError("A does not match the fine grid of W")
        AR = A @ R
    else:
        A = np.asarray(A, dtype=float)
        if A.shape != (W.shape[1], W.shape[1]):
            raise ValueError(f"A has shape {A.shape}, expected {(W.shape[1],) * 2}")
        AR = A @ R
    return InferredOperator(W @ AR, Route.INTRUSIVE, dict(hyperparams))


class DerivativeFitProblem:
    """``argmin (1/d)||Abar Ubar - Ubar_dot||^2 + lp ||Abar - A_M||^2
    + ls ||Abar - D_M||^2``, solved in closed form for any ``(lp, ls)``."""

    def __init__(self, Ubar, Ubar_dot, A_M, D_M):
        Ubar = np.asarray(Ubar, dtype=float)
        Ubar_dot = np.asarray(Ubar_dot, dtype=float)
        if Ubar.shape != Ubar_dot.shape:
            raise ValueError("Ubar and Ubar_dot must have the same shape")
        self.d = Ubar.shape[1]
        self.gram = Ubar @ Ubar.T / self.d
        self.cross = Ubar_dot @ Ubar.T / self.d
        self.A_M = _dense(A_M)
        self.D_M = _dense(D_M)
        M = Ubar.shape[0]
        if self.A_M.shape != (M, M) or self.D_M.shape != (M, M):
            raise ValueError("prior operators do not match the coarse grid size")

    def solve(self, lam_prior: float, lam_stab: float) -> np.ndarray:
        if lam_prior < 0 or lam_stab < 0:
            raise ValueError("regularization weights must be non-negative")
        rhs = self.cross + lam_prior * self.A_M + lam_stab * self.D_M
        return _shifted_solve(rhs, self.gram, lam_prior + lam_stab)

    def objective_gradient(self, Abar, lam_prior, lam_stab):
        return (2 * (Abar @ self.gram - self.cross)
                + 2 * lam_prior * (Abar - self.A_M)
                + 2 * lam_stab * (Abar - self.D_M))


def fit_derivative(Ubar, Ubar_dot, A_M, D_M, lam_prior: float = 0.0,
                   lam_stab: float = 0.0) -> InferredOperator:
    mat = DerivativeFitProblem(Ubar, Ubar_dot, A_M, D_M).solve(lam_prior, lam_stab)
    return InferredOperator(mat, Route.DERIVATIVE_FIT,
                            {"lam_prior": lam_prior, "lam_stab": lam_stab})


def commutator_error(op, A_M) -> float:
    """``||Abar - A_M||_F / ||A_M||_F``."""
    Abar, A_M = _dense(op), _dense(A_M)
    if Abar.shape != A_M.shape:
        raise ValueError(f"shape mismatch {Abar.shape} vs {A_M.shape}")
    return float(np.linalg.norm(Abar - A_M) / np.linalg.norm(A_M))


# Embedded fit ----------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    iterations: int = 10_000
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    seed: int = 0
    steps_per_unit: int | None = None  # RK4 steps per unit time; None -> 4 M
    stride: int | None = None

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.step_size <= 0:
            raise ValueError("invalid optimizer settings")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("ADAM decay rates must lie in [0, 1)")


class Adam:
    """ADAM with bias-corrected moment estimates for a single array."""

    def __init__(self, step_size=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.step_size = step_size
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)


def rk4_steps_for(t, steps_per_unit: int) -> np.ndarray:
    """Fixed step count for reaching time ``t``: ``ceil(steps_per_unit * t)``, >= 1."""
    t = np.asarray(t, dtype=float)
    return np.maximum(1, np.ceil(steps_per_unit * t - 1e-9)).astype(int)


def synthetic_snapshots(B, U0, times, steps_per_unit: int | None = None,
                        name: str = "synthetic", seed: int = 0) -> SnapshotSet:
    """Trajectories of ``du/dt = B u`` from the columns of ``U0``.

    States come from the same fixed-step RK4 scheme the embedded route
    trains with, so ``B`` is an exact minimizer of the embedded data loss.
    ``Ubar_dot`` holds ``B Ubar``.
    """
    B = _dense(B)
    U0 = np.asarray(U0, dtype=float)
    times = np.asarray(times, dtype=float)
    M, n_IC = U0.shape
    spu = steps_per_unit or 4 * M
    states = np.empty((M, n_IC, len(times)))
    for j, t in enumerate(times):
        states[:, :, j] = adjoint.forward(B, U0, t, rk4_steps_for(t, spu))[0]
    Ubar = states.reshape(M, -1)
    return SnapshotSet(None, None, Ubar, B @ Ubar, times, n_IC, len(times), name, seed,
                       {"M": M, "steps_per_unit": spu})


class EmbeddedLoss:
    """Minibatch loss of the embedded route and its gradient.

    ``loss = (1/B) sum_b ||S(Abar, ubar_i(0), t_j) - ubar_i(t_j)||^2
    + lp ||Abar - A_M||^2 + ls ||Abar - D_M||^2``.
    """

    def __init__(self, train: SnapshotSet, A_M, D_M, lam_prior=0.0, lam_stab=0.0,
                 steps_per_unit=None, stride=None):
        if train.times[0] != 0:
            raise ValueError("every trajectory must start at t = 0")
        if np.any(np.diff(train.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        self.traj = train.trajectories()  # (n_IC, n_t, M)
        self.times = np.asarray(train.times, dtype=float)
        self.A_M, self.D_M = _dense(A_M), _dense(D_M)
        M = self.traj.shape[2]
        if self.A_M.shape != (M, M) or self.D_M.shape != (M, M):
            raise ValueError("prior operators do not match the coarse grid size")
        self.lam_prior, self.lam_stab = lam_prior, lam_stab
        self.steps_per_unit = steps_per_unit or 4 * M
        self.stride = stride

    def pairs(self):
        """All (trajectory, time index) pairs with t > 0."""
        i, j = np.meshgrid(np.arange(self.traj.shape[0]),
                           np.arange(1, len(self.times)), indexing="ij")
        return np.column_stack([i.ravel(), j.ravel()])

    def __call__(self, Abar, ic_idx, t_idx):
        u0 = self.traj[ic_idx, 0].T
        target = self.traj[ic_idx, t_idx].T
        t = self.times[t_idx]
        n_steps = rk4_steps_for(t, self.steps_per_unit)
        B = len(ic_idx)
        data, g = adjoint.gradient(Abar, u0, t, n_steps, target, stride=self.stride)
        dp, ds = Abar - self.A_M, Abar - self.D_M
        loss = (data / B + self.lam_prior * np.sum(dp * dp)
                + self.lam_stab * np.sum(ds * ds))
        grad = g / B + 2 * self.lam_prior * dp + 2 * self.lam_stab * ds
        return loss, grad


def fit_embedded(train: SnapshotSet, A_M, D_M, lam_prior: float = 0.0,
                 lam_stab: float = 0.0, opt: OptimizerConfig | None = None,
                 init=None, callback=None) -> InferredOperator:
    """Fit ``Abar`` with ADAM on minibatches of (trajectory, time) pairs.

    Pairs are drawn uniformly with replacement from those with ``t > 0``;
    the start point is ``A_M`` unless ``init`` is given. ``callback`` is
    called as ``callback(iteration, loss, Abar)`` after each update.
    """
    opt = opt or OptimizerConfig()
    objective = EmbeddedLoss(train, A_M, D_M, lam_prior, lam_stab,
                             opt.steps_per_unit, opt.stride)
    pairs = objective.pairs()
    rng = np.random.default_rng(opt.seed)
    Abar = (_dense(init) if init is not None else objective.A_M).copy()
    adam = Adam(opt.step_size, opt.beta1, opt.beta2, opt.eps)
    history = np.empty(opt.iterations)
    for it in range(opt.iterations):
        batch = pairs[rng.integers(len(pairs), size=opt.batch_size)]
        try:
            loss, grad = objective(Abar, batch[:, 0], batch[:, 1])
        except FloatingPointError as exc:
            raise TrainingDivergedError(f"iteration {it}: {exc}", it) from exc
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingDivergedError(f"non-finite loss at iteration {it}", it)
        history[it] = loss
        Abar = adam.step(Abar, grad)
        if callback is not None:
            callback(it, loss, Abar)
        if it % 1000 == 0:
            log.debug("embedded iteration %d: loss %.6e", it, loss)
    return InferredOperator(
        Abar, Route.EMBEDDED,
        {"lam_prior": lam_prior, "lam_stab": lam_stab,
         "iterations": opt.iterations, "step_size": opt.step_size,
         "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
         "batch_size": opt.batch_size, "steps_per_unit": objective.steps_per_unit},
        {"dataset": train.name, "data_seed": train.seed, "optimizer_seed": opt.seed},
        history,
    )
