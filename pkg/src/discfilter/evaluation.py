"""Error metrics, hyperparameter search and the experiment drivers."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .dns import SnapshotSet, SolverConfig, SolverError, SolverMethod, solve_ode
from .filterbank import FilterSpec, build_filter_matrix
from .inference import (
    DEFAULT_LAMBDA_GRID,
    DerivativeFitProblem,
    InferredOperator,
    OptimizerConfig,
    ReconstructionProblem,
    Route,
    SingularSystemError,
    TrainingDivergedError,
    _dense,
    baseline_operator,
    fit_embedded,
    intrusive_operator,
)
from .stencils import Grid, convection_operator, diffusion_operator, make_grid

log = logging.getLogger(__name__)

# Coarse operators are evaluated with their exact propagator: the metric then
# contains no time-integration error at all.
EVAL_SOLVER = SolverConfig(method=SolverMethod.EXPONENTIAL)

# Each embedded fit costs minutes, so its search uses a short list of
# (lambda_prior, lambda_stab) pairs instead of the full product grid.
DEFAULT_EMBEDDED_PAIRS = ((1e-12, 1e-12), (1e-12, 1e-11))


class RouteFailure(RuntimeError):
    pass


@dataclass
class ErrorCurve:
    times: np.ndarray
    errors: np.ndarray
    dataset: str = ""
    route: str = ""
    M: int = 0
    failed_at: float | None = None


def relative_errors(pred: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Mean over columns of ``||pred - ref|| / ||ref||`` for each leading index.

    ``pred`` and ``ref`` have shape ``(n_t, M, n_IC)``.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        num = np.linalg.norm(pred - ref, axis=1)
        rel = num / np.linalg.norm(ref, axis=1)
    rel = np.where(np.isfinite(rel), rel, np.inf)
    return rel.mean(axis=1)


def error_curve(op, dataset: SnapshotSet, cfg: SolverConfig | None = None,
                route: str = "") -> ErrorCurve:
    """Relative error of ``op`` along the filtered trajectories of ``dataset``.

    The prediction starts from each trajectory's filtered state at t = 0. If
    the solve fails, the error is +inf from the failure onwards.
    """
    cfg = cfg or EVAL_SOLVER
    mat = _dense(op)
    if isinstance(op, InferredOperator):
        route = route or op.route.value
    if dataset.times[0] != 0:
        raise ValueError("dataset trajectories must include t = 0")
    if mat.shape != (dataset.M, dataset.M):
        raise ValueError(f"operator shape {mat.shape} does not match M = {dataset.M}")
    ref = dataset.trajectories().transpose(1, 2, 0)  # (n_t, M, n_IC)
    failed_at = None
    try:
        pred = solve_ode(mat, ref[0], dataset.times, cfg)
    except SolverError as exc:
        failed_at = exc.t_fail
        done = 0 if exc.partial is None else len(exc.partial)
        pred = np.full_like(ref, np.inf)
        if done:
            pred[:done] = exc.partial
    errors = relative_errors(pred, ref)
    errors[0] = 0.0 if np.isfinite(errors[0]) else errors[0]
    return ErrorCurve(np.asarray(dataset.times, dtype=float), errors, dataset.name,
                      route, dataset.M, failed_at)


def time_averaged_error(curve: ErrorCurve) -> float:
    errors = np.asarray(curve.errors if isinstance(curve, ErrorCurve) else curve)
    if np.any(np.isinf(errors)):
        return float("inf")
    return float(np.mean(errors))


# Grid search -----------------------------------------------------------------

@dataclass
class GridSearchResult:
    best: InferredOperator
    table: list  # dicts with lambda_prior, lambda_stab, valid_error


def _pick(rows, key):
    """Index of the smallest valid error; ties go to the larger regularization."""
    order = sorted(range(len(rows)), key=key)
    best = None
    for i in order:
        err = rows[i]["valid_error"]
        if np.isfinite(err) and (best is None or err <= rows[best]["valid_error"]):
            best = i
    return best


def grid_search(route, train: SnapshotSet, valid: SnapshotSet, grid=DEFAULT_LAMBDA_GRID,
                *, W=None, A=None, A_M=None, D_M=None, cfg: SolverConfig | None = None,
                opt: OptimizerConfig | None = None, pairs=None) -> GridSearchResult:
    """Fit ``route`` for each regularization candidate and keep the best one.

    The criterion is the time-averaged error on ``valid``. The intrusive
    route scans ``grid`` for the reconstruction weight (reported as
    ``lambda_prior``), derivative fitting scans ``grid x grid`` for
    ``(lambda_prior, lambda_stab)``, and the embedded route trains once per
    entry of ``pairs`` (default :data:`DEFAULT_EMBEDDED_PAIRS`).

    Raises
    ------
    RouteFailure
        No candidate produced a finite validation error.
    """
    route = Route(route)
    cfg = cfg or EVAL_SOLVER
    grid = tuple(grid)
    if not grid:
        raise ValueError("empty regularization grid")
    rows, ops = [], []

    def record(op, lp, ls):
        if op is None:
            err = float("inf")
        else:
            err = time_averaged_error(error_curve(op, valid, cfg))
        rows.append({"lambda_prior": lp, "lambda_stab": ls, "valid_error": err})
        ops.append(op)

    if route is Route.BASELINE:
        record(baseline_operator(A_M), 0.0, 0.0)
    elif route is Route.INTRUSIVE:
        problem = ReconstructionProblem(train.Ubar, train.U)
        for lam in grid:
            try:
                R = problem.solve(lam)
                op = intrusive_operator(W, A, R, lam=lam)
                op.provenance = {"dataset": train.name, "data_seed": train.seed}
            except (SingularSystemError, ValueError):
                op = None
            record(op, lam, 0.0)
    elif route is Route.DERIVATIVE_FIT:
        problem = DerivativeFitProblem(train.Ubar, train.Ubar_dot, A_M, D_M)
        for lp, ls in itertools.product(grid, grid):
            try:
                op = InferredOperator(problem.solve(lp, ls), Route.DERIVATIVE_FIT,
                                      {"lam_prior": lp, "lam_stab": ls},
                                      {"dataset": train.name, "data_seed": train.seed})
            except (SingularSystemError, ValueError):
                op = None
            record(op, lp, ls)
    else:
        for lp, ls in (pairs if pairs is not None else DEFAULT_EMBEDDED_PAIRS):
            try:
                op = fit_embedded(train, A_M, D_M, lp, ls, opt)
            except TrainingDivergedError as exc:
                log.info("embedded fit diverged (lp=%g, ls=%g): %s", lp, ls, exc)
                op = None
            record(op, lp, ls)

    best = _pick(rows, key=lambda i: (-(rows[i]["lambda_prior"] + rows[i]["lambda_stab"]),
                                      -rows[i]["lambda_stab"]))
    if best is None:
        raise RouteFailure(f"route {route.value}: no candidate gave a finite "
                           f"validation error")
    ops[best].hyperparams["valid_error"] = rows[best]["valid_error"]
    return GridSearchResult(ops[best], rows)


# Experiments -----------------------------------------------------------------

@dataclass
class SweepResult:
    """Time-averaged test errors per (filter, route, M)."""

    M_values: list
    rows: list = field(default_factory=list)
    operators: dict = field(default_factory=dict)

    def error(self, filter_name: str, route, M: int) -> float:
        route = Route(route).value
        for row in self.rows:
            if row["filter"] == filter_name and row["route"] == route and row["M"] == M:
                return row["avg_error"]
        raise KeyError((filter_name, route, M))

    def errors(self, filter_name: str, route) -> np.ndarray:
        return np.array([self.error(filter_name, route, M) for M in self.M_values])


DEFAULT_M_VALUES = (20, 40, 60, 80, 100, 150, 200)


def fit_cell(route, train: SnapshotSet, valid: SnapshotSet, W, fine: Grid, coarse: Grid,
             grid=DEFAULT_LAMBDA_GRID, cfg=None, opt=None, embedded_pairs=None):
    """Fit one route on already filtered data (``train``/``valid`` carry ``W``)."""
    route = Route(route)
    A_M = convection_operator(coarse)
    D_M = diffusion_operator(coarse)
    if route is Route.BASELINE:
        op = baseline_operator(A_M)
        err = time_averaged_error(error_curve(op, valid, cfg))
        op.hyperparams["valid_error"] = err
        return GridSearchResult(op, [{"lambda_prior": 0.0, "lambda_stab": 0.0,
                                      "valid_error": err}])
    return grid_search(route, train, valid, grid, W=W, A=convection_operator(fine),
                       A_M=A_M, D_M=D_M, cfg=cfg, opt=opt, pairs=embedded_pairs)


def convergence_sweep(M_values, routes, filters: dict, train: SnapshotSet,
                      valid: SnapshotSet, test: SnapshotSet, *, fine: Grid | None = None,
                      grid=DEFAULT_LAMBDA_GRID, cfg=None, opt=None,
                      embedded_pairs=None, keep_operators=False) -> SweepResult:
    """Test error as a function of the coarse resolution ``M``.

    ``filters`` maps a name to a :class:`FilterSpec`. The fine snapshot sets
    are re-filtered for every (filter, M); each route is fitted with a grid
    search on ``valid`` and scored on ``test``. Failed cells get ``inf``.
    """
    M_values = sorted(int(M) for M in M_values)
    fine = fine or make_grid(train.U.shape[0])
    cfg = cfg or EVAL_SOLVER
    routes = [Route(r) for r in routes]
    if Route.BASELINE not in routes:
        routes = [Route.BASELINE] + routes
    result = SweepResult(M_values)
    for name, spec in filters.items():
        for M in M_values:
            coarse = make_grid(M)
            W = build_filter_matrix(spec, coarse, fine)
            tr = train.filtered_with(W)
            va = valid.filtered_with(W, keep_fine=False)
            te = test.filtered_with(W, keep_fine=False)
            for route in routes:
                try:
                    found = fit_cell(route, tr, va, W, fine, coarse, grid, cfg, opt,
                                     embedded_pairs)
                    op = found.best
                    avg = time_averaged_error(error_curve(op, te, cfg))
                    lp = op.hyperparams.get("lam_prior", op.hyperparams.get("lam", 0.0))
                    ls = op.hyperparams.get("lam_stab", 0.0)
                except (RouteFailure, SolverError, ValueError) as exc:
                    log.warning("sweep cell (%s, %s, %d) failed: %s", name,
                                route.value, M, exc)
                    op, avg, lp, ls = None, float("inf"), float("nan"), float("nan")
                result.rows.append({"filter": name, "route": route.value, "M": M,
                                    "lambda_prior": lp, "lambda_stab": ls,
                                    "avg_error": avg})
                if keep_operators and op is not None:
                    result.operators[(name, route.value, M)] = op
                log.info("sweep %s %s M=%d: %.4g", name, route.value, M, avg)
    return result


def long_horizon_study(ops: dict, long_set: SnapshotSet, cfg=None) -> dict:
    """Error curves of several operators on a long filtered dataset."""
    return {name: error_curve(op, long_set, cfg, route=name) for name, op in ops.items()}
