import numpy as np
import pytest

from discfilter.dns import (
    InitialConditionSpec,
    SnapshotSet,
    SolverConfig,
    generate_dataset,
    solve_ode,
)
from discfilter.evaluation import (
    ErrorCurve,
    RouteFailure,
    SweepResult,
    convergence_sweep,
    error_curve,
    grid_search,
    relative_errors,
    time_averaged_error,
)
from discfilter.filterbank import FilterKind, FilterSpec, build_filter_matrix
from discfilter.inference import Route, synthetic_snapshots
from discfilter.stencils import convection_operator, diffusion_operator, make_grid


def trajectories_of(op, M=16, n_IC=4, times=(0.0, 0.25, 0.5), seed=0, method="exponential"):
    g = make_grid(M)
    U0 = np.random.default_rng(seed).standard_normal((M, n_IC))
    sol = solve_ode(op, U0, times, SolverConfig(method=method))  # (n_t, M, n_IC)
    Ubar = sol.transpose(1, 2, 0).reshape(M, -1)
    return SnapshotSet(None, None, Ubar, np.zeros_like(Ubar), np.asarray(times), n_IC,
                       len(times), "synthetic"), g


def test_self_consistent_reference():
    A = convection_operator(make_grid(16)).dense()
    ds, _ = trajectories_of(A, method="adaptive")
    cfg = SolverConfig()
    curve = error_curve(A, ds, cfg)
    assert curve.errors[0] == 0.0
    assert np.all(curve.errors < 10 * cfg.rel_tol)


def test_zero_operator_error_equals_displacement():
    A = convection_operator(make_grid(16)).dense()
    ds, _ = trajectories_of(A)
    curve = error_curve(np.zeros((16, 16)), ds)
    traj = ds.trajectories()
    expected = np.mean([np.linalg.norm(traj[i, 0] - traj[i, 2]) / np.linalg.norm(traj[i, 2])
                        for i in range(ds.n_IC)])
    assert curve.errors[2] == pytest.approx(expected, rel=1e-12)
    assert np.all(curve.errors >= 0)


def test_error_is_scale_invariant():
    rng = np.random.default_rng(1)
    pred, ref = rng.standard_normal((3, 8, 5)), rng.standard_normal((3, 8, 5))
    np.testing.assert_allclose(relative_errors(7.5 * pred, 7.5 * ref),
                               relative_errors(pred, ref), rtol=1e-14)


def test_blow_up_recorded_as_infinity():
    ds, _ = trajectories_of(convection_operator(make_grid(16)).dense(),
                            times=(0.0, 0.5, 1.0, 50.0, 100.0))
    unstable = 20.0 * np.eye(16)
    curve = error_curve(unstable, ds, SolverConfig())
    assert curve.errors[0] == 0.0
    assert np.isinf(curve.errors[-1])
    assert curve.failed_at is not None
    assert time_averaged_error(curve) == float("inf")


def test_time_averaged_error_examples():
    assert time_averaged_error(np.full(7, 0.3)) == pytest.approx(0.3)
    assert time_averaged_error(ErrorCurve(np.array([0, 1.0]), np.array([0, 0.1]))) == \
        pytest.approx(0.05)
    assert time_averaged_error(np.array([0.0, np.inf, 1.0])) == float("inf")


def test_error_curve_requires_initial_time():
    A = convection_operator(make_grid(16)).dense()
    ds, _ = trajectories_of(A, times=(0.1, 0.2))
    with pytest.raises(ValueError):
        error_curve(A, ds)
    ds, _ = trajectories_of(A)
    with pytest.raises(ValueError):
        error_curve(np.eye(15), ds)


# Grid search ----------------------------------------------------------------

def synthetic_pair(M=12, noise=0.0, seed=0):
    g = make_grid(M)
    A_M, D_M = convection_operator(g).dense(), diffusion_operator(g).dense()
    rng = np.random.default_rng(seed)
    B = A_M + 0.3 * np.abs(A_M).max() * rng.standard_normal((M, M)) / M
    B -= max(0.0, np.linalg.eigvals(B).real.max() + 0.1) * np.eye(M)
    train = synthetic_snapshots(B, rng.standard_normal((M, 6)), np.linspace(0, 0.1, 3))
    if noise:
        scale = np.abs(train.Ubar_dot).std()
        train.Ubar_dot = train.Ubar_dot + noise * scale * rng.standard_normal(
            train.Ubar_dot.shape)
    valid, _ = trajectories_of(B, M, 4, np.linspace(0, 0.5, 5), seed + 1)
    return train, valid, A_M, D_M, B


def test_single_point_grid_returns_that_fit():
    train, valid, A_M, D_M, _ = synthetic_pair()
    res = grid_search("df", train, valid, [1e-3], A_M=A_M, D_M=D_M)
    assert len(res.table) == 1
    assert res.best.hyperparams["lam_prior"] == 1e-3
    assert res.best.hyperparams["lam_stab"] == 1e-3
    assert res.table[0]["valid_error"] == res.best.hyperparams["valid_error"]


def test_df_grid_table_layout():
    train, valid, A_M, D_M, _ = synthetic_pair()
    grid = [1e-6, 1e-3, 1.0]
    res = grid_search(Route.DERIVATIVE_FIT, train, valid, grid, A_M=A_M, D_M=D_M)
    assert len(res.table) == 9
    assert [(r["lambda_prior"], r["lambda_stab"]) for r in res.table[:3]] == \
        [(1e-6, 1e-6), (1e-6, 1e-3), (1e-6, 1.0)]
    best = min(r["valid_error"] for r in res.table)
    assert res.best.hyperparams["valid_error"] == best


def test_noisy_data_has_interior_optimum():
    grid = [10.0 ** p for p in range(-8, 3)]
    interior = []
    for noise in (0.3, 1.0, 3.0):
        train, valid, A_M, D_M, _ = synthetic_pair(noise=noise, seed=4)
        res = grid_search("df", train, valid, grid, A_M=A_M, D_M=D_M)
        diag = {r["lambda_prior"]: r["valid_error"] for r in res.table
                if r["lambda_prior"] == r["lambda_stab"]}
        errs = np.array([diag[g] for g in grid])
        k = int(np.argmin(errs))
        interior.append(0 < k < len(grid) - 1)
    assert any(interior)


def test_ties_prefer_stronger_regularization():
    train, valid, A_M, D_M, B = synthetic_pair()
    # every candidate gives the baseline operator, so all errors tie
    train.Ubar_dot = A_M @ train.Ubar
    valid, _ = trajectories_of(A_M, 12, 3, (0.0, 0.2))
    res = grid_search("df", train, valid, [1e-4, 1e-2], A_M=A_M, D_M=A_M)
    assert res.best.hyperparams["lam_prior"] == 1e-2
    assert res.best.hyperparams["lam_stab"] == 1e-2


def test_intrusive_grid_search_reports_lambda_as_prior():
    fine, coarse = make_grid(60), make_grid(20)
    W = build_filter_matrix(FilterSpec(FilterKind.GAUSSIAN, 1 / 20), coarse, fine)
    ic = InitialConditionSpec(max_frequency=8, seed=1)
    train = generate_dataset("train", fine, W, ic, n_IC=12, n_t=3, T=0.05)
    valid = generate_dataset("valid", fine, W, ic, n_IC=3, n_t=4, T=0.3)
    res = grid_search("intrusive", train, valid, [1e-8, 1e-4], W=W,
                      A=convection_operator(fine))
    assert [r["lambda_prior"] for r in res.table] == [1e-8, 1e-4]
    assert all(r["lambda_stab"] == 0.0 for r in res.table)
    assert res.best.route is Route.INTRUSIVE


def test_all_candidates_failing_is_route_failure():
    train, valid, A_M, D_M, _ = synthetic_pair()
    train.Ubar_dot = 1e4 * np.eye(12)[:, :1] @ np.ones((1, train.d))
    valid = SnapshotSet(None, None, valid.Ubar, valid.Ubar_dot,
                        np.array([0.0, 10.0, 100.0, 1000.0, 2000.0]), valid.n_IC, 5)
    with pytest.raises(RouteFailure):
        grid_search("df", train, valid, [0.0], A_M=A_M, D_M=D_M, cfg=SolverConfig())


def test_small_sweep_contains_baseline_rows():
    fine = make_grid(120)
    ic = InitialConditionSpec(max_frequency=20, seed=2)
    train = generate_dataset("train", fine, None, ic, n_IC=20, n_t=4, T=0.05)
    valid = generate_dataset("valid", fine, None, ic, n_IC=3, n_t=4, T=0.3)
    test = generate_dataset("test", fine, None, ic, n_IC=3, n_t=4, T=0.3)
    filters = {"gaussian": FilterSpec(FilterKind.GAUSSIAN, 1 / 20)}
    res = convergence_sweep([40, 30], ["df"], filters, train, valid, test, fine=fine,
                            grid=[1e-8, 1e-4])
    assert isinstance(res, SweepResult)
    assert res.M_values == [30, 40]
    assert {(r["route"], r["M"]) for r in res.rows} == {
        ("baseline", 30), ("baseline", 40), ("df", 30), ("df", 40)}
    assert np.all(np.isfinite(res.errors("gaussian", "baseline")))
    assert res.error("gaussian", "df", 40) < res.error("gaussian", "baseline", 40)
