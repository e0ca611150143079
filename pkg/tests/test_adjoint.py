import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from discfilter.adjoint import (
    default_stride,
    finite_difference_gradient,
    forward,
    gradcheck,
    gradient,
)
from discfilter.dns import SolverConfig, fourier_profile, solve_ode
from discfilter.stencils import convection_operator, make_grid


def quartic(z):
    return 1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24


def test_zero_time_returns_input():
    u0 = np.arange(5.0)
    out, tape = forward(np.ones((5, 5)), u0, 0.0, 3)
    assert np.array_equal(out, u0)
    assert tape.stored_states[0][0] == 0


def test_scalar_single_step_is_stability_polynomial():
    a, s = -1.7, 0.3
    out, _ = forward(np.array([[a]]), np.array([1.0]), s, 1)
    assert out[0] == pytest.approx(quartic(a * s), rel=1e-15)


def test_scalar_gradient_closed_form():
    a, s, u0, v = 0.8, 0.45, 1.3, -0.2
    loss, g = gradient(np.array([[a]]), np.array([u0]), s, 1, np.array([v]))
    z = a * s
    r = quartic(z) * u0 - v
    dR = s * (1 + z + z**2 / 2 + z**3 / 6)
    assert loss == pytest.approx(r**2, rel=1e-14)
    assert abs(g[0, 0] - 2 * r * dR * u0) < 1e-12


def test_exact_target_gives_zero_gradient():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((6, 6))
    u0 = rng.standard_normal((6, 3))
    target, _ = forward(A, u0, 0.7, 20)
    loss, g = gradient(A, u0, 0.7, 20, target)
    assert loss == 0.0
    assert np.max(np.abs(g)) < 1e-14


def test_two_by_two_matches_finite_differences():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((2, 2))
    u0, v = rng.standard_normal(2), rng.standard_normal(2)
    _, g = gradient(A, u0, 0.9, 12, v)
    g_fd = finite_difference_gradient(A, u0, 0.9, 12, v)
    assert np.linalg.norm(g - g_fd) / np.linalg.norm(g_fd) < 1e-6


@settings(max_examples=20, deadline=None)
@given(M=st.integers(1, 8), B=st.integers(1, 3), seed=st.integers(0, 2**31),
       steps=st.integers(1, 25))
def test_gradient_matches_finite_differences(M, B, seed, steps):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((M, M))
    u0, v = rng.standard_normal((M, B)), rng.standard_normal((M, B))
    t = rng.uniform(0.05, 1.0, size=B)
    _, g = gradient(A, u0, t, steps, v)
    g_fd = finite_difference_gradient(A, u0, t, steps, v)
    assert np.linalg.norm(g - g_fd) <= 1e-5 * max(np.linalg.norm(g_fd), 1e-8)


def test_gradcheck_suite():
    worst_fd, worst_stride = gradcheck(20, 8, seed=1)
    assert worst_fd < 1e-5
    assert worst_stride < 1e-13


@pytest.mark.parametrize("n_steps", [1, 7, 50, 101])
def test_checkpoint_stride_invariance(n_steps):
    rng = np.random.default_rng(n_steps)
    A = rng.standard_normal((5, 5))
    u0, v = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    ref = gradient(A, u0, 0.5, n_steps, v, stride=1)
    for stride in (10, n_steps, default_stride(n_steps)):
        loss, g = gradient(A, u0, 0.5, n_steps, v, stride=stride)
        assert loss == ref[0]
        assert np.linalg.norm(g - ref[1]) <= 1e-13 * np.linalg.norm(ref[1])


def test_batch_gradient_is_sum_of_members():
    rng = np.random.default_rng(8)
    A = rng.standard_normal((4, 4))
    u0, v = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    t, n = np.array([0.2, 0.5, 0.9]), np.array([3, 8, 14])
    loss, g = gradient(A, u0, t, n, v)
    parts = [gradient(A, u0[:, j], t[j], n[j], v[:, j]) for j in range(3)]
    assert loss == pytest.approx(sum(p[0] for p in parts), rel=1e-13)
    np.testing.assert_allclose(g, sum(p[1] for p in parts), rtol=1e-12, atol=1e-13)


def test_batch_forward_matches_columns():
    rng = np.random.default_rng(9)
    A = rng.standard_normal((4, 4))
    u0 = rng.standard_normal((4, 2))
    out, _ = forward(A, u0, [0.3, 0.8], [4, 9])
    for j, (t, n) in enumerate([(0.3, 4), (0.8, 9)]):
        col = forward(A, u0[:, j], t, n)[0]
        assert np.max(np.abs(out[:, j] - col)) <= 1e-14 * np.abs(col).max()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_linear_in_initial_state(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((6, 6))
    u, w = rng.standard_normal(6), rng.standard_normal(6)
    lhs, _ = forward(A, alpha * u + beta * w, 0.6, 10)
    rhs = alpha * forward(A, u, 0.6, 10)[0] + beta * forward(A, w, 0.6, 10)[0]
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * max(1.0, np.linalg.norm(rhs))


def test_fourth_order_convergence():
    rng = np.random.default_rng(4)
    Q = np.linalg.qr(rng.standard_normal((6, 6)))[0]
    A = Q @ np.diag(-np.linspace(0.5, 3, 6)) @ Q.T + 0.5 * (Q - Q.T)
    u0 = rng.standard_normal(6)
    exact = expm(1.0 * A) @ u0
    errs = [np.linalg.norm(forward(A, u0, 1.0, n)[0] - exact) for n in (10, 20, 40, 80)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 3.9)


def test_coarse_convection_matches_adaptive_reference():
    g = make_grid(100)
    A = convection_operator(g).dense()
    # smooth state: 400 steps keep the RK4 error of wave 5 near 1e-7
    u0 = fourier_profile(5, g)
    out, _ = forward(A, u0, 1.0, 400)
    ref = solve_ode(A, u0, [0.0, 1.0], SolverConfig())[1]
    assert np.linalg.norm(out - ref) / np.linalg.norm(ref) < 1e-5


def test_non_finite_state_raises():
    with pytest.raises(FloatingPointError):
        with np.errstate(over="ignore", invalid="ignore"):
            forward(1e6 * np.eye(3), np.ones(3), 1.0, 100)


def test_invalid_arguments():
    with pytest.raises(ValueError):
        forward(np.eye(2), np.ones(2), -1.0, 3)
    with pytest.raises(ValueError):
        forward(np.eye(2), np.ones(2), 1.0, 0)
    with pytest.raises(ValueError):
        gradient(np.eye(2), np.ones(2), 1.0, 3, np.ones(3))
