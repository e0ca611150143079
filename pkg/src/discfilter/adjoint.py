"""Fixed-step RK4 solver for ``du/dt = A u`` with a discrete adjoint.

The gradient of ``sum_j ||S(A, u0_j, t_j) - v_j||^2`` with respect to every
entry of ``A`` is obtained by running the RK4 scheme backwards in reverse
mode. Forward states are kept only every ``stride`` steps; the reverse sweep
recomputes each segment from its checkpoint.

Columns of a batch may have different end times and step counts. A column
that has finished keeps stepping with ``h = 0``, which is the identity for
RK4, so all columns share one loop without changing any result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class TapeCheckpoint:
    stride: int
    stored_states: list = field(default_factory=list)  # (step index, state)

    def state(self, step: int) -> np.ndarray:
        for idx, u in self.stored_states:
            if idx == step:
                return u
        raise KeyError(step)


def default_stride(n_steps: int) -> int:
    return max(1, math.isqrt(max(int(n_steps) - 1, 0)) + 1)


def _step_sizes(t, n_steps, batch):
    t = np.broadcast_to(np.asarray(t, dtype=float), (batch,))
    n = np.broadcast_to(np.asarray(n_steps, dtype=int), (batch,))
    if np.any(t < 0):
        raise ValueError("integration times must be non-negative")
    if np.any(n < 1):
        raise ValueError("n_steps must be at least 1")
    return t / n, n


def _h_at(h, n, step):
    return np.where(step < n, h, 0.0)


def _rk4(A, u, H):
    k1 = A @ u
    k2 = A @ (u + (H / 2) * k1)
    k3 = A @ (u + (H / 2) * k2)
    k4 = A @ (u + H * k3)
    return u + (H / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


def _as_batch(u0):
    u0 = np.asarray(u0, dtype=float)
    return (u0[:, None], True) if u0.ndim == 1 else (u0, False)


def _forward(A, U, h, n, stride):
    n_max = int(n.max())
    tape = TapeCheckpoint(stride, [(0, U.copy())])
    for step in range(n_max):
        U = _rk4(A, U, _h_at(h, n, step))
        if not np.all(np.isfinite(U)):
            raise FloatingPointError(f"non-finite state after step {step + 1}")
        if (step + 1) % stride == 0 and step + 1 < n_max:
            tape.stored_states.append((step + 1, U.copy()))
    return U, tape, n_max


def forward(A, u0, t, n_steps, stride: int | None = None):
    """Integrate with classical RK4 using ``n_steps`` steps of size ``t / n_steps``.

    ``u0`` may be a vector or an ``M x B`` matrix; ``t`` and ``n_steps`` are
    scalars or length-``B`` arrays. Returns the final state(s) and the tape.
    """
    A = np.asarray(A, dtype=float)
    U, single = _as_batch(u0)
    h, n = _step_sizes(t, n_steps, U.shape[1])
    stride = stride or default_stride(int(n.max()))
    out, tape, _ = _forward(A, U, h, n, stride)
    return (out[:, 0] if single else out), tape


def gradient(A, u0, t, n_steps, target, stride: int | None = None):
    """Loss ``sum ||S(A, u0, t) - target||^2`` and its exact gradient in ``A``.

    Batched inputs follow :func:`forward`; the loss and gradient are summed
    over columns.
    """
    A = np.asarray(A, dtype=float)
    U0, _ = _as_batch(u0)
    V, _ = _as_batch(target)
    if V.shape != U0.shape:
        raise ValueError(f"target shape {V.shape} does not match state {U0.shape}")
    h, n = _step_sizes(t, n_steps, U0.shape[1])
    stride = stride or default_stride(int(n.max()))
    final, tape, n_max = _forward(A, U0, h, n, stride)

    resid = final - V
    loss = float(np.sum(resid * resid))
    lam = 2.0 * resid
    grad = np.zeros_like(A)
    At = A.T
    checkpoints = tape.stored_states
    for c in range(len(checkpoints) - 1, -1, -1):
        start, Y = checkpoints[c]
        stop = checkpoints[c + 1][0] if c + 1 < len(checkpoints) else n_max
        states = [Y]
        for step in range(start, stop - 1):
            states.append(_rk4(A, states[-1], _h_at(h, n, step)))
        for step in range(stop - 1, start - 1, -1):
            lam = _rk4_adjoint_step(A, At, states[step - start], _h_at(h, n, step),
                                    lam, grad)
        if not np.all(np.isfinite(lam)):
            raise FloatingPointError("non-finite adjoint state")
    return loss, grad


def _rk4_adjoint_step(A, At, Y, H, lam, grad):
    """Pull ``lam = dL/dY_next`` back through one RK4 step; accumulate into grad."""
    z1 = Y
    k1 = A @ z1
    z2 = Y + (H / 2) * k1
    k2 = A @ z2
    z3 = Y + (H / 2) * k2
    k3 = A @ z3
    z4 = Y + H * k3

    dk4 = (H / 6) * lam
    dk3 = (H / 3) * lam
    dk2 = (H / 3) * lam
    dk1 = (H / 6) * lam
    dz4 = At @ dk4
    dk3 = dk3 + H * dz4
    dz3 = At @ dk3
    dk2 = dk2 + (H / 2) * dz3
    dz2 = At @ dk2
    dk1 = dk1 + (H / 2) * dz2
    dz1 = At @ dk1
    # dL/dA = sum over stages of (stage adjoint) (stage input)^T
    grad += np.hstack([dk1, dk2, dk3, dk4]) @ np.hstack([z1, z2, z3, z4]).T
    return lam + dz1 + dz2 + dz3 + dz4


def finite_difference_gradient(A, u0, t, n_steps, target, eps=1e-6):
    """Central differences of the loss, entry by entry. Test oracle."""
    A = np.asarray(A, dtype=float)
    U0, _ = _as_batch(u0)
    V, _ = _as_batch(target)

    def loss(B):
        S, _ = forward(B, U0, t, n_steps)
        return float(np.sum((S - V) ** 2))

    g = np.zeros_like(A)
    for idx in np.ndindex(A.shape):
        Ap, Am = A.copy(), A.copy()
        Ap[idx] += eps
        Am[idx] -= eps
        g[idx] = (loss(Ap) - loss(Am)) / (2 * eps)
    return g


def gradcheck(n_instances: int = 20, max_size: int = 8, seed: int = 0):
    """Compare adjoint and finite-difference gradients on random problems.

    Returns ``(max relative discrepancy, max stride discrepancy)``. The
    stride discrepancy compares strides 1, 10 and ``n_steps``.
    """
    rng = np.random.default_rng(seed)
    worst_fd = worst_stride = 0.0
    for _ in range(n_instances):
        M = int(rng.integers(1, max_size + 1))
        B = int(rng.integers(1, 4))
        A = rng.standard_normal((M, M))
        u0 = rng.standard_normal((M, B))
        v = rng.standard_normal((M, B))
        t = rng.uniform(0.1, 1.0, size=B)
        n_steps = rng.integers(5, 30, size=B)
        _, g = gradient(A, u0, t, n_steps, v)
        g_fd = finite_difference_gradient(A, u0, t, n_steps, v)
        worst_fd = max(worst_fd, np.linalg.norm(g - g_fd) / np.linalg.norm(g_fd))
        grads = [gradient(A, u0, t, n_steps, v, stride=s)[1]
                 for s in (1, 10, int(n_steps.max()))]
        scale = np.linalg.norm(grads[0])
        for other in grads[1:]:
            worst_stride = max(worst_stride,
                               np.linalg.norm(other - grads[0]) / scale)
    return worst_fd, worst_stride
