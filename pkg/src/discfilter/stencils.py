"""Uniform periodic grids and circulant finite-difference operators."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

MIN_POINTS = 7

CONVECTION_STENCIL = (1, -9, 45, 0, -45, 9, -1)
DIFFUSION_STENCIL = (2, -27, 270, -490, 270, -27, 2)


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on (0, 1] with points ``x_n = n / N``, ``n = 1..N``.

    The last point ``x_N = 1`` is identified with 0.
    """

    n_points: int

    def __post_init__(self):
        if (not isinstance(self.n_points, (int, np.integer))
                or self.n_points < MIN_POINTS):
            raise ValueError(
                f"grid needs an integer number of points >= {MIN_POINTS}, "
                f"got {self.n_points}"
            )

    @property
    def spacing(self) -> float:
        return 1.0 / self.n_points

    @property
    def points(self) -> np.ndarray:
        return np.arange(1, self.n_points + 1) / self.n_points

    def __len__(self):
        return self.n_points


def make_grid(n_points: int) -> Grid:
    return Grid(n_points)


@dataclass(frozen=True)
class CirculantOperator:
    """Periodic constant-stencil operator.

    ``stencil`` holds ``(s_-a, ..., s_a)``; entry ``s_i`` sits on the i-th
    periodically extended superdiagonal, so ``(Lu)_n = scale * sum_i s_i u_{n+i}``.
    Integer stencils are kept exact and multiplied by ``scale`` only when
    materialized or applied.
    """

    size: int
    stencil: tuple
    scale: Fraction | float = 1
    _offsets: np.ndarray = field(init=False, repr=False, compare=False)
    _coeffs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.stencil) % 2 != 1:
            raise ValueError("stencil length must be odd")
        if self.size < len(self.stencil):
            raise ValueError(
                f"operator size {self.size} is smaller than the stencil width "
                f"{len(self.stencil)}"
            )
        object.__setattr__(self, "stencil", tuple(self.stencil))
        half = len(self.stencil) // 2
        object.__setattr__(self, "_offsets", np.arange(-half, half + 1))
        scale = Fraction(self.scale)
        coeffs = np.array([float(Fraction(s) * scale) for s in self.stencil])
        coeffs.flags.writeable = False
        object.__setattr__(self, "_coeffs", coeffs)

    @property
    def half_width(self) -> int:
        return len(self.stencil) // 2

    @property
    def shape(self) -> tuple[int, int]:
        return (self.size, self.size)

    def coefficients(self) -> np.ndarray:
        """Stencil entries multiplied by the scale, as floats."""
        return self._coeffs.copy()

    def dense(self) -> np.ndarray:
        n = self.size
        mat = np.zeros((n, n))
        rows = np.arange(n)
        for offset, c in zip(self._offsets, self._coeffs):
            if c != 0:
                mat[rows, (rows + offset) % n] += c
        return mat

    def __matmul__(self, v):
        return apply(self, v)


def convection_operator(grid: Grid) -> CirculantOperator:
    """Sixth-order central difference for ``-d/dx`` on ``grid``."""
    return CirculantOperator(grid.n_points, CONVECTION_STENCIL,
                             Fraction(grid.n_points, 60))


def diffusion_operator(grid: Grid) -> CirculantOperator:
    """Sixth-order central difference for ``d^2/dx^2`` on ``grid``."""
    return CirculantOperator(grid.n_points, DIFFUSION_STENCIL,
                             Fraction(grid.n_points ** 2, 180))


def apply(op: CirculantOperator, v: np.ndarray) -> np.ndarray:
    """Apply a circulant operator along the first axis of ``v``.

    ``v`` may be a single state or a matrix whose columns are states.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[0] != op.size:
        raise ValueError(
            f"state has length {v.shape[0]}, operator has size {op.size}")
    a = op.half_width
    # wrap-padded copy so every shift is a plain slice
    padded = np.concatenate([v[-a:], v, v[:a]]) if a else v
    n = op.size
    out = np.zeros_like(v)
    for offset, c in zip(op._offsets, op._coeffs):
        if c != 0:
            out += c * padded[a + offset:a + offset + n]
    return out
