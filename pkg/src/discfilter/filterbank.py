"""Non-uniform kernel filters and their quadrature discretization.

A filter is described by a kernel ``G(x, xi)`` whose radius ``h(x)`` varies
with the output location. The discrete filter ``W`` (M x N) maps a fine-grid
state to the coarse grid with the normalized midpoint rule

    W_mn = Gp(x_m, xi_n) / sum_i Gp(x_m, xi_i),

where ``Gp(x, xi) = sum_{|z| <= z_max} G(x, xi + z)`` periodizes the kernel.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .stencils import Grid

# Rounding slack for the inclusive top-hat boundary: grid points lying
# exactly on x +- h must not drop out because of the subtraction.
BOUNDARY_SLACK = 1e-12
GAUSSIAN_FLOOR = 1e-300


class FilterKind(str, enum.Enum):
    TOPHAT = "tophat"
    GAUSSIAN = "gaussian"


def sinusoidal_radius(h0: float) -> Callable[[np.ndarray], np.ndarray]:
    """``h(x) = (1 + sin(2 pi x) / 3) h0``; twice as wide at 1/4 as at 3/4."""
    def h(x):
        return (1.0 + np.sin(2 * np.pi * np.asarray(x, dtype=float)) / 3.0) * h0
    h.label = "sinusoidal"
    return h


def constant_radius(h0: float) -> Callable[[np.ndarray], np.ndarray]:
    def h(x):
        return np.full(np.shape(x), float(h0))
    h.label = "constant"
    return h


RADIUS_PROFILES = {
    "sinusoidal": sinusoidal_radius,
    "constant": constant_radius,
}


@dataclass(frozen=True)
class FilterSpec:
    """Kernel description.

    Parameters
    ----------
    kind : FilterKind
        Top-hat or Gaussian.
    h0 : float
        Base radius.
    profile : str
        Name of the radius profile, a key of ``RADIUS_PROFILES``.
    z_max : int
        Number of periodic images kept on each side of the domain.
    """

    kind: FilterKind = FilterKind.TOPHAT
    h0: float = 1 / 50
    profile: str = "sinusoidal"
    z_max: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", FilterKind(self.kind))
        if not self.h0 > 0:
            raise ValueError(f"h0 must be positive, got {self.h0}")
        if self.profile not in RADIUS_PROFILES:
            raise ValueError(f"unknown radius profile {self.profile!r}")
        if int(self.z_max) != self.z_max or self.z_max < 1:
            raise ValueError(f"z_max must be an integer >= 1, got {self.z_max}")

    @property
    def radius_fn(self):
        return RADIUS_PROFILES[self.profile](self.h0)


def radius(spec: FilterSpec, x):
    return spec.radius_fn(x)


def kernel(spec: FilterSpec, x, xi):
    """Evaluate ``G(x, xi)`` (no periodization). Broadcasts over ``x`` and ``xi``."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    h = spec.radius_fn(x)
    dist = np.abs(xi - x)
    if spec.kind is FilterKind.TOPHAT:
        inside = dist <= h + BOUNDARY_SLACK
        return np.where(inside, 1.0 / (2.0 * h), 0.0)
    g = np.sqrt(3.0 / (2.0 * np.pi * h**2)) * np.exp(-1.5 * dist**2 / h**2)
    return np.where(g < GAUSSIAN_FLOOR, 0.0, g)


@dataclass(frozen=True, eq=False)
class FilterMatrix:
    weights: np.ndarray
    coarse_grid: Grid
    fine_grid: Grid
    spec: FilterSpec | None = None

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def cols(self) -> int:
        return self.weights.shape[1]

    @property
    def shape(self):
        return self.weights.shape

    def __matmul__(self, other):
        return self.weights @ other

    def __array__(self, dtype=None, copy=None):
        return self.weights if dtype is None else self.weights.astype(dtype)


def build_filter_matrix(spec: FilterSpec, coarse: Grid, fine: Grid) -> FilterMatrix:
    M, N = coarse.n_points, fine.n_points
    if M > N:
        raise ValueError(f"coarse grid ({M}) must not be finer than fine grid ({N})")
    x = coarse.points[:, None]
    xi = fine.points[None, :]
    raw = np.zeros((M, N))
    for z in range(-spec.z_max, spec.z_max + 1):
        raw += kernel(spec, x, xi + z)
    totals = raw.sum(axis=1)
    empty = np.flatnonzero(totals == 0)
    if empty.size:
        raise ValueError(
            f"filter support contains no fine grid point for {empty.size} coarse "
            f"point(s), first at x = {coarse.points[empty[0]]:.6g}; the radius is "
            f"narrower than half the fine spacing"
        )
    weights = raw / totals[:, None]
    weights.flags.writeable = False
    return FilterMatrix(weights, coarse, fine, spec)


def filter_snapshots(W: FilterMatrix, fine_states: np.ndarray) -> np.ndarray:
    fine_states = np.asarray(fine_states, dtype=float)
    if fine_states.shape[0] != W.cols:
        raise ValueError(
            f"states have {fine_states.shape[0]} rows, filter expects {W.cols}")
    return W.weights @ fine_states
