"""Spatial grids and finite-difference stencil coefficients.

Three-point stencils on arbitrary non-uniform meshes, with the downward
(i-2, i-1, i), central (i-1, i, i+1) and upward (i, i+1, i+2) variants used
by the ADI assembly. Grids are immutable; all coefficient functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "Grid1D",
    "StencilCoeffs",
    "MixedStencil",
    "build_sinh_stock_grid",
    "build_sinh_variance_grid",
    "build_uniform_grid",
    "fd_first_coeffs",
    "fd_second_coeffs",
    "fd_mixed_coeffs",
    "first_coeffs_all",
    "second_coeffs_all",
]

Scheme = Literal["downward", "central", "upward"]

_OFFSETS = {"downward": (-2, -1, 0), "central": (-1, 0, 1), "upward": (0, 1, 2)}


@dataclass(frozen=True)
class Grid1D:
    nodes: NDArray[np.float64]
    kind: str = "uniform"
    spacings: NDArray[np.float64] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        nodes = np.ascontiguousarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("grid needs at least two nodes")
        d = np.diff(nodes)
        if not np.all(d > 0):
            raise ValueError("grid nodes must be strictly increasing")
        nodes.setflags(write=False)
        # spacings[i] = x_i - x_{i-1}; spacings[0] is undefined and stored as nan
        sp = np.concatenate(([np.nan], d))
        sp.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "spacings", sp)

    def __len__(self) -> int:
        return self.nodes.size

    @property
    def m(self) -> int:
        """Index of the last node."""
        return self.nodes.size - 1


@dataclass(frozen=True)
class StencilCoeffs:
    offsets: tuple[int, ...]
    weights: tuple[float, ...]

    def apply(self, values: NDArray[np.float64], i: int) -> float:
        return float(sum(w * values[i + k] for k, w in zip(self.offsets, self.weights)))


@dataclass(frozen=True)
class MixedStencil:
    s_offsets: tuple[int, ...]
    v_offsets: tuple[int, ...]
    weights: NDArray[np.float64]  # shape (len(s_offsets), len(v_offsets))

    def apply(self, f: NDArray[np.float64], i: int, j: int) -> float:
        total = 0.0
        for a, k in enumerate(self.s_offsets):
            for b, l in enumerate(self.v_offsets):
                total += self.weights[a, b] * f[i + k, j + l]
        return float(total)


def build_uniform_grid(lo: float, hi: float, n: int) -> Grid1D:
    if not lo < hi:
        raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
    if n < 1:
        raise ValueError("n must be >= 1")
    nodes = lo + (hi - lo) * np.arange(n + 1) / n
    nodes[-1] = hi
    return Grid1D(nodes, kind="uniform")


def build_sinh_stock_grid(K: float, s_max: float, c: float, m1: int) -> Grid1D:
    """Stock mesh s_i = K + c sinh(xi_i), clustered around the strike.

    The xi_i are equidistant between asinh(-K/c) and asinh((s_max - K)/c),
    so s_0 = 0 and s_m1 = s_max.
    """
    if K <= 0:
        raise ValueError("K must be positive")
    if c <= 0:
        raise ValueError("stretch c must be positive")
    if s_max <= K:
        raise ValueError("s_max must exceed K")
    if m1 < 2:
        raise ValueError("m1 must be >= 2")
    xi_lo = np.arcsinh(-K / c)
    xi_hi = np.arcsinh((s_max - K) / c)
    xi = xi_lo + np.arange(m1 + 1) * (xi_hi - xi_lo) / m1
    s = K + c * np.sinh(xi)
    s[0] = 0.0
    s[-1] = s_max
    return Grid1D(s, kind="sinh-stock")


def build_sinh_variance_grid(v_max: float, d: float, m2: int) -> Grid1D:
    if v_max <= 1:
        raise ValueError("v_max must exceed 1")
    if d <= 0:
        raise ValueError("stretch d must be positive")
    if m2 < 2:
        raise ValueError("m2 must be >= 2")
    zeta = np.arange(m2 + 1) * np.arcsinh(v_max / d) / m2
    v = d * np.sinh(zeta)
    v[0] = 0.0
    v[-1] = v_max
    return Grid1D(v, kind="sinh-variance")


def _check_index(grid: Grid1D, i: int, scheme: str) -> None:
    if scheme not in _OFFSETS:
        raise ValueError(f"unknown scheme {scheme!r}")
    lo, hi = _OFFSETS[scheme][0], _OFFSETS[scheme][-1]
    if i + lo < 0 or i + hi > grid.m:
        raise IndexError(f"{scheme} stencil does not fit at index {i} of a grid with {grid.m + 1} nodes")


def _first_weights(h: NDArray, i, scheme: str):
    # h[k] = x_k - x_{k-1}; i may be an index array
    if scheme == "downward":
        a, b = h[i - 1], h[i]
        return (b / (a * (a + b)), (-a - b) / (a * b), (a + 2 * b) / (b * (a + b)))
    if scheme == "central":
        a, b = h[i], h[i + 1]
        return (-b / (a * (a + b)), (b - a) / (a * b), a / (b * (a + b)))
    a, b = h[i + 1], h[i + 2]
    return ((-2 * a - b) / (a * (a + b)), (a + b) / (a * b), -a / (b * (a + b)))


def _second_weights(h: NDArray, i, scheme: str):
    if scheme == "downward":
        a, b = h[i - 1], h[i]
        return (2 / (a * (a + b)), -2 / (a * b), 2 / (b * (a + b)))
    if scheme == "central":
        a, b = h[i], h[i + 1]
        return (2 / (a * (a + b)), -2 / (a * b), 2 / (b * (a + b)))
    a, b = h[i + 1], h[i + 2]
    return (2 / (a * (a + b)), -2 / (a * b), 2 / (b * (a + b)))


def fd_first_coeffs(grid: Grid1D, i: int, scheme: Scheme) -> StencilCoeffs:
    _check_index(grid, i, scheme)
    w = _first_weights(grid.spacings, i, scheme)
    return StencilCoeffs(_OFFSETS[scheme], tuple(float(x) for x in w))


def fd_second_coeffs(grid: Grid1D, i: int, scheme: Scheme) -> StencilCoeffs:
    _check_index(grid, i, scheme)
    w = _second_weights(grid.spacings, i, scheme)
    return StencilCoeffs(_OFFSETS[scheme], tuple(float(x) for x in w))


def fd_mixed_coeffs(
    grid_s: Grid1D, grid_v: Grid1D, i: int, j: int, scheme_v: Literal["central", "upward"] = "central"
) -> MixedStencil:
    """Tensor-product stencil for the cross derivative: central in s times ``scheme_v`` in v."""
    if scheme_v not in ("central", "upward"):
        raise ValueError("scheme_v must be 'central' or 'upward'")
    bs = fd_first_coeffs(grid_s, i, "central")
    bv = fd_first_coeffs(grid_v, j, scheme_v)
    return MixedStencil(bs.offsets, bv.offsets, np.outer(bs.weights, bv.weights))


def first_coeffs_all(grid: Grid1D, idx: NDArray[np.int64], scheme: Scheme) -> NDArray[np.float64]:
    """Vectorised first-derivative weights, shape (len(idx), 3), ordered by stencil offset."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size:
        _check_index(grid, int(idx.min()), scheme)
        _check_index(grid, int(idx.max()), scheme)
    return np.stack(_first_weights(grid.spacings, idx, scheme), axis=-1)


def second_coeffs_all(grid: Grid1D, idx: NDArray[np.int64], scheme: Scheme) -> NDArray[np.float64]:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size:
        _check_index(grid, int(idx.min()), scheme)
        _check_index(grid, int(idx.max()), scheme)
    return np.stack(_second_weights(grid.spacings, idx, scheme), axis=-1)
