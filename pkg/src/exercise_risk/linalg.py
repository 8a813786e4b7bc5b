"""Shared numerical kernels: tridiagonal solves, natural cubic splines,
two-step spline surfaces and bound-constrained least squares."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from numpy.typing import NDArray
from scipy import sparse
from scipy.optimize import lsq_linear
from scipy.sparse.linalg import spsolve

__all__ = [
    "SingularMatrixError",
    "TridiagonalMatrix",
    "solve_tridiagonal",
    "thomas",
    "SplineCurve",
    "fit_natural_spline",
    "SplineSurface",
    "fit_bicubic_surface",
    "solve_bound_constrained_ls",
    "projected_gradient_norm",
]

_PIVOT_RTOL = 1e-14
_DENSE_LIMIT = 4000  # unknowns


class SingularMatrixError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TridiagonalMatrix:
    lower: NDArray[np.float64]  # sub-diagonal, length n-1
    diag: NDArray[np.float64]
    upper: NDArray[np.float64]  # super-diagonal, length n-1

    def __post_init__(self) -> None:
        n = len(self.diag)
        if len(self.lower) != n - 1 or len(self.upper) != n - 1:
            raise ValueError("band lengths must be n-1, n, n-1")

    @property
    def n(self) -> int:
        return len(self.diag)

    def matvec(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        y = np.asarray(self.diag) * x
        y[1:] += np.asarray(self.lower) * x[:-1]
        y[:-1] += np.asarray(self.upper) * x[1:]
        return y

    def to_dense(self) -> NDArray[np.float64]:
        return np.diag(self.diag) + np.diag(self.lower, -1) + np.diag(self.upper, 1)


@njit(cache=True)
def _thomas(lower, diag, upper, rhs, tol):
    # lower/upper padded to length n: lower[0] and upper[n-1] are ignored
    n = diag.shape[0]
    cp = np.empty(n)
    x = np.empty(n)
    piv = diag[0]
    if abs(piv) <= tol:
        return x, False
    cp[0] = upper[0] / piv if n > 1 else 0.0
    x[0] = rhs[0] / piv
    for i in range(1, n):
        piv = diag[i] - lower[i] * cp[i - 1]
        if abs(piv) <= tol:
            return x, False
        if i < n - 1:
            cp[i] = upper[i] / piv
        x[i] = (rhs[i] - lower[i] * x[i - 1]) / piv
    for i in range(n - 2, -1, -1):
        x[i] -= cp[i] * x[i + 1]
    return x, True


def thomas(lower: NDArray, diag: NDArray, upper: NDArray, rhs: NDArray) -> NDArray:
    """Thomas elimination on padded bands (``lower[0]`` and ``upper[-1]`` unused)."""
    scale = max(np.max(np.abs(diag)), np.max(np.abs(lower[1:]), initial=0.0), np.max(np.abs(upper[:-1]), initial=0.0))
    x, ok = _thomas(lower, diag, upper, rhs, _PIVOT_RTOL * scale)
    if not ok:
        raise SingularMatrixError("zero pivot in tridiagonal elimination")
    return x


def solve_tridiagonal(m: TridiagonalMatrix, rhs: NDArray[np.float64]) -> NDArray[np.float64]:
    n = m.n
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (n,):
        raise ValueError("rhs length does not match matrix dimension")
    lower = np.zeros(n)
    upper = np.zeros(n)
    lower[1:] = m.lower
    upper[:-1] = m.upper
    return thomas(lower, np.ascontiguousarray(m.diag, dtype=float), upper, rhs)


@dataclass(frozen=True)
class SplineCurve:
    """Natural cubic spline; linear beyond the end knots."""

    knots: NDArray[np.float64]
    values: NDArray[np.float64]
    second: NDArray[np.float64]  # second derivatives at the knots

    def __call__(self, x) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float)
        k, y, m = self.knots, self.values, self.second
        i = np.clip(np.searchsorted(k, x, side="right") - 1, 0, len(k) - 2)
        h = k[i + 1] - k[i]
        a = (k[i + 1] - x) / h
        b = (x - k[i]) / h
        out = a * y[i] + b * y[i + 1] + ((a**3 - a) * m[i] + (b**3 - b) * m[i + 1]) * h * h / 6.0
        lo = x < k[0]
        hi = x > k[-1]
        if np.any(lo):
            out = np.where(lo, y[0] + self.end_slopes[0] * (x - k[0]), out)
        if np.any(hi):
            out = np.where(hi, y[-1] + self.end_slopes[1] * (x - k[-1]), out)
        return out

    @property
    def end_slopes(self) -> tuple[float, float]:
        k, y, m = self.knots, self.values, self.second
        h0 = k[1] - k[0]
        h1 = k[-1] - k[-2]
        left = (y[1] - y[0]) / h0 - h0 * (2 * m[0] + m[1]) / 6.0
        right = (y[-1] - y[-2]) / h1 + h1 * (m[-2] + 2 * m[-1]) / 6.0
        return float(left), float(right)

    def derivative(self, x, order: int = 1) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float)
        k, y, m = self.knots, self.values, self.second
        i = np.clip(np.searchsorted(k, x, side="right") - 1, 0, len(k) - 2)
        h = k[i + 1] - k[i]
        a = (k[i + 1] - x) / h
        b = (x - k[i]) / h
        inside = (x >= k[0]) & (x <= k[-1])
        if order == 1:
            d = (y[i + 1] - y[i]) / h + ((1 - 3 * a**2) * m[i] + (3 * b**2 - 1) * m[i + 1]) * h / 6.0
            d = np.where(x < k[0], self.end_slopes[0], d)
            return np.where(x > k[-1], self.end_slopes[1], d)
        if order == 2:
            return np.where(inside, a * m[i] + b * m[i + 1], 0.0)
        raise ValueError("order must be 1 or 2")


def _natural_second_derivs(xs: NDArray, ys: NDArray) -> NDArray:
    """Second derivatives of the natural spline; ``ys`` may carry trailing batch axes."""
    n = len(xs)
    m = np.zeros_like(ys, dtype=float)
    if n < 3:
        return m
    h = np.diff(xs)
    slope = np.diff(ys, axis=0) / h.reshape((-1,) + (1,) * (ys.ndim - 1))
    rhs = 6.0 * (slope[1:] - slope[:-1])
    diag = 2.0 * (h[:-1] + h[1:])
    lower = np.concatenate(([0.0], h[1:-1]))
    upper = np.concatenate((h[1:-1], [0.0]))
    if ys.ndim == 1:
        m[1:-1] = thomas(lower, diag, upper, rhs)
    else:
        flat = rhs.reshape(n - 2, -1)
        out = np.empty_like(flat)
        for c in range(flat.shape[1]):
            out[:, c] = thomas(lower, diag, upper, np.ascontiguousarray(flat[:, c]))
        m[1:-1] = out.reshape(rhs.shape)
    return m


def fit_natural_spline(xs, ys) -> SplineCurve:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.ndim != 1 or xs.size < 2 or ys.shape != xs.shape:
        raise ValueError("need at least two knots with matching values")
    if not np.all(np.diff(xs) > 0):
        raise ValueError("spline knots must be strictly increasing (duplicate knots?)")
    return SplineCurve(xs, ys, _natural_second_derivs(xs, ys))


@dataclass(frozen=True)
class SplineSurface:
    """Two-step spline surface: natural splines in strike per maturity, then in maturity."""

    strikes: NDArray[np.float64]
    maturities: NDArray[np.float64]
    values: NDArray[np.float64]  # shape (len(maturities), len(strikes))

    def __call__(self, K, T) -> NDArray[np.float64]:
        K = np.atleast_1d(np.asarray(K, dtype=float))
        T = np.atleast_1d(np.asarray(T, dtype=float))
        return self.evaluate_grid(K, T)

    def evaluate_grid(self, K: NDArray, T: NDArray) -> NDArray[np.float64]:
        """Values on the tensor grid, shape (len(T), len(K))."""
        K = np.asarray(K, dtype=float)
        T = np.asarray(T, dtype=float)
        # first stage: strike direction, one spline per quoted maturity
        stage1 = np.stack([fit_natural_spline(self.strikes, row)(K) for row in self.values])
        # second stage: maturity direction through the stage-one evaluations
        m = _natural_second_derivs(self.maturities, stage1)
        out = np.empty((T.size, K.size))
        for c in range(K.size):
            out[:, c] = SplineCurve(self.maturities, stage1[:, c], m[:, c])(T)
        return out


def fit_bicubic_surface(Ks, Ts, grid) -> SplineSurface:
    Ks = np.asarray(Ks, dtype=float)
    Ts = np.asarray(Ts, dtype=float)
    try:
        grid = np.asarray(grid, dtype=float)
    except ValueError as exc:
        raise ValueError("ragged value grid") from exc
    if grid.shape != (Ts.size, Ks.size):
        raise ValueError(f"value grid must have shape {(Ts.size, Ks.size)}, got {grid.shape}")
    for name, k in (("strike", Ks), ("maturity", Ts)):
        if k.size < 2 or not np.all(np.diff(k) > 0):
            raise ValueError(f"{name} knots must be strictly increasing")
    return SplineSurface(Ks, Ts, grid)


def projected_gradient_norm(design, target, x, lo, hi) -> float:
    g = design.T @ (design @ x - target)
    pg = x - np.clip(x - g, lo, hi)
    return float(np.max(np.abs(pg))) if pg.size else 0.0


def _active_set_sparse(design, target, lo, hi, max_iter: int = 2000):
    """Primal-dual active-set iterations on the sparse normal equations.

    Bounds become active where x + mu / diag(N) leaves [lo, hi], mu being
    the negative gradient. Returns None when the sets fail to settle within
    ``max_iter``; the caller then falls back to the dense active-set method.
    """
    N = (design.T @ design).tocsr()
    rhs = design.T @ target
    n = rhs.size
    d = N.diagonal()
    if np.any(d <= 0):
        return None
    x = np.clip(np.zeros(n), lo, hi)
    mu = np.zeros(n)
    prev = None
    for _ in range(max_iter):
        trial = x + mu / d
        at_lo = trial < lo
        at_hi = trial > hi
        key = (at_lo.tobytes(), at_hi.tobytes())
        if key == prev:
            return x
        prev = key
        free = ~(at_lo | at_hi)
        x = np.where(at_lo, lo, np.where(at_hi, hi, 0.0))
        if free.any():
            Nf = N[free][:, free].tocsc()
            b = rhs[free] - N[free] @ x
            x[free] = spsolve(Nf, b) if Nf.shape[0] > 1 else b / Nf.toarray().ravel()
        if not np.all(np.isfinite(x)):
            return None
        mu = rhs - N @ x
        mu[free] = 0.0
    return None


def solve_bound_constrained_ls(design, target, lo, hi, start=None, *, max_iter: int = 10_000, tol: float = 1e-8):
    """Minimise ||design @ x - target||^2 subject to lo <= x <= hi.

    Sparse problems first try primal active-set iterations on the normal
    equations; otherwise (and for dense input) a bounded-variable active-set
    method is used, with a trust-region reflective method for very large
    sparse systems. Stationarity is measured by the infinity
    norm of the projected gradient, relative to max(1, ||design^T target||).
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise ValueError("infeasible bounds: lo > hi")
    target = np.asarray(target, dtype=float)
    is_sparse = sparse.issparse(design)
    if is_sparse:
        x = _active_set_sparse(design.tocsr(), target, lo, hi)
        if x is not None:
            x = np.clip(x, lo, hi)
            scale = max(1.0, float(np.max(np.abs(design.T @ target), initial=0.0)))
            if projected_gradient_norm(design, target, x, lo, hi) <= tol * scale:
                return x
    if is_sparse and design.shape[1] <= _DENSE_LIMIT:
        # moderate sizes: the active-set method on the dense matrix is far more reliable
        design, is_sparse = design.toarray(), False
    if not is_sparse:
        design = np.atleast_2d(np.asarray(design, dtype=float))
    if start is not None:
        start = np.asarray(start, dtype=float)
        if np.any(start < lo) or np.any(start > hi):
            raise ValueError("start point is not feasible")
    fixed = lo == hi
    scale = max(1.0, float(np.max(np.abs(design.T @ target), initial=0.0)))
    if is_sparse:
        res = lsq_linear(design, target, bounds=(lo, np.where(fixed, lo + 1e-300, hi)), method="trf",
                         tol=1e-12, lsmr_tol="auto", max_iter=max_iter)
    else:
        res = lsq_linear(design, target, bounds=(lo, np.where(fixed, np.nextafter(lo, np.inf), hi)),
                         method="bvls", tol=1e-14, max_iter=max_iter)
    x = np.clip(res.x, lo, hi)
    pg = projected_gradient_norm(design, target, x, lo, hi)
    if not np.isfinite(pg) or (not is_sparse and pg > tol * scale):
        raise ArithmeticError(f"bound-constrained least squares did not converge (projected gradient {pg:.3e})")
    return x
