"""One-dimensional log-price finite differences for Black-Scholes and Dupire.

Backward stepping of

    ((1 + r dt) I - (1 - lam) M_j) U_j = (I + lam M_j) U_{j+1} + B_j

on a uniform (t, x = log S) mesh, where M_j is the tridiagonal generator with
the local variance frozen at t_j and the discount term kept explicit on U_j.
``lam = 0`` is fully implicit; ``lam = 0.5`` is the Crank-Nicolson-like
default. American puts are projected onto the payoff after every solve
(Brennan-Schwartz).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit
from numpy.typing import NDArray
from scipy.interpolate import CubicSpline

from .linalg import SingularMatrixError
from .numgrid import Grid1D, build_uniform_grid

__all__ = [
    "VOL_MIN",
    "VOL_MAX",
    "BASE_X0",
    "LocalVolFn",
    "Solver1DConfig",
    "ExerciseBoundary1D",
    "price_american_put_1d",
    "price_european_call_1d",
    "extract_boundary_1d",
    "EXERCISE_RTOL",
    "interpolate_value",
]

VOL_MIN, VOL_MAX = 0.01, 6.0
# x0 = (1001 log 10 - 500 log 80) / 501 puts log(10) exactly on node 500 of the default mesh
BASE_X0 = (1001 * math.log(10.0) - 500 * math.log(80.0)) / 501
EXERCISE_RTOL = 1e-9


@dataclass(frozen=True)
class Solver1DConfig:
    n1: int = 300
    n2: int = 1001
    x0: float = BASE_X0
    x_max: float = math.log(80.0)
    lambda1: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ValueError("lambda1 must lie in [0, 1]")
        if self.n1 < 1 or self.n2 < 2:
            raise ValueError("need n1 >= 1 and n2 >= 2")
        if not self.x0 < self.x_max:
            raise ValueError("x0 must be below x_max")

    def x_grid(self) -> Grid1D:
        return build_uniform_grid(self.x0, self.x_max, self.n2)

    def t_grid(self, T: float) -> Grid1D:
        return build_uniform_grid(0.0, T, self.n1)


class LocalVolFn:
    """Volatility sigma(t, S) for the one-dimensional models.

    Either a constant (Black-Scholes) or a variance table on a (t, x) mesh
    (Dupire), linearly interpolated in t and x between nodes and held flat
    beyond the table.
    """

    def __init__(
        self,
        sigma: float | None = None,
        *,
        t_nodes: NDArray | None = None,
        x_nodes: NDArray | None = None,
        variance: NDArray | None = None,
        label: str = "",
    ):
        if sigma is not None:
            if not VOL_MIN <= sigma <= VOL_MAX:
                raise ValueError(f"volatility {sigma} outside [{VOL_MIN}, {VOL_MAX}]")
            self.sigma = float(sigma)
            self.label = label or f"bs({sigma:g})"
            self.t_nodes = self.x_nodes = self.variance = None
        else:
            if t_nodes is None or x_nodes is None or variance is None:
                raise ValueError("need a constant sigma or a full (t, x, variance) table")
            self.sigma = None
            self.t_nodes = np.asarray(t_nodes, dtype=float)
            self.x_nodes = np.asarray(x_nodes, dtype=float)
            self.variance = np.asarray(variance, dtype=float)
            if self.variance.shape != (self.t_nodes.size, self.x_nodes.size):
                raise ValueError("variance table shape must be (len(t_nodes), len(x_nodes))")
            if np.any(self.variance < VOL_MIN**2 * (1 - 1e-12)) or np.any(self.variance > VOL_MAX**2 * (1 + 1e-12)):
                raise ValueError("local variance outside the allowed bounds")
            self.label = label or "dupire"

    @property
    def is_constant(self) -> bool:
        return self.sigma is not None

    def variance_on(self, t: float, x: NDArray) -> NDArray:
        if self.sigma is not None:
            return np.full(np.shape(x), self.sigma**2)
        tn = self.t_nodes
        if t <= tn[0]:
            row = self.variance[0]
        elif t >= tn[-1]:
            row = self.variance[-1]
        else:
            j = int(np.searchsorted(tn, t, side="right") - 1)
            w = (t - tn[j]) / (tn[j + 1] - tn[j])
            row = (1 - w) * self.variance[j] + w * self.variance[j + 1]
        if np.array_equal(x, self.x_nodes):
            return row.copy()
        return np.interp(x, self.x_nodes, row)

    def __call__(self, t: float, S) -> NDArray:
        return np.sqrt(self.variance_on(t, np.log(np.asarray(S, dtype=float))))


@dataclass(frozen=True)
class ExerciseBoundary1D:
    t: NDArray[np.float64]
    boundary: NDArray[np.float64]
    strike: float
    label: str = ""

    def at_step(self, j: int) -> float:
        return float(self.boundary[j])

    def __call__(self, t) -> NDArray:
        """Piecewise-constant lookup: the value at the last node not after ``t``."""
        idx = np.clip(np.searchsorted(self.t, np.asarray(t) + 1e-12, side="right") - 1, 0, self.t.size - 1)
        return self.boundary[idx]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "boundary_price"])
            for t, b in zip(self.t, self.boundary):
                w.writerow([repr(float(t)), repr(float(b))])


@njit(cache=True)
def _backward_sweep(x, dt, r, lam, var_table, u_T, lower_bc, upper_bc, payoff, american, tol):
    """Run the full backward recursion; returns the (n1+1, n2+1) value grid and a success flag."""
    n1 = var_table.shape[0] - 1
    n = x.shape[0]
    dx = x[1] - x[0]
    alpha = dt / (dx * dx)
    U = np.empty((n1 + 1, n))
    U[n1, :] = u_T
    m = n - 2
    a = np.empty(m)
    b = np.empty(m)
    c = np.empty(m)
    rhs = np.empty(m)
    cp = np.empty(m)
    for j in range(n1 - 1, -1, -1):
        nxt = U[j + 1]
        for k in range(m):
            i = k + 1
            v = var_table[j, i]
            w = r - 0.5 * v
            lo = 0.5 * alpha * (v - dx * w)
            ce = -alpha * v
            up = 0.5 * alpha * (v + dx * w)
            a[k] = -(1.0 - lam) * lo
            b[k] = 1.0 + r * dt - (1.0 - lam) * ce
            c[k] = -(1.0 - lam) * up
            # neighbours at t_{j+1} include the boundary nodes, which covers the lam part of B_j
            rhs[k] = nxt[i] + lam * (lo * nxt[i - 1] + ce * nxt[i] + up * nxt[i + 1])
            if k == 0:
                rhs[k] += (1.0 - lam) * lo * lower_bc[j]
            if k == m - 1:
                rhs[k] += (1.0 - lam) * up * upper_bc[j]
        # Thomas elimination
        piv = b[0]
        if abs(piv) <= tol:
            return U, False
        cp[0] = c[0] / piv
        rhs[0] = rhs[0] / piv
        for k in range(1, m):
            piv = b[k] - a[k] * cp[k - 1]
            if abs(piv) <= tol:
                return U, False
            cp[k] = c[k] / piv
            rhs[k] = (rhs[k] - a[k] * rhs[k - 1]) / piv
        for k in range(m - 2, -1, -1):
            rhs[k] -= cp[k] * rhs[k + 1]
        U[j, 0] = lower_bc[j]
        U[j, n - 1] = upper_bc[j]
        for k in range(m):
            val = rhs[k]
            if american and val < payoff[k + 1]:
                val = payoff[k + 1]
            U[j, k + 1] = val
    return U, True


def _variance_table(vol: LocalVolFn, t_nodes: NDArray, x: NDArray) -> NDArray:
    if vol.is_constant:
        return np.full((t_nodes.size, x.size), vol.sigma**2)
    table = np.stack([vol.variance_on(t, x) for t in t_nodes])
    if np.any(table < VOL_MIN**2 * (1 - 1e-12)) or np.any(table > VOL_MAX**2 * (1 + 1e-12)):
        raise ValueError("local volatility outside [0.01, 6] on the solver mesh")
    return table


def _solve(vol, cfg, T, r, u_T, lower_bc, upper_bc, payoff, american):
    if T <= 0:
        raise ValueError("maturity must be positive")
    x = cfg.x_grid().nodes
    t = cfg.t_grid(T).nodes
    var = _variance_table(vol, t, x)
    dt = T / cfg.n1
    tol = 1e-14 * (1.0 + 2.0 * dt * float(var.max()) / (x[1] - x[0]) ** 2)
    U, ok = _backward_sweep(x, dt, r, cfg.lambda1, var, u_T, lower_bc, upper_bc, payoff, american, tol)
    if not ok:
        raise SingularMatrixError("zero pivot in the one-dimensional step matrix")
    return t, x, U


def price_american_put_1d(
    vol: LocalVolFn, cfg: Solver1DConfig, K: float, T: float, r: float
) -> tuple[NDArray, ExerciseBoundary1D]:
    """American put by Brennan-Schwartz; returns the value grid over (t_j, x_i) and the boundary."""
    x = cfg.x_grid().nodes
    if not (math.exp(x[0]) < K < math.exp(x[-1])):
        raise ValueError("strike must lie inside the price range of the mesh")
    payoff = np.maximum(K - np.exp(x), 0.0)
    n1 = cfg.n1
    lower = np.full(n1 + 1, K - math.exp(x[0]))
    upper = np.zeros(n1 + 1)
    t, x, U = _solve(vol, cfg, T, r, payoff, lower, upper, payoff, True)
    b = extract_boundary_1d(U, payoff, x, K=K, t=t)
    return U, ExerciseBoundary1D(t, b.boundary, K, label=vol.label)


def price_european_call_1d(vol: LocalVolFn, cfg: Solver1DConfig, K: float, T: float, r: float) -> NDArray:
    """European call value grid over (t_j, x_i).

    The upper boundary is S - K e^{-r(T-t)}; the lower boundary is
    max(S - K e^{-r(T-t)}, 0), which is zero whenever the mesh starts below
    the discounted strike.
    """
    x = cfg.x_grid().nodes
    t = cfg.t_grid(T).nodes
    df = np.exp(-r * (T - t))
    u_T = np.maximum(np.exp(x) - K, 0.0)
    lower = np.maximum(math.exp(x[0]) - K * df, 0.0)
    upper = math.exp(x[-1]) - K * df
    _, _, U = _solve(vol, cfg, T, r, u_T, lower, upper, u_T, False)
    return U


def extract_boundary_1d(values: NDArray, payoff: NDArray, x: NDArray, K: float | None = None, t: NDArray | None = None) -> ExerciseBoundary1D:
    """Largest interior price node per time step where the value sits on the payoff.

    Only nodes with positive payoff count; steps without exercise give 0.
    """
    values = np.atleast_2d(values)
    K = K if K is not None else float(np.max(payoff + np.exp(x)))
    eps = EXERCISE_RTOL * K
    S = np.exp(x)
    inner = np.zeros(S.size, dtype=bool)
    inner[1:-1] = True
    ex = (values <= payoff + eps) & (payoff > 0) & inner
    out = np.zeros(values.shape[0])
    any_ex = ex.any(axis=1)
    last = S.size - 1 - np.argmax(ex[:, ::-1], axis=1)
    out[any_ex] = S[last[any_ex]]
    if t is None:
        t = np.arange(values.shape[0], dtype=float)
    return ExerciseBoundary1D(np.asarray(t, dtype=float), out, float(K))


def interpolate_value(values_row: NDArray, x: NDArray, S: float) -> float:
    """Cubic interpolation of one time slice at price S."""
    xs = math.log(S)
    i = int(np.clip(np.searchsorted(x, xs) - 2, 0, x.size - 4))
    cs = CubicSpline(x[i : i + 4], values_row[i : i + 4])
    return float(cs(xs))
