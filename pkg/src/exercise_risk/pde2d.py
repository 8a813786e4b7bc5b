"""Heston American put by Modified Craig-Sneyd ADI with early-exercise projection.

Unknowns are the interior points (s_i, v_j), 1 <= i <= m1-1, 0 <= j <= m2-1,
ordered S-major within each variance level. The semi-discrete system
V' = (A0 + A1 + A2) V + b is stepped in time to maturity; A0 holds the mixed
derivative, A1 the S-direction terms and A2 the v-direction terms, with the
discount term split equally between A1 and A2.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy import sparse
from scipy.interpolate import RectBivariateSpline
from scipy.sparse.linalg import splu

from .heston import HestonParams
from .linalg import SplineCurve, _natural_second_derivs
from .numgrid import Grid1D, build_sinh_stock_grid, build_sinh_variance_grid, first_coeffs_all, second_coeffs_all
from .pde1d import EXERCISE_RTOL

__all__ = [
    "HestonGridConfig",
    "MCSConfig",
    "SplitOperator",
    "ExerciseBoundary2D",
    "HestonSolution",
    "assemble_heston_operator",
    "mcs_time_step",
    "price_american_put_heston",
    "boundary_eval_2d",
    "REFINED_V",
]

REFINED_V = np.round(np.arange(201) * 0.01, 10)


@dataclass(frozen=True)
class HestonGridConfig:
    m1: int = 500
    m2: int = 110
    s_max_factor: float = 8.0  # s_max = factor * S(0)
    v_max: float = 4.5
    c_factor: float = 0.2  # c = c_factor * K
    d_divisor: float = 80.0  # d = v_max / d_divisor

    def grids(self, K: float, s0: float) -> tuple[Grid1D, Grid1D]:
        gs = build_sinh_stock_grid(K, self.s_max_factor * s0, self.c_factor * K, self.m1)
        gv = build_sinh_variance_grid(self.v_max, self.v_max / self.d_divisor, self.m2)
        return gs, gv


@dataclass(frozen=True)
class MCSConfig:
    lambda2: float = 0.4
    m3: int = 300

    def __post_init__(self) -> None:
        if not 0.0 < self.lambda2 <= 1.0:
            raise ValueError("lambda2 must lie in (0, 1]")
        if self.m3 < 1:
            raise ValueError("m3 must be >= 1")


@dataclass
class SplitOperator:
    A0: sparse.csr_matrix
    A1: sparse.csr_matrix
    A2: sparse.csr_matrix
    b0: NDArray[np.float64]
    b1: NDArray[np.float64]
    b2: NDArray[np.float64]
    grid_s: Grid1D
    grid_v: Grid1D
    _lu_cache: dict = field(default_factory=dict, repr=False)

    @property
    def m(self) -> int:
        return self.A1.shape[0]

    @property
    def A(self) -> sparse.csr_matrix:
        return (self.A0 + self.A1 + self.A2).tocsr()

    @property
    def b(self) -> NDArray[np.float64]:
        return self.b0 + self.b1 + self.b2

    def s_hat(self) -> NDArray[np.float64]:
        """Interior S nodes repeated for every variance level (the unknowns' S coordinate)."""
        return np.tile(self.grid_s.nodes[1:-1], self.grid_v.m)

    def factorize(self, lam_dt: float):
        key = float(lam_dt)
        if key not in self._lu_cache:
            eye = sparse.identity(self.m, format="csc")
            self._lu_cache[key] = (
                splu((eye - lam_dt * self.A1).tocsc()),
                splu((eye - lam_dt * self.A2).tocsc()),
            )
        return self._lu_cache[key]


def _v_scheme(v: float, j: int) -> str:
    if j == 0:
        return "upward"
    return "downward" if v > 1.0 else "central"


def assemble_heston_operator(grid_s: Grid1D, grid_v: Grid1D, p: HestonParams, K: float) -> SplitOperator:
    """Build A0, A1, A2 and boundary vectors for V(S=0)=K, V(s_max)=0, V(v_max)=K.

    At the corner (s_max, v_max) the S = s_max value wins.
    """
    s, v = grid_s.nodes, grid_v.nodes
    m1, m2 = grid_s.m, grid_v.m
    if v[-1] <= 1.0:
        raise ValueError("v_max must exceed 1")
    ns = m1 - 1
    m = ns * m2

    def bval(i: int, j: int) -> float:
        if i == m1:
            return 0.0
        if i == 0 or j == m2:
            return K
        raise AssertionError("not a boundary node")

    def idx(i, j):
        return j * ns + (i - 1)

    rows: dict[str, list] = {"0": [], "1": [], "2": []}
    bvec = {"0": np.zeros(m), "1": np.zeros(m), "2": np.zeros(m)}

    def add(which: str, row: int, i: int, j: int, w: float) -> None:
        if w == 0.0:
            return
        if 1 <= i <= m1 - 1 and 0 <= j <= m2 - 1:
            rows[which].append((row, idx(i, j), w))
        else:
            bvec[which][row] += w * bval(i, j)

    i_all = np.arange(1, m1)
    beta_s = first_coeffs_all(grid_s, i_all, "central")
    delta_s = second_coeffs_all(grid_s, i_all, "central")
    r, kap, th, sv, rho = p.r, p.kappa, p.theta, p.sigma_v, p.rho

    for j in range(m2):
        vj = v[j]
        scheme = _v_scheme(vj, j)
        wv1 = first_coeffs_all(grid_v, np.array([j]), scheme)[0]
        offs_v1 = {"upward": (0, 1, 2), "central": (-1, 0, 1), "downward": (-2, -1, 0)}[scheme]
        if j > 0:
            wv2 = second_coeffs_all(grid_v, np.array([j]), "central")[0]
            bv = first_coeffs_all(grid_v, np.array([j]), "central")[0]
        for a, i in enumerate(i_all):
            row = idx(i, j)
            si = s[i]
            # S direction: 0.5 v s^2 V_ss + r s V_s - r/2 V
            for k, off in enumerate((-1, 0, 1)):
                w = 0.5 * vj * si * si * delta_s[a, k] + r * si * beta_s[a, k]
                if off == 0:
                    w -= 0.5 * r
                add("1", row, i + off, j, w)
            # v direction: 0.5 sv^2 v V_vv + kappa (theta - v) V_v - r/2 V
            drift = kap * (th - vj)
            diag_done = False
            for k, off in enumerate(offs_v1):
                w = drift * wv1[k]
                if off == 0:
                    w -= 0.5 * r
                    diag_done = True
                add("2", row, i, j + off, w)
            if not diag_done:
                add("2", row, i, j, -0.5 * r)
            if j > 0:
                for k, off in enumerate((-1, 0, 1)):
                    add("2", row, i, j + off, 0.5 * sv * sv * vj * wv2[k])
                # mixed: rho sv v s V_sv, central x central
                coef = rho * sv * vj * si
                for ks, offs in enumerate((-1, 0, 1)):
                    for kv, offv in enumerate((-1, 0, 1)):
                        add("0", row, i + offs, j + offv, coef * beta_s[a, ks] * bv[kv])

    mats = {}
    for key, entries in rows.items():
        if entries:
            rr, cc, ww = zip(*entries)
            mats[key] = sparse.csr_matrix((ww, (rr, cc)), shape=(m, m))
        else:
            mats[key] = sparse.csr_matrix((m, m))
        mats[key].sum_duplicates()
    return SplitOperator(mats["0"], mats["1"], mats["2"], bvec["0"], bvec["1"], bvec["2"], grid_s, grid_v)


def mcs_time_step(
    state: NDArray,
    op: SplitOperator,
    cfg: MCSConfig,
    dt: float,
    b_prev: tuple[NDArray, NDArray, NDArray] | None = None,
    b_next: tuple[NDArray, NDArray, NDArray] | None = None,
) -> NDArray:
    """One Modified Craig-Sneyd step from V^{n-1} to V^n (no projection).

    ``b_prev``/``b_next`` are the split boundary vectors at the two time
    levels; by default both equal the operator's constant vectors, so the
    boundary-increment terms drop out.
    """
    lam = cfg.lambda2
    V = state
    bp = b_prev if b_prev is not None else (op.b0, op.b1, op.b2)
    bn = b_next if b_next is not None else bp
    db0, db1, db2 = (bn[0] - bp[0], bn[1] - bp[1], bn[2] - bp[2])
    lu1, lu2 = op.factorize(lam * dt)
    A0V = op.A0 @ V
    A1V = op.A1 @ V
    A2V = op.A2 @ V
    Y0 = V + dt * (A0V + A1V + A2V + bp[0] + bp[1] + bp[2])
    Y1 = lu1.solve(Y0 + lam * dt * (db1 - A1V))
    Y2 = lu2.solve(Y1 + lam * dt * (db2 - A2V))
    dY = Y2 - V
    A0d = op.A0 @ dY
    Yh0 = Y0 + lam * dt * (A0d + db0)
    Yt0 = Yh0 + (0.5 - lam) * dt * (A0d + op.A1 @ dY + op.A2 @ dY + db0 + db1 + db2)
    Yt1 = lu1.solve(Yt0 + lam * dt * (db1 - A1V))
    Yt2 = lu2.solve(Yt1 + lam * dt * (db2 - A2V))
    return Yt2


@dataclass
class ExerciseBoundary2D:
    """Exercise boundary B(t_n, v_j) with a natural spline in v per time node."""

    t: NDArray[np.float64]  # calendar time nodes, increasing
    v: NDArray[np.float64]  # variance knots
    boundary: NDArray[np.float64]  # shape (len(t), len(v))
    strike: float
    v_cap: float = 2.0
    _second: NDArray[np.float64] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.boundary = np.asarray(self.boundary, dtype=float)
        self._second = _natural_second_derivs(self.v, self.boundary.T).T

    def spline(self, n: int) -> SplineCurve:
        return SplineCurve(self.v, self.boundary[n], self._second[n])

    def eval_steps(self, steps: NDArray, v: NDArray) -> NDArray:
        """Boundary at time nodes ``steps`` and variances ``v`` (vectorised)."""
        steps = np.asarray(steps)
        vq = np.clip(np.asarray(v, dtype=float), 0.0, self.v_cap)
        k = self.v
        i = np.clip(np.searchsorted(k, vq, side="right") - 1, 0, k.size - 2)
        h = k[i + 1] - k[i]
        a = (k[i + 1] - vq) / h
        b = 1.0 - a
        y, m2 = self.boundary, self._second
        out = (
            a * y[steps, i]
            + b * y[steps, i + 1]
            + ((a**3 - a) * m2[steps, i] + (b**3 - b) * m2[steps, i + 1]) * h * h / 6.0
        )
        return np.clip(out, 0.0, self.strike)

    def step_index(self, t) -> NDArray:
        return np.clip(np.searchsorted(self.t, np.asarray(t) + 1e-12, side="right") - 1, 0, self.t.size - 1)

    def refined(self, v_grid: NDArray = REFINED_V) -> NDArray:
        """Boundary on the refined variance grid, shape (len(t), len(v_grid))."""
        steps = np.repeat(np.arange(self.t.size), v_grid.size)
        vv = np.tile(v_grid, self.t.size)
        return self.eval_steps(steps, vv).reshape(self.t.size, v_grid.size)

    def to_csv(self, path: str | Path) -> None:
        """Long format: raw grid rows then refined spline rows."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["grid", "t", "v", "boundary_price"])
            for n, t in enumerate(self.t):
                for j, vj in enumerate(self.v):
                    w.writerow(["raw", repr(float(t)), repr(float(vj)), repr(float(self.boundary[n, j]))])
            ref = self.refined()
            for n, t in enumerate(self.t):
                for j, vj in enumerate(REFINED_V):
                    w.writerow(["spline", repr(float(t)), repr(float(vj)), repr(float(ref[n, j]))])


def boundary_eval_2d(b: ExerciseBoundary2D, t: float, v: float) -> float:
    n = int(b.step_index(t))
    return float(b.eval_steps(np.array([n]), np.array([v]))[0])


@dataclass
class HestonSolution:
    grid_s: Grid1D
    grid_v: Grid1D
    values: NDArray[np.float64]  # full grid at t = 0, shape (m1+1, m2+1)
    boundary: ExerciseBoundary2D | None

    def value_at(self, S: float, v: float) -> float:
        spl = RectBivariateSpline(self.grid_s.nodes, self.grid_v.nodes, self.values, kx=3, ky=3)
        return float(spl(S, v)[0, 0])


def _full_grid(V: NDArray, op: SplitOperator, K: float) -> NDArray:
    m1, m2 = op.grid_s.m, op.grid_v.m
    full = np.empty((m1 + 1, m2 + 1))
    full[1:m1, :m2] = V.reshape(m2, m1 - 1).T
    full[0, :] = K
    full[:, m2] = K
    full[m1, :] = 0.0
    return full


def price_american_put_heston(
    p: HestonParams,
    K: float,
    T: float,
    grid_cfg: HestonGridConfig = HestonGridConfig(),
    cfg: MCSConfig = MCSConfig(),
    american: bool = True,
    op: SplitOperator | None = None,
) -> HestonSolution:
    """Heston put by MCS stepping in time to maturity.

    With ``american=False`` the projection is skipped (European put, used as a
    test hook) and no boundary is produced.
    """
    if op is None:
        gs, gv = grid_cfg.grids(K, p.s0)
        op = assemble_heston_operator(gs, gv, p, K)
    gs, gv = op.grid_s, op.grid_v
    dt = T / cfg.m3
    s_hat = op.s_hat()
    payoff = np.maximum(K - s_hat, 0.0)
    V = payoff.copy()
    m1, m2 = gs.m, gv.m
    ns = m1 - 1
    eps = EXERCISE_RTOL * K
    s_in = gs.nodes[1:-1]
    itm = (K - s_in) > 0
    # boundary[n] is for time-to-maturity n * dt
    bnd = np.zeros((cfg.m3 + 1, m2))

    def extract(Vn: NDArray) -> NDArray:
        grid = Vn.reshape(m2, ns)
        ex = (grid <= payoff[:ns] + eps) & itm
        out = np.zeros(m2)
        has = ex.any(axis=1)
        last = ns - 1 - np.argmax(ex[:, ::-1], axis=1)
        out[has] = s_in[last[has]]
        return out

    bnd[0] = extract(V)
    for n in range(1, cfg.m3 + 1):
        V = mcs_time_step(V, op, cfg, dt)
        if american:
            V = np.maximum(V, payoff)
            bnd[n] = extract(V)
    boundary = None
    if american:
        t_nodes = T - dt * np.arange(cfg.m3, -1, -1)
        t_nodes[0] = 0.0
        boundary = ExerciseBoundary2D(t_nodes, gv.nodes[:m2], bnd[::-1].copy(), K)
    return HestonSolution(gs, gv, _full_grid(V, op, K), boundary)
