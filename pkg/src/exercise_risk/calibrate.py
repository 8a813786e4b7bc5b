"""Calibration of the misspecified one-factor models to European quotes.

Black-Scholes takes the implied vol of one reference quote. The Dupire
surface is fitted on the same (t, x = log K) mesh as the backward solver.
Target call prices on that mesh come from implied vols: a natural spline in
strike through each quoted maturity, inverted to implied vol inside the
strike band, extended linearly in log-strike beyond it, and interpolated in
maturity as total implied variance (zero at t = 0). These targets are pushed
through the discretised forward (Fokker-Planck) equation

    C_{j+1} - C_j = dt [(1 - lam) M_j C_{j+1} + lam M_j C_j],
    M_j C = 0.5 v_j (C_xx - C_x) - r C_x,

whose residual is linear in the frozen variance v_j. Each time step is a
bound-constrained least-squares problem in v_j over the solved price range,
with second-difference rows in x as regularisation. Outside that range the
variance comes from a two-step spline through the solved rows, clamped to
the bounds.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .heston import (
    HestonParams,
    OptionSpec,
    QuoteSurface,
    heston_european_put,
    bs_price,
    implied_vol,
    implied_vol_batch,
)
from .linalg import fit_bicubic_surface, solve_bound_constrained_ls
from .pde1d import VOL_MAX, VOL_MIN, LocalVolFn, Solver1DConfig, interpolate_value, price_european_call_1d

__all__ = [
    "CalibrationError",
    "DupireConfig",
    "LocalVolSurface",
    "CalibrationReport",
    "calibrate_black_scholes",
    "calibrate_dupire",
    "recalibrate_bs_on_path",
    "reprice_quotes",
]

VAR_MIN, VAR_MAX = VOL_MIN**2, VOL_MAX**2
IV_FLOOR, IV_CAP = 0.05, 3.0  # clamp for extrapolated implied vols


class CalibrationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class DupireConfig:
    x_lo: float = math.log(2.0)
    x_hi: float = math.log(20.0)
    smooth_x: float = 1.0  # weight of second-difference rows, relative to the largest data row
    smooth_t: float = 0.0  # optional pull towards the previous step's solution
    edge_trim: int = 3  # quoted strike intervals at each end read only through their knot implied vols
    wing: str = "linear"  # implied vol beyond the trimmed band: "linear" in log-strike or "flat"
    reprice: bool = True


@dataclass
class LocalVolSurface:
    t: NDArray[np.float64]  # time nodes t_j, j = 0..n1
    x: NDArray[np.float64]  # log-price nodes x_i, i = 0..n2
    variance: NDArray[np.float64]  # shape (len(t), len(x))
    mask: NDArray[np.bool_]  # optimisation region
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.variance.shape != (self.t.size, self.x.size) or self.mask.shape != self.variance.shape:
            raise ValueError("variance and mask must have shape (len(t), len(x))")
        if np.any(self.variance < VAR_MIN * (1 - 1e-12)) or np.any(self.variance > VAR_MAX * (1 + 1e-12)):
            raise ValueError("local variance outside [1e-4, 36]")

    @property
    def sigma(self) -> NDArray[np.float64]:
        return np.sqrt(self.variance)

    def vol_fn(self) -> LocalVolFn:
        return LocalVolFn(t_nodes=self.t, x_nodes=self.x, variance=self.variance, label="dupire")

    def __call__(self, t: float, S) -> NDArray:
        return self.vol_fn()(t, S)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "S", "sigma"])
            sig = self.sigma
            S = np.exp(self.x)
            for j, tj in enumerate(self.t):
                for i, s in enumerate(S):
                    w.writerow([repr(float(tj)), repr(float(s)), repr(float(sig[j, i]))])


@dataclass
class CalibrationReport:
    strikes: NDArray[np.float64]
    maturities: NDArray[np.float64]
    quoted: NDArray[np.float64]
    model: NDArray[np.float64]

    @property
    def rel_errors(self) -> NDArray[np.float64]:
        return np.abs(self.model - self.quoted) / np.abs(self.quoted)

    @property
    def mean_rel_error(self) -> float:
        return float(np.mean(self.rel_errors))

    def to_dict(self) -> dict:
        return {
            "mean_relative_abs_error": self.mean_rel_error,
            "quotes": [
                {"strike": float(k), "maturity": float(t), "quoted": float(q), "model": float(m), "rel_abs_error": float(e)}
                for k, t, q, m, e in zip(self.strikes, self.maturities, self.quoted, self.model, self.rel_errors)
            ],
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def calibrate_black_scholes(quotes: QuoteSurface, ref_strike: float = 10.0, ref_maturity: float = 1.0,
                            r: float | None = None, s0: float | None = None) -> float:
    """Implied vol of the reference call quote."""
    price = quotes.lookup(ref_strike, ref_maturity)  # KeyError when absent
    r = quotes.meta.get("r") if r is None else r
    s0 = quotes.meta.get("s0") if s0 is None else s0
    if r is None or s0 is None:
        raise ValueError("rate and spot must be given or stored in the quote metadata")
    return implied_vol(price, r, s0, OptionSpec(ref_strike, ref_maturity, "call"))


def recalibrate_bs_on_path(t: float, S: float, v: float, p: HestonParams, K: float, T: float) -> float:
    """Black-Scholes vol matching the Heston European put at the path state (t, S, v).

    Raises ImpliedVolError when the price is outside the invertible range; the
    caller is expected to keep its previous vol in that case.
    """
    if not t < T:
        raise ValueError("recalibration needs remaining maturity")
    spec = OptionSpec(K, T, "put")
    price = heston_european_put(p, spec, at=(t, S, v))
    return implied_vol(price, p.r, S, OptionSpec(K, T - t, "put"))


def _diff_matrices(x: NDArray) -> tuple[NDArray, NDArray]:
    """Central first/second-difference weights on a uniform mesh, rows for interior nodes."""
    dx = x[1] - x[0]
    d1 = np.array([-0.5, 0.0, 0.5]) / dx
    d2 = np.array([1.0, -2.0, 1.0]) / dx**2
    return d1, d2


def _apply3(w: NDArray, u: NDArray) -> NDArray:
    return w[0] * u[:-2] + w[1] * u[1:-1] + w[2] * u[2:]


def _step_ls(c_now: NDArray, c_next: NDArray, x: NDArray, dt: float, r: float, lam: float,
             cols: NDArray, informed: NDArray, smooth: float, prev: NDArray | None, smooth_t: float,
             wing: str = "flat") -> NDArray:
    """Variance on the columns ``cols`` (interior indices) for one forward step.

    Data rows enter only where ``informed`` is set (strikes inside the quoted
    range); there the regulariser is a second difference, elsewhere a first
    difference, so the variance is carried flat into uninformed wings.
    """
    d1, d2 = _diff_matrices(x)
    mix_c = (1 - lam) * c_next + lam * c_now
    g = 0.5 * dt * (_apply3(d2, mix_c) - _apply3(d1, mix_c))  # coefficient of v_i, interior nodes
    h = (c_next - c_now)[1:-1] + r * dt * _apply3(d1, mix_c)
    k = cols - 1
    g, h = g[k], h[k]
    n = cols.size
    rows = np.flatnonzero(informed)
    scale = float(np.max(np.abs(g[rows]), initial=0.0))
    if not scale > 0:
        raise CalibrationError("forward system carries no information about the local variance")
    w = smooth * scale
    data = sparse.csr_matrix((g[rows], (np.arange(rows.size), rows)), shape=(rows.size, n))
    # second differences centred on informed nodes, first differences between uninformed neighbours
    inner = np.flatnonzero(informed[1:-1] if wing == "flat" else np.ones(n - 2, dtype=bool)) + 1
    lap = sparse.csr_matrix(
        (np.tile([1.0, -2.0, 1.0], inner.size), (np.repeat(np.arange(inner.size), 3), (inner[:, None] + [-1, 0, 1]).ravel())),
        shape=(inner.size, n),
    )
    outer = np.flatnonzero(~(informed[:-1] & informed[1:])) if wing == "flat" else np.empty(0, dtype=np.int64)
    grad = sparse.csr_matrix(
        (np.tile([-1.0, 1.0], outer.size), (np.repeat(np.arange(outer.size), 2), (outer[:, None] + [0, 1]).ravel())),
        shape=(outer.size, n),
    )
    blocks = [data, w * lap, w * grad]
    rhs = [h[rows], np.zeros(inner.size), np.zeros(outer.size)]
    if prev is not None and smooth_t > 0:
        blocks.append(smooth_t * scale * sparse.identity(n))
        rhs.append(smooth_t * scale * prev)
    A = sparse.vstack(blocks).tocsc()
    b = np.concatenate(rhs)
    # unconstrained banded solve first; bounds rarely bind
    N = (A.T @ A).tocsc()
    sol = spsolve(N, A.T @ b)
    if np.all(np.isfinite(sol)) and sol.min() >= VAR_MIN and sol.max() <= VAR_MAX:
        return sol
    return solve_bound_constrained_ls(A, b, np.full(n, VAR_MIN), np.full(n, VAR_MAX))


def reprice_quotes(surface: LocalVolSurface, quotes: QuoteSurface, cfg: Solver1DConfig, r: float, s0: float) -> CalibrationReport:
    vol = surface.vol_fn()
    x = cfg.x_grid().nodes
    model = np.empty(len(quotes))
    for q, (K, T) in enumerate(zip(quotes.strikes, quotes.maturities)):
        U = price_european_call_1d(vol, cfg, float(K), float(T), r)
        model[q] = interpolate_value(U[0], x, s0)
    return CalibrationReport(quotes.strikes.copy(), quotes.maturities.copy(), quotes.prices.copy(), model)


def _implied_vol_rows(price_surface, Ks: NDArray, Ts: NDArray, S: NDArray, trim: int, wing: str, r: float, s0: float) -> NDArray:
    """Implied vols on the price nodes ``S`` at each quoted maturity, shape (len(Ts), len(S)).

    Inside the trimmed strike band the strike spline is inverted; beyond it
    the implied vol continues from the band's edge knot, flat or linearly in
    log-strike with the slope between the edge knot and its inner neighbour.
    """
    k_lo, k_hi = Ks[trim], Ks[-1 - trim]
    band = (S >= k_lo * (1 - 1e-12)) & (S <= k_hi * (1 + 1e-12))
    x = np.log(S)
    prices = price_surface.evaluate_grid(S, Ts)
    out = np.empty((Ts.size, S.size))
    for m, T in enumerate(Ts):
        unit = OptionSpec(1.0, float(T))
        iv = np.full(S.size, np.nan)
        iv[band] = implied_vol_batch(prices[m, band] / S[band], r, s0 / S[band], unit)
        knots = np.array([Ks[trim], Ks[trim + 1], Ks[-2 - trim], Ks[-1 - trim]])
        kiv = implied_vol_batch(price_surface.values[m, [trim, trim + 1, -2 - trim, -1 - trim]] / knots, r, s0 / knots, unit)
        if not (np.all(np.isfinite(iv[band])) and np.all(np.isfinite(kiv))):
            raise CalibrationError(f"quotes at maturity {T} are outside the invertible range")
        xk = np.log(knots)
        lo_slope = (kiv[1] - kiv[0]) / (xk[1] - xk[0]) if wing == "linear" else 0.0
        hi_slope = (kiv[3] - kiv[2]) / (xk[3] - xk[2]) if wing == "linear" else 0.0
        below, above = S < k_lo * (1 - 1e-12), S > k_hi * (1 + 1e-12)
        iv[below] = kiv[0] + lo_slope * (x[below] - xk[0])
        iv[above] = kiv[3] + hi_slope * (x[above] - xk[3])
        out[m] = np.clip(iv, IV_FLOOR, IV_CAP)
    return out


def _call_targets(iv_rows: NDArray, Ts: NDArray, S: NDArray, t_rows: NDArray, r: float, s0: float) -> NDArray:
    """Call prices on (t_rows, S) with implied total variance linear in t, from zero at t = 0."""
    w = iv_rows**2 * Ts[:, None]
    tk = np.r_[0.0, Ts]
    wk = np.vstack([np.zeros(S.size), w])
    out = np.empty((t_rows.size, S.size))
    for n, tn in enumerate(t_rows):
        if tn <= 0:
            out[n] = np.maximum(s0 - S, 0.0)
            continue
        m = int(np.clip(np.searchsorted(tk, tn) - 1, 0, tk.size - 2))
        a = min((tn - tk[m]) / (tk[m + 1] - tk[m]), 1.0) if tn <= tk[-1] else (tn - tk[-2]) / (tk[-1] - tk[-2])
        wt = np.maximum((1 - a) * wk[m] + a * wk[m + 1], 0.0)
        out[n] = S * bs_price(np.sqrt(wt / tn), r, s0 / S, OptionSpec(1.0, float(tn)))
    return out


def calibrate_dupire(quotes: QuoteSurface, cfg: Solver1DConfig = Solver1DConfig(), dcfg: DupireConfig = DupireConfig(),
                     r: float | None = None, s0: float | None = None) -> tuple[LocalVolSurface, CalibrationReport | None]:
    """Local variance on the solver mesh plus, optionally, the repricing report.

    Target call prices come from the strike splines through the quotes,
    read as implied vols, extended beyond the trimmed strike band, and
    interpolated in maturity through implied total variance. Every forward
    step is solved for the local variance on the price band of the
    optimisation region; the resulting rows are then extended over the whole
    mesh with the two-step spline and clamped to the bounds.
    """
    r = quotes.meta.get("r") if r is None else r
    s0 = quotes.meta.get("s0") if s0 is None else s0
    if r is None or s0 is None:
        raise ValueError("rate and spot must be given or stored in the quote metadata")
    if dcfg.wing not in ("flat", "linear"):
        raise ValueError("wing must be 'flat' or 'linear'")
    if cfg.lambda1 >= 1.0:
        raise ValueError("the forward calibration needs lambda1 < 1")
    Ks, Ts, grid = quotes.lattice()
    if Ts.size < 2:
        raise ValueError("Dupire calibration needs at least two maturities")
    if Ks.size < 2 * dcfg.edge_trim + 2:
        raise ValueError("too few strikes for the requested edge trim")
    try:
        price_surface = fit_bicubic_surface(Ks, Ts, grid)
    except ValueError as exc:
        raise CalibrationError(f"spline fit failed: {exc}") from exc

    t = cfg.t_grid(float(Ts[-1])).nodes
    x = cfg.x_grid().nodes
    S = np.exp(x)
    dt = t[1] - t[0]
    in_x = (x >= dcfg.x_lo - 1e-12) & (x <= dcfg.x_hi + 1e-12)
    in_x[0] = in_x[-1] = False
    cols = np.flatnonzero(in_x)
    steps = np.flatnonzero(t[:-1] > Ts[0] + 1e-12)
    if steps.size < 2 or cols.size < 4:
        raise CalibrationError("optimisation region is too small")

    iv_rows = _implied_vol_rows(price_surface, Ks, Ts, S, dcfg.edge_trim, dcfg.wing, r, s0)
    C = _call_targets(iv_rows, Ts, S, t, r, s0)
    informed = np.ones(cols.size, dtype=bool)
    solved = np.empty((t.size - 1, cols.size))
    prev = None
    for j in range(1, t.size - 1):
        prev = _step_ls(C[j], C[j + 1], x, dt, r, cfg.lambda1, cols, informed, dcfg.smooth_x, prev, dcfg.smooth_t)
        solved[j] = prev
    # the step leaving the payoff kink carries no usable curvature away from the money
    solved[0] = solved[1]

    # two-step spline through the solved rows, evaluated on the whole mesh, then clamped
    ext = fit_bicubic_surface(x[cols], t[:-1], solved).evaluate_grid(x, t)
    variance = np.clip(ext, VAR_MIN, VAR_MAX)
    variance[:-1, cols] = solved
    mask = np.zeros_like(variance, dtype=bool)
    mask[np.ix_(steps, cols)] = True
    meta = {"lambda1": cfg.lambda1, "smooth_x": dcfg.smooth_x, "edge_trim": dcfg.edge_trim, "wing": dcfg.wing}
    surface = LocalVolSurface(t, x, variance, mask, meta=meta)
    report = reprice_quotes(surface, quotes, cfg, r, s0) if dcfg.reprice else None
    return surface, report
