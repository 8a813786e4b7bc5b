"""Monte Carlo under the benchmark Heston dynamics and evaluation of exercise rules.

Paths are produced in fixed-size blocks; block b draws from its own
substream ``SeedSequence(seed).spawn(...)[b]``, so a path's numbers depend
only on (seed, block size, path index) and never on how many workers run
or in which order blocks finish.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import isotonic_regression

from .heston import HestonParams, OptionSpec, heston_put_batch, implied_vol_batch
from .pde1d import ExerciseBoundary1D, LocalVolFn, Solver1DConfig, price_american_put_1d
from .pde2d import ExerciseBoundary2D

__all__ = [
    "BLOCK_SIZE",
    "PathSet",
    "PayoffSampleSet",
    "simulate_heston",
    "iter_heston_blocks",
    "apply_rule_1d",
    "apply_rule_2d",
    "apply_rule_recalibrated",
    "recalibration_steps",
    "BoundaryCache",
    "LSEstimator",
    "ls_exercise_rule",
    "GridMismatchError",
]

BLOCK_SIZE = 10_000
GENERATOR_ID = "numpy-philox/seedsequence-spawn"


class GridMismatchError(ValueError):
    pass


@dataclass
class PathSet:
    S: NDArray[np.float64]  # (n_paths, n_steps + 1)
    v: NDArray[np.float64]
    dt: float
    seed: int
    params: HestonParams
    block_size: int = BLOCK_SIZE
    first_path: int = 0  # global index of row 0 (nonzero for streamed blocks)
    generator: str = GENERATOR_ID

    @property
    def n_paths(self) -> int:
        return self.S.shape[0]

    @property
    def n_steps(self) -> int:
        return self.S.shape[1] - 1

    @property
    def t(self) -> NDArray[np.float64]:
        return self.dt * np.arange(self.n_steps + 1)

    def save(self, path: str | Path) -> None:
        """Raw little-endian float64 S then v (row-major), plus a JSON sidecar."""
        path = Path(path)
        with open(path, "wb") as fh:
            self.S.astype("<f8").tofile(fh)
            self.v.astype("<f8").tofile(fh)
        meta = {
            "n_paths": self.n_paths,
            "n_steps": self.n_steps,
            "dt": self.dt,
            "seed": self.seed,
            "block_size": self.block_size,
            "first_path": self.first_path,
            "generator": self.generator,
            "params": self.params.to_dict(),
            "layout": "S then v, each (n_paths, n_steps+1) row-major little-endian float64",
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> PathSet:
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        shape = (meta["n_paths"], meta["n_steps"] + 1)
        raw = np.fromfile(path, dtype="<f8")
        if raw.size != 2 * shape[0] * shape[1]:
            raise ValueError("path file size does not match its sidecar")
        S = raw[: raw.size // 2].reshape(shape)
        v = raw[raw.size // 2:].reshape(shape)
        return cls(S, v, meta["dt"], meta["seed"], HestonParams(**meta["params"]), meta["block_size"],
                   meta["first_path"], meta["generator"])


def _simulate_block(p: HestonParams, n: int, n_steps: int, dt: float, ss: np.random.SeedSequence):
    rng = np.random.Generator(np.random.Philox(ss))
    S = np.empty((n, n_steps + 1))
    v = np.empty((n, n_steps + 1))
    lnS = np.full(n, math.log(p.s0))
    vt = np.full(n, p.v0)
    S[:, 0] = p.s0
    v[:, 0] = p.v0
    rho_c = math.sqrt(1.0 - p.rho * p.rho)
    sq_dt = math.sqrt(dt)
    mil = 0.25 * p.sigma_v**2
    for k in range(1, n_steps + 1):
        z = rng.standard_normal((2, n))
        dw1 = sq_dt * z[0]
        dwv = p.rho * dw1 + rho_c * sq_dt * z[1]
        vp = np.maximum(vt, 0.0)
        sv = np.sqrt(vp)
        lnS += (p.r - 0.5 * vp) * dt + sv * dw1
        vt = vt + p.kappa * (p.theta - vp) * dt + p.sigma_v * sv * dwv + mil * (dwv * dwv - dt)
        np.maximum(vt, 0.0, out=vt)
        S[:, k] = np.exp(lnS)
        v[:, k] = vt
    return S, v


def _block_layout(n_paths: int, block_size: int) -> list[tuple[int, int]]:
    return [(b, min(block_size, n_paths - b * block_size)) for b in range(-(-n_paths // block_size))]


def iter_heston_blocks(p: HestonParams, n_paths: int, n_steps: int, seed: int, T: float = 1.0,
                       block_size: int = BLOCK_SIZE, workers: int = 1) -> Iterator[PathSet]:
    """Yield PathSet blocks in order; identical for any ``workers``."""
    if n_steps < 1 or n_paths < 1:
        raise ValueError("need n_steps >= 1 and n_paths >= 1")
    dt = T / n_steps
    layout = _block_layout(n_paths, block_size)
    children = np.random.SeedSequence(seed).spawn(len(layout))

    def run(item):
        b, n = item
        return b, _simulate_block(p, n, n_steps, dt, children[b])

    if workers <= 1:
        for item in layout:
            b, (S, v) = run(item)
            yield PathSet(S, v, dt, seed, p, block_size, b * block_size)
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            # bounded look-ahead keeps memory flat
            for start in range(0, len(layout), workers):
                for b, (S, v) in ex.map(run, layout[start: start + workers]):
                    yield PathSet(S, v, dt, seed, p, block_size, b * block_size)


def simulate_heston(p: HestonParams, n_paths: int, n_steps: int, seed: int, T: float = 1.0,
                    block_size: int = BLOCK_SIZE, workers: int = 1) -> PathSet:
    """Milstein/full-truncation Heston paths held in memory (use the block iterator for large runs)."""
    blocks = list(iter_heston_blocks(p, n_paths, n_steps, seed, T, block_size, workers))
    return PathSet(np.vstack([b.S for b in blocks]), np.vstack([b.v for b in blocks]), T / n_steps, seed, p, block_size)


@dataclass
class PayoffSampleSet:
    stop_step: NDArray[np.int64]  # -1 when the rule never triggers
    tau: NDArray[np.float64]
    payoff: NDArray[np.float64]  # discounted
    rule: str = ""
    first_path: int = 0

    def __len__(self) -> int:
        return self.payoff.size

    @property
    def exercised(self) -> NDArray[np.bool_]:
        return self.stop_step >= 0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "stop_step", "tau", "payoff"])
            for i, (n, tau, pay) in enumerate(zip(self.stop_step, self.tau, self.payoff)):
                w.writerow([self.first_path + i, int(n), repr(float(tau)), repr(float(pay))])

    @classmethod
    def concat(cls, parts: Sequence[PayoffSampleSet]) -> PayoffSampleSet:
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([q.stop_step for q in parts]),
            np.concatenate([q.tau for q in parts]),
            np.concatenate([q.payoff for q in parts]),
            parts[0].rule,
            parts[0].first_path,
        )


def _check_grid(paths: PathSet, t_nodes: NDArray) -> None:
    if t_nodes.size != paths.n_steps + 1 or not np.allclose(t_nodes, paths.t, rtol=0, atol=1e-9):
        raise GridMismatchError("boundary time grid differs from the path time grid")


def _stop(paths: PathSet, hit: NDArray[np.bool_], K: float, r: float, rule: str) -> PayoffSampleSet:
    """First hit per path; unexercised paths are settled at T on their intrinsic value."""
    n_steps = paths.n_steps
    any_hit = hit.any(axis=1)
    step = np.where(any_hit, np.argmax(hit, axis=1), -1)
    settle = np.where(any_hit, step, n_steps)
    S_tau = paths.S[np.arange(paths.n_paths), settle]
    tau = settle * paths.dt
    payoff = np.exp(-r * tau) * np.maximum(K - S_tau, 0.0)
    return PayoffSampleSet(step.astype(np.int64), tau, payoff, rule, paths.first_path)


def apply_rule_1d(paths: PathSet, b: ExerciseBoundary1D, K: float, r: float, rule: str = "") -> PayoffSampleSet:
    _check_grid(paths, b.t)
    hit = paths.S <= b.boundary[None, :]
    return _stop(paths, hit, K, r, rule or b.label or "1d")


def apply_rule_2d(paths: PathSet, b: ExerciseBoundary2D, K: float, r: float, rule: str = "heston") -> PayoffSampleSet:
    _check_grid(paths, b.t)
    n = paths.n_paths
    hit = np.empty(paths.S.shape, dtype=bool)
    for k in range(paths.n_steps + 1):
        hit[:, k] = paths.S[:, k] <= b.eval_steps(np.full(n, k), paths.v[:, k])
    return _stop(paths, hit, K, r, rule)


def recalibration_steps(T: float, n_steps: int, every: float = 7.0 / 365.0) -> NDArray[np.int64]:
    """Grid steps of the dates k * every, k >= 1, strictly before T (t = 0 is the initial calibration)."""
    if every <= 0:
        raise ValueError("recalibration interval must be positive")
    dt = T / n_steps
    k = np.arange(1, int(math.floor(T / every)) + 1)
    dates = k * every
    dates = dates[dates < T - 1e-12]
    steps = np.rint(dates / dt).astype(np.int64)
    steps = steps[steps < n_steps]
    return np.unique(steps)


@dataclass
class BoundaryCache:
    """Black-Scholes exercise boundaries keyed by a quantised volatility.

    The boundary of a constant-vol model depends on calendar time only
    through time to maturity, so one solve to maturity T on the path grid
    serves every recalibration date: from step n onwards the rule reads the
    same rows it would get from a fresh solve started at t_n.
    """

    K: float
    T: float
    r: float
    cfg: Solver1DConfig = Solver1DConfig()
    quantum: float | None = 1e-3
    table: dict = field(default_factory=dict)
    solves: int = 0

    def key(self, sigma: float) -> float:
        if self.quantum is None:
            return float(sigma)
        return round(round(sigma / self.quantum) * self.quantum, 12)

    def get(self, sigma: float) -> NDArray[np.float64]:
        k = self.key(sigma)
        if k not in self.table:
            _, b = price_american_put_1d(LocalVolFn(k), self.cfg, self.K, self.T, self.r)
            self.table[k] = b.boundary
            self.solves += 1
        return self.table[k]


def apply_rule_recalibrated(
    paths: PathSet,
    p: HestonParams,
    K: float,
    T: float,
    sigma0: float,
    recal_steps: NDArray[np.int64],
    cache: BoundaryCache,
    rule: str = "bs-recal",
    return_sigmas: bool = False,
):
    """Black-Scholes rule refitted to the Heston European put at each recalibration date.

    Between two dates a path follows the boundary of its latest vol. When the
    put price cannot be inverted (deep in the money close to expiry) the
    path keeps its previous vol.
    """
    if np.any(recal_steps <= 0) or np.any(recal_steps >= paths.n_steps):
        raise ValueError("recalibration steps must lie strictly inside the path grid")
    if cache.cfg.n1 != paths.n_steps or abs(cache.T - paths.dt * paths.n_steps) > 1e-12:
        raise GridMismatchError("boundary solver grid differs from the path time grid")
    n = paths.n_paths
    sigma = np.full(n, float(sigma0))
    sig_hist = np.empty((recal_steps.size, n)) if return_sigmas else None
    fallbacks = 0
    alive = np.ones(n, dtype=bool)
    stop = np.full(n, -1, dtype=np.int64)
    dates = set(int(s) for s in recal_steps)
    date_idx = {int(s): i for i, s in enumerate(recal_steps)}
    keys = np.array([cache.key(sigma0)] * n)
    for k in range(paths.n_steps + 1):
        if k in dates:
            idx = np.flatnonzero(alive)
            tau = T - k * paths.dt
            if idx.size:
                S_k, v_k = paths.S[idx, k], paths.v[idx, k]
                price = heston_put_batch(p, K, tau, S_k, v_k)
                iv = implied_vol_batch(price, p.r, S_k, OptionSpec(K, tau, "put"))
                ok = np.isfinite(iv)
                fallbacks += int((~ok).sum())
                sigma[idx[ok]] = iv[ok]
                keys[idx] = [cache.key(s) for s in sigma[idx]]
            if return_sigmas:
                sig_hist[date_idx[k]] = np.where(alive, sigma, np.nan)
        idx = np.flatnonzero(alive)
        if not idx.size:
            if return_sigmas:
                continue
            break
        bvals = np.empty(idx.size)
        uk, inv = np.unique(keys[idx], return_inverse=True)
        for u, kk in enumerate(uk):
            bvals[inv == u] = cache.get(kk)[k]
        hit = paths.S[idx, k] <= bvals
        stop[idx[hit]] = k
        alive[idx[hit]] = False
    settle = np.where(stop >= 0, stop, paths.n_steps)
    S_tau = paths.S[np.arange(n), settle]
    tau_out = settle * paths.dt
    payoff = np.exp(-p.r * tau_out) * np.maximum(K - S_tau, 0.0)
    out = PayoffSampleSet(stop, tau_out, payoff, rule, paths.first_path)
    out_meta = {"fallbacks": fallbacks, "boundary_solves": cache.solves}
    if return_sigmas:
        return out, out_meta, sig_hist
    return out, out_meta


# --- Longstaff-Schwartz ---------------------------------------------------------

POLY_BASIS = "poly8"
HESTON_BASIS = "heston6"


def _design(basis: str, S: NDArray, v: NDArray | None, K: float) -> NDArray:
    x = S / K  # scaled to keep high powers well conditioned
    if basis == POLY_BASIS:
        return np.column_stack([np.ones_like(x)] + [x**k for k in range(1, 9)])
    if basis == HESTON_BASIS:
        if v is None:
            raise ValueError("the Heston basis needs variance paths")
        return np.column_stack([np.ones_like(x), x, x * x, x**3, v, x * v, x * x * v])
    raise ValueError(f"unknown basis {basis!r}")


@dataclass
class LSEstimator:
    basis: str
    t: NDArray[np.float64]
    coef: NDArray[np.float64]  # (n_steps + 1, n_basis), nan where the step was skipped
    start_mean: float
    start_sd: float
    itm_only: bool
    skipped: list[int] = field(default_factory=list)
    price: float = float("nan")  # in-sample mean discounted cash flow at t = 0
    price_se: float = float("nan")

    def continuation(self, n: int, S: NDArray, K: float, v: NDArray | None = None) -> NDArray:
        return _design(self.basis, np.asarray(S, float), None if v is None else np.asarray(v, float), K) @ self.coef[n]

    def boundary(self, K: float, v_levels: NDArray | None = None, s_grid: NDArray | None = None,
                 monotone: bool = True) -> NDArray:
        """Largest price below K where exercising beats the fitted continuation.

        Shape (n_steps + 1,) for the polynomial basis, (n_steps + 1, len(v_levels))
        for the Heston basis. Steps without a fit (t = 0, skipped steps) carry
        the nearest earlier fitted value, t = 0 the first one; at maturity the
        boundary is the largest grid price below K. With ``monotone`` the
        per-step roots are replaced by their isotonic (nondecreasing in t)
        fit, which removes most of the root noise near the smooth-pasting point.
        """
        s_grid = np.linspace(0.01 * K, K, 991) if s_grid is None else np.asarray(s_grid, float)
        levels = [None] if self.basis == POLY_BASIS else list(np.asarray(v_levels, float))
        N = self.t.size - 1
        fitted = ~np.isnan(self.coef).any(axis=1)
        if not fitted.any():
            raise ValueError("no regression step was fitted")
        out = np.full((N + 1, len(levels)), np.nan)
        for n in np.flatnonzero(fitted):
            for j, lv in enumerate(levels):
                vv = None if lv is None else np.full(s_grid.size, lv)
                ex = ((K - s_grid) >= self.continuation(n, s_grid, K, vv)) & (s_grid < K)
                out[n, j] = s_grid[np.flatnonzero(ex)[-1]] if ex.any() else 0.0
        first = int(np.argmax(fitted))
        out[:first] = out[first]
        for n in range(first + 1, N):
            if not fitted[n]:
                out[n] = out[n - 1]
        out[N] = s_grid[s_grid < K].max()
        if monotone:
            for j in range(len(levels)):
                out[first:N, j] = isotonic_regression(out[first:N, j]).x
            out[:first] = out[first]
        return out[:, 0] if self.basis == POLY_BASIS else out


def _start_prices(rng: np.random.Generator, n: int, mean: float, sd: float) -> NDArray:
    # normal start truncated at zero: redraw the (rare) nonpositive values
    s = rng.normal(mean, sd, n)
    bad = s <= 0
    while bad.any():
        s[bad] = rng.normal(mean, sd, int(bad.sum()))
        bad = s <= 0
    return s


def _model_paths(model, n: int, n_steps: int, T: float, r: float, rng: np.random.Generator, s0: NDArray):
    dt = T / n_steps
    S = np.empty((n, n_steps + 1))
    S[:, 0] = s0
    if isinstance(model, HestonParams):
        p = model
        v = np.empty((n, n_steps + 1))
        v[:, 0] = p.v0
        rho_c = math.sqrt(1 - p.rho**2)
        lnS = np.log(s0)
        vt = np.full(n, p.v0)
        for k in range(1, n_steps + 1):
            z = rng.standard_normal((2, n))
            dw1 = math.sqrt(dt) * z[0]
            dwv = p.rho * dw1 + rho_c * math.sqrt(dt) * z[1]
            vp = np.maximum(vt, 0.0)
            lnS = lnS + (p.r - 0.5 * vp) * dt + np.sqrt(vp) * dw1
            vt = np.maximum(vt + p.kappa * (p.theta - vp) * dt + p.sigma_v * np.sqrt(vp) * dwv
                            + 0.25 * p.sigma_v**2 * (dwv * dwv - dt), 0.0)
            S[:, k] = np.exp(lnS)
            v[:, k] = vt
        return S, v
    vol: LocalVolFn = model if isinstance(model, LocalVolFn) else LocalVolFn(float(model))
    lnS = np.log(s0)
    for k in range(1, n_steps + 1):
        var = vol.variance_on((k - 1) * dt, lnS)
        lnS = lnS + (r - 0.5 * var) * dt + np.sqrt(var * dt) * rng.standard_normal(n)
        S[:, k] = np.exp(lnS)
    return S, None


def ls_exercise_rule(
    model,
    n_paths: int,
    seed: int,
    K: float = 10.0,
    T: float = 1.0,
    r: float = 0.1,
    n_steps: int = 300,
    basis: str | None = None,
    itm_only: bool = True,
    start: tuple[float, float] = (10.0, 2.5),
) -> LSEstimator:
    """Longstaff-Schwartz regression with a randomised starting price.

    ``model`` is a HestonParams, a LocalVolFn or a constant volatility.
    """
    is_heston = isinstance(model, HestonParams)
    basis = basis or (HESTON_BASIS if is_heston else POLY_BASIS)
    if basis == HESTON_BASIS and not is_heston:
        raise ValueError("the Heston basis needs a Heston model")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    s0 = _start_prices(rng, n_paths, *start)
    S, v = _model_paths(model, n_paths, n_steps, T, r, rng, s0)
    dt = T / n_steps
    disc = math.exp(-r * dt)
    n_basis = 9 if basis == POLY_BASIS else 7
    coef = np.full((n_steps + 1, n_basis), np.nan)
    skipped: list[int] = []
    cash = np.maximum(K - S[:, -1], 0.0)
    for n in range(n_steps - 1, 0, -1):
        cash *= disc
        Sn = S[:, n]
        intr = np.maximum(K - Sn, 0.0)
        sel = intr > 0 if itm_only else np.ones(n_paths, dtype=bool)
        X = _design(basis, Sn[sel], None if v is None else v[sel, n], K)
        if X.shape[0] <= n_basis:
            skipped.append(n)
            continue
        c, _, rank, _ = np.linalg.lstsq(X, cash[sel], rcond=None)
        if rank < n_basis:
            skipped.append(n)
            continue
        coef[n] = c
        cont = X @ c
        ex = intr[sel] > cont
        idx = np.flatnonzero(sel)[ex]
        cash[idx] = intr[idx]
    cash *= disc
    cash = np.maximum(cash, np.maximum(K - S[:, 0], 0.0))
    t = dt * np.arange(n_steps + 1)
    return LSEstimator(basis, t, coef, start[0], start[1], itm_only, sorted(skipped),
                       float(cash.mean()), float(cash.std(ddof=1) / math.sqrt(n_paths)))
