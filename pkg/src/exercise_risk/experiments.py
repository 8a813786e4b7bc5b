"""Experiment drivers: base case, correlation sweep and weekly Black-Scholes recalibration.

Every driver writes into its output directory:

* ``config.json`` with the validated configuration and its hash,
* boundary / calibration / payoff CSVs,
* ``summary.json`` with the summary statistics (and the hash again).

All rules of one experiment see the same Heston paths, so mean differences
are paired.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .calibrate import DupireConfig, calibrate_black_scholes, calibrate_dupire
from .heston import BASE_CASE, HestonParams, OptionSpec, generate_quote_surface, heston_put_batch, implied_vol_batch
from .mc import (
    BLOCK_SIZE,
    BoundaryCache,
    PayoffSampleSet,
    apply_rule_1d,
    apply_rule_2d,
    apply_rule_recalibrated,
    iter_heston_blocks,
    recalibration_steps,
)
from .pde1d import LocalVolFn, Solver1DConfig, price_american_put_1d
from .pde2d import REFINED_V, HestonGridConfig, MCSConfig, price_american_put_heston

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "SummaryStats",
    "summarize",
    "qq_pairs",
    "ExperimentConfig",
    "ResultBundle",
    "run_base_case",
    "run_correlation_sweep",
    "run_recalibration",
    "QUARTILE_METHOD",
]

QUARTILE_METHOD = "linear"  # type-7 interpolation of order statistics
RULES = ("heston", "bs", "dupire")
IV_DENSITY_TIMES = (0.02, 0.347, 0.813)
SCATTER_N = 10_000


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SummaryStats:
    n: int
    median: float
    mean: float
    se: float
    q3: float
    max: float

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(x) -> SummaryStats:
    x = np.asarray(getattr(x, "payoff", x), dtype=float)
    if x.size == 0:
        raise ValueError("cannot summarize an empty sample")
    med, q3 = np.percentile(x, [50, 75], method=QUARTILE_METHOD)
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return SummaryStats(int(x.size), float(med), float(x.mean()), se, float(q3), float(x.max()))


def qq_pairs(a, b, n_quantiles: int = 99) -> list[tuple[float, float]]:
    """Empirical quantiles of both samples at the levels k / (n_quantiles + 1)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("qq_pairs needs two nonempty samples")
    lv = np.arange(1, n_quantiles + 1) / (n_quantiles + 1)
    qa = np.quantile(a, lv, method=QUARTILE_METHOD)
    qb = np.quantile(b, lv, method=QUARTILE_METHOD)
    return list(zip(qa.tolist(), qb.tolist()))


# --- configuration ---------------------------------------------------------------

_NESTED = {
    "params": HestonParams,
    "solver1d": Solver1DConfig,
    "grid2d": HestonGridConfig,
    "mcs": MCSConfig,
    "dupire": DupireConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    params: HestonParams = BASE_CASE
    strike: float = 10.0
    maturity: float = 1.0
    solver1d: Solver1DConfig = Solver1DConfig()
    grid2d: HestonGridConfig = HestonGridConfig()
    mcs: MCSConfig = MCSConfig()
    dupire: DupireConfig = DupireConfig()
    n_paths: int = 100_000
    seed: int = 20240501
    rhos: tuple = (-0.5, 0.0, 0.5)
    recal_every: float = 7.0 / 365.0
    sigma_quantum: float = 1e-3
    block_size: int = BLOCK_SIZE
    workers: int = 1
    out_dir: str = "results"

    def __post_init__(self):
        errs = []
        if self.n_paths < 1:
            errs.append("n_paths must be positive")
        if self.strike <= 0 or self.maturity <= 0:
            errs.append("strike and maturity must be positive")
        if self.block_size < 1 or self.workers < 1:
            errs.append("block_size and workers must be positive")
        if self.recal_every <= 0 or self.recal_every >= self.maturity:
            errs.append("recal_every must lie in (0, maturity)")
        if self.sigma_quantum < 0:
            errs.append("sigma_quantum must be nonnegative (0 disables quantisation)")
        if not self.rhos or any(not -1 < r < 1 for r in self.rhos):
            errs.append("rhos must be a nonempty list inside (-1, 1)")
        if errs:
            raise ConfigError("; ".join(errs))

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            val = getattr(self, f.name)
            d[f.name] = asdict(val) if f.name in _NESTED else (list(val) if isinstance(val, tuple) else val)
        return d

    def config_hash(self) -> str:
        # out_dir does not change results
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        kw = {}
        try:
            for k, val in d.items():
                if k in _NESTED:
                    base = asdict(getattr(cls, k)) if k != "params" else BASE_CASE.to_dict()
                    base.update(val or {})
                    kw[k] = _NESTED[k](**base)
                elif k == "rhos":
                    kw[k] = tuple(float(r) for r in val)
                else:
                    kw[k] = val
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            if path.suffix in (".yaml", ".yml"):
                import yaml

                d = yaml.safe_load(text) or {}
            else:
                d = json.loads(text)
        except Exception as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(d)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({**self.to_dict(), "config_hash": self.config_hash()}, indent=2))


@dataclass
class ResultBundle:
    name: str
    out_dir: Path
    summary: dict
    payoffs: dict = field(default_factory=dict)  # rule -> PayoffSampleSet
    extra: dict = field(default_factory=dict)


# --- helpers ---------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2))


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _tau_samples(q: PayoffSampleSet, T: float, censored: bool) -> NDArray:
    if censored:
        return np.where(q.exercised, q.tau, T)
    return q.tau[q.exercised]


def _emit_qq(out: Path, payoffs: dict, T: float, base: str = "heston") -> None:
    """Payoff and stopping-time QQ pairs of the reference rule against each other rule."""
    rows = []
    for other in payoffs:
        if other == base:
            continue
        a, b = payoffs[base], payoffs[other]
        for k, (qa, qb) in enumerate(qq_pairs(a.payoff, b.payoff)):
            rows.append(["payoff", base, other, k + 1, qa, qb])
        for mode, cens in (("tau_exercised", False), ("tau_censored", True)):
            ta, tb = _tau_samples(a, T, cens), _tau_samples(b, T, cens)
            if ta.size and tb.size:
                for k, (qa, qb) in enumerate(qq_pairs(ta, tb)):
                    rows.append([mode, base, other, k + 1, qa, qb])
    _write_rows(out / "qq.csv", ["quantity", "x_rule", "y_rule", "level", "x_quantile", "y_quantile"], rows)


def _emit_scatter(out: Path, payoffs: dict, n: int = SCATTER_N) -> None:
    names = list(payoffs)
    m = min(n, len(payoffs[names[0]]))
    cols = [payoffs[k].payoff[:m] for k in names]
    _write_rows(out / "scatter.csv", ["path_id"] + names, ([i] + [float(c[i]) for c in cols] for i in range(m)))


def _stats_block(payoffs: dict, T: float) -> dict:
    out = {}
    for k, q in payoffs.items():
        d = summarize(q).to_dict()
        d["exercised_fraction"] = float(q.exercised.mean())
        d["tau_mean"] = float(q.tau.mean())
        out[k] = d
    return out


def _solve_boundaries(cfg: ExperimentConfig, p: HestonParams, out: Path | None):
    K, T = cfg.strike, cfg.maturity
    t0 = time.perf_counter()
    quotes = generate_quote_surface(p)
    sigma_bs = calibrate_black_scholes(quotes, K, T)
    surface, report = calibrate_dupire(quotes, cfg.solver1d, cfg.dupire)
    _, b_bs = price_american_put_1d(LocalVolFn(sigma_bs), cfg.solver1d, K, T, p.r)
    _, b_dup = price_american_put_1d(surface.vol_fn(), cfg.solver1d, K, T, p.r)
    sol = price_american_put_heston(p, K, T, cfg.grid2d, cfg.mcs)
    log.info("calibration and boundaries for rho=%g in %.1fs", p.rho, time.perf_counter() - t0)
    if out is not None:
        quotes.to_csv(out / "quotes.csv")
        b_bs.to_csv(out / "boundary_bs.csv")
        b_dup.to_csv(out / "boundary_dupire.csv")
        sol.boundary.to_csv(out / "boundary_heston.csv")
        surface.to_csv(out / "local_vol.csv")
        if report is not None:
            report.to_json(out / "calibration_report.json")
    cal = {
        "bs_sigma": sigma_bs,
        "dupire_mean_rel_error": None if report is None else report.mean_rel_error,
        "heston_price": sol.value_at(p.s0, p.v0),
    }
    return {"bs": b_bs, "dupire": b_dup, "heston": sol.boundary}, cal, surface


def _apply_rules(cfg: ExperimentConfig, p: HestonParams, bnds: dict) -> dict:
    parts = {k: [] for k in RULES}
    K = cfg.strike
    for blk in iter_heston_blocks(p, cfg.n_paths, cfg.solver1d.n1, cfg.seed, cfg.maturity, cfg.block_size, cfg.workers):
        parts["heston"].append(apply_rule_2d(blk, bnds["heston"], K, p.r, "heston"))
        parts["bs"].append(apply_rule_1d(blk, bnds["bs"], K, p.r, "bs"))
        parts["dupire"].append(apply_rule_1d(blk, bnds["dupire"], K, p.r, "dupire"))
    return {k: PayoffSampleSet.concat(v) for k, v in parts.items()}


def _check_grids(cfg: ExperimentConfig) -> None:
    if cfg.solver1d.n1 != cfg.mcs.m3:
        raise ConfigError("the 1D and 2D solvers must share the time grid of the paths (n1 == m3)")


def _prepare(cfg: ExperimentConfig, out: Path | None) -> Path:
    _check_grids(cfg)
    out = Path(cfg.out_dir) if out is None else Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    return out


def _pipeline(cfg: ExperimentConfig, p: HestonParams, out: Path, write_payoffs: bool = True) -> ResultBundle:
    bnds, cal, _ = _solve_boundaries(cfg, p, out)
    t0 = time.perf_counter()
    payoffs = _apply_rules(cfg, p, bnds)
    log.info("%d paths and three rules in %.1fs", cfg.n_paths, time.perf_counter() - t0)
    if write_payoffs:
        for k, q in payoffs.items():
            q.to_csv(out / f"payoffs_{k}.csv")
    _emit_qq(out, payoffs, cfg.maturity)
    _emit_scatter(out, payoffs)
    summary = {
        "config_hash": cfg.config_hash(),
        "rho": p.rho,
        "n_paths": cfg.n_paths,
        "quartile_method": QUARTILE_METHOD,
        "calibration": cal,
        "payoff": _stats_block(payoffs, cfg.maturity),
    }
    return ResultBundle("base", out, summary, payoffs, {"boundaries": bnds})


# --- drivers ---------------------------------------------------------------------


def run_base_case(cfg: ExperimentConfig, out: str | Path | None = None, write_payoffs: bool = True) -> ResultBundle:
    out = _prepare(cfg, out)
    res = _pipeline(cfg, cfg.params, out, write_payoffs)
    _write_json(out / "summary.json", {"experiment": "base", **res.summary})
    return res


def run_correlation_sweep(cfg: ExperimentConfig, out: str | Path | None = None, write_payoffs: bool = False) -> ResultBundle:
    out = _prepare(cfg, out)
    per_rho: dict[float, ResultBundle] = {}
    for rho in cfg.rhos:
        sub = out / f"rho_{rho:+.2f}"
        sub.mkdir(exist_ok=True)
        res = _pipeline(cfg, cfg.params.with_rho(rho), sub, write_payoffs)
        _write_json(sub / "summary.json", {"experiment": "corr", **res.summary})
        per_rho[rho] = res

    # Heston boundary at fixed (t, v) across rho, plus the 1D boundaries
    rows = []
    for rho, res in per_rho.items():
        b = res.extra["boundaries"]
        ref = b["heston"].refined()
        for n in range(0, b["heston"].t.size, 5):
            for j, v in enumerate(REFINED_V[::10]):
                rows.append(["heston", rho, b["heston"].t[n], float(v), float(ref[n, 10 * j])])
            rows.append(["bs", rho, b["bs"].t[n], "", float(b["bs"].boundary[n])])
            rows.append(["dupire", rho, b["dupire"].t[n], "", float(b["dupire"].boundary[n])])
    _write_rows(out / "boundaries_by_rho.csv", ["model", "rho", "t", "v", "boundary_price"], rows)

    # within-model stopping-time QQ across rho, exercised paths only
    rows = []
    rhos = list(per_rho)
    for model in RULES:
        for a, b in zip(rhos[:-1], rhos[1:]):
            ta = _tau_samples(per_rho[a].payoffs[model], cfg.maturity, False)
            tb = _tau_samples(per_rho[b].payoffs[model], cfg.maturity, False)
            if ta.size and tb.size:
                for k, (qa, qb) in enumerate(qq_pairs(ta, tb)):
                    rows.append([model, a, b, k + 1, qa, qb])
    _write_rows(out / "tau_qq_by_rho.csv", ["model", "rho_x", "rho_y", "level", "x_quantile", "y_quantile"], rows)

    table = {
        f"{rho:+.2f}": {k: res.summary["payoff"][k] for k in RULES} for rho, res in per_rho.items()
    }
    summary = {
        "experiment": "corr",
        "config_hash": cfg.config_hash(),
        "n_paths": cfg.n_paths,
        "quartile_method": QUARTILE_METHOD,
        "rhos": list(cfg.rhos),
        "payoff": table,
        "calibration": {f"{rho:+.2f}": res.summary["calibration"] for rho, res in per_rho.items()},
    }
    _write_json(out / "summary.json", summary)
    return ResultBundle("corr", out, summary, {rho: r.payoffs for rho, r in per_rho.items()}, {"per_rho": per_rho})


def run_recalibration(cfg: ExperimentConfig, out: str | Path | None = None, write_payoffs: bool = True) -> ResultBundle:
    out = _prepare(cfg, out)
    p, K, T = cfg.params, cfg.strike, cfg.maturity
    bnds, cal, _ = _solve_boundaries(cfg, p, out)
    steps = recalibration_steps(T, cfg.solver1d.n1, cfg.recal_every)
    cache = BoundaryCache(K, T, p.r, cfg.solver1d, cfg.sigma_quantum or None)
    dt = T / cfg.solver1d.n1
    iv_steps = [int(steps[np.argmin(np.abs(steps * dt - tt))]) for tt in IV_DENSITY_TIMES]
    parts = {"heston": [], "bs_recal": [], "bs": []}
    iv_rows = []
    fallbacks = 0
    t0 = time.perf_counter()
    for blk in iter_heston_blocks(p, cfg.n_paths, cfg.solver1d.n1, cfg.seed, T, cfg.block_size, cfg.workers):
        parts["heston"].append(apply_rule_2d(blk, bnds["heston"], K, p.r, "heston"))
        parts["bs"].append(apply_rule_1d(blk, bnds["bs"], K, p.r, "bs"))
        q, meta = apply_rule_recalibrated(blk, p, K, T, cal["bs_sigma"], steps, cache)
        parts["bs_recal"].append(q)
        fallbacks += meta["fallbacks"]
        # implied vols on every path (exercised or not) at the density dates
        for k in iv_steps:
            tau = T - k * dt
            S, v = blk.S[:, k], blk.v[:, k]
            iv = implied_vol_batch(heston_put_batch(p, K, tau, S, v), p.r, S, OptionSpec(K, tau, "put"))
            iv_rows.extend(zip([k * dt] * S.size, iv.tolist(), np.sqrt(v).tolist()))
    log.info("recalibration study on %d paths in %.1fs (%d boundary solves)", cfg.n_paths, time.perf_counter() - t0, cache.solves)
    payoffs = {k: PayoffSampleSet.concat(v) for k, v in parts.items()}
    if write_payoffs:
        for k, q in payoffs.items():
            q.to_csv(out / f"payoffs_{k}.csv")
    _write_rows(out / "iv_densities.csv", ["t", "sigma", "sqrt_v"], iv_rows)
    _emit_qq(out, payoffs, T)
    _emit_scatter(out, {"bs": payoffs["bs"], "bs_recal": payoffs["bs_recal"]})
    summary = {
        "experiment": "recal",
        "config_hash": cfg.config_hash(),
        "n_paths": cfg.n_paths,
        "quartile_method": QUARTILE_METHOD,
        "recalibration_dates": int(steps.size),
        "sigma_quantum": cfg.sigma_quantum,
        "boundary_solves": cache.solves,
        "inversion_fallbacks": fallbacks,
        "calibration": cal,
        "payoff": _stats_block(payoffs, T),
    }
    _write_json(out / "summary.json", summary)
    return ResultBundle("recal", out, summary, payoffs, {"boundaries": bnds, "cache": cache})


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    """Copy with the non-None keyword overrides applied (CLI flags)."""
    kw = {k: v for k, v in kw.items() if v is not None}
    try:
        return replace(cfg, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
