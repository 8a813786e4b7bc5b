"""Command line entry point: ``exercise-risk <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .calibrate import CalibrationError, calibrate_black_scholes, calibrate_dupire
from .experiments import (
    ConfigError,
    ExperimentConfig,
    run_base_case,
    run_correlation_sweep,
    run_recalibration,
    with_overrides,
)
from .heston import ImpliedVolError, PricingError, generate_quote_surface
from .linalg import SingularMatrixError
from .mc import GridMismatchError, simulate_heston
from .pde1d import LocalVolFn, price_american_put_1d
from .pde2d import price_american_put_heston

log = logging.getLogger("exercise_risk")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (CalibrationError, PricingError, ImpliedVolError, SingularMatrixError, FloatingPointError, ArithmeticError)


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    params = cfg.params
    if getattr(args, "rho", None) is not None:
        try:
            params = params.with_rho(args.rho)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return with_overrides(cfg, seed=args.seed, n_paths=args.paths, out_dir=args.out, workers=args.workers, params=params)


def cmd_calibrate(cfg: ExperimentConfig, args) -> dict:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    quotes = generate_quote_surface(cfg.params)
    quotes.to_csv(out / "quotes.csv")
    sigma = calibrate_black_scholes(quotes, cfg.strike, cfg.maturity)
    surface, report = calibrate_dupire(quotes, cfg.solver1d, cfg.dupire)
    surface.to_csv(out / "local_vol.csv")
    res = {"bs_sigma": sigma}
    if report is not None:
        report.to_json(out / "calibration_report.json")
        res["dupire_mean_rel_error"] = report.mean_rel_error
    (out / "calibration.json").write_text(json.dumps(res, indent=2))
    return res


def cmd_boundary(cfg: ExperimentConfig, args) -> dict:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p, K, T = cfg.params, cfg.strike, cfg.maturity
    quotes = generate_quote_surface(p)
    sigma = calibrate_black_scholes(quotes, K, T)
    surface, _ = calibrate_dupire(quotes, cfg.solver1d, cfg.dupire)
    U, b_bs = price_american_put_1d(LocalVolFn(sigma), cfg.solver1d, K, T, p.r)
    _, b_dup = price_american_put_1d(surface.vol_fn(), cfg.solver1d, K, T, p.r)
    sol = price_american_put_heston(p, K, T, cfg.grid2d, cfg.mcs)
    b_bs.to_csv(out / "boundary_bs.csv")
    b_dup.to_csv(out / "boundary_dupire.csv")
    sol.boundary.to_csv(out / "boundary_heston.csv")
    return {"bs_sigma": sigma, "heston_american_put": sol.value_at(p.s0, p.v0)}


def cmd_simulate(cfg: ExperimentConfig, args) -> dict:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.n_paths > 200_000:
        raise ConfigError("storing more than 2e5 full paths is not supported; experiments stream blocks instead")
    ps = simulate_heston(cfg.params, cfg.n_paths, cfg.solver1d.n1, cfg.seed, cfg.maturity, cfg.block_size, cfg.workers)
    ps.save(out / "paths.bin")
    return {"paths": str(out / "paths.bin"), "n_paths": ps.n_paths, "n_steps": ps.n_steps}


def cmd_experiment(cfg: ExperimentConfig, args) -> dict:
    run = {"base": run_base_case, "corr": run_correlation_sweep, "recal": run_recalibration}[args.which]
    res = run(cfg, write_payoffs=not args.no_payoffs)
    return res.summary


def cmd_report(cfg, args) -> dict:
    from .report import render_report

    made = render_report(args.results, args.out)
    return {"figures": [str(p) for p in made]}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="exercise-risk", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, paths=True):
        p.add_argument("--config", help="JSON or YAML experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="simulation threads (results do not depend on it)")
        p.add_argument("--rho", type=float, help="override the correlation")
        if paths:
            p.add_argument("--paths", type=int, help="number of Monte Carlo paths")
        else:
            p.set_defaults(paths=None)

    common(sub.add_parser("calibrate", help="quote surface, BS vol and Dupire surface"), paths=False)
    common(sub.add_parser("boundary", help="BS, Dupire and Heston exercise boundaries"), paths=False)
    common(sub.add_parser("simulate", help="Heston paths to a binary file with JSON sidecar"))
    ex = sub.add_parser("experiment", help="run an experiment")
    ex.add_argument("which", choices=("base", "corr", "recal"))
    ex.add_argument("--no-payoffs", action="store_true", help="skip the per-path payoff CSVs")
    common(ex)
    rp = sub.add_parser("report", help="render figures from an experiment directory")
    rp.add_argument("results", help="experiment output directory")
    rp.add_argument("--out", help="figure directory (default RESULTS/figures)")
    return ap


HANDLERS = {
    "calibrate": cmd_calibrate,
    "boundary": cmd_boundary,
    "simulate": cmd_simulate,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None if args.command == "report" else _config(args)
        res = HANDLERS[args.command](cfg, args)
    except (ConfigError, GridMismatchError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(res, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
