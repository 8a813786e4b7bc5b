"""Figures rendered from the CSV files an experiment writes.

Everything here reads files only, so a report can be regenerated without
rerunning any solver.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

log = logging.getLogger(__name__)

HESTON_V_LEVELS = (0.05, 0.1, 0.2, 0.3, 0.5)
COLORS = {"heston": "C0", "bs": "C1", "dupire": "C2", "bs_recal": "C3"}


def _read(path: Path) -> dict[str, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    return {h: [r[i] for r in body] for i, h in enumerate(head)}


def _f(col) -> np.ndarray:
    return np.array([float(x) if x != "" else np.nan for x in col])


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    log.info("wrote %s", path)
    return path


def plot_boundaries(d: Path, out: Path) -> Path | None:
    if not (d / "boundary_bs.csv").exists():
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in ("bs", "dupire"):
        f = d / f"boundary_{name}.csv"
        if f.exists():
            c = _read(f)
            ax.step(_f(c["t"]), _f(c["boundary_price"]), where="post", color=COLORS[name], label=name)
    f = d / "boundary_heston.csv"
    if f.exists():
        c = _read(f)
        sel = np.array([g == "spline" for g in c["grid"]])
        t, v, b = _f(c["t"])[sel], _f(c["v"])[sel], _f(c["boundary_price"])[sel]
        for k, lv in enumerate(HESTON_V_LEVELS):
            m = np.isclose(v, lv)
            ax.plot(t[m], b[m], color=COLORS["heston"], alpha=1 - 0.15 * k, lw=1, label=f"heston v={lv:g}")
    ax.set_xlabel("t")
    ax.set_ylabel("exercise boundary")
    ax.legend(fontsize=7)
    return _save(fig, out / "boundaries.png")


def plot_qq(d: Path, out: Path) -> list[Path]:
    f = d / "qq.csv"
    if not f.exists():
        return []
    c = _read(f)
    groups = defaultdict(list)
    for i, q in enumerate(c["quantity"]):
        groups[(q, c["x_rule"][i], c["y_rule"][i])].append((float(c["x_quantile"][i]), float(c["y_quantile"][i])))
    made = []
    for qty in ("payoff", "tau_exercised"):
        keys = [k for k in groups if k[0] == qty]
        if not keys:
            continue
        fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 4), squeeze=False)
        for ax, key in zip(axes[0], keys):
            xy = np.array(groups[key])
            ax.plot(xy[:, 0], xy[:, 1], ".", ms=3, color=COLORS.get(key[2], "k"))
            lo, hi = xy.min(), xy.max()
            ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
            ax.set_xlabel(key[1])
            ax.set_ylabel(key[2])
            ax.set_title(qty.replace("_", " "), fontsize=9)
        made.append(_save(fig, out / f"qq_{qty}.png"))
    return made


def plot_scatter(d: Path, out: Path) -> Path | None:
    f = d / "scatter.csv"
    if not f.exists():
        return None
    c = _read(f)
    names = [h for h in c if h != "path_id"]
    ref = "heston" if "heston" in names else names[0]
    others = [n for n in names if n != ref]
    fig, axes = plt.subplots(1, len(others), figsize=(4 * len(others), 4), squeeze=False)
    x = _f(c[ref])
    for ax, name in zip(axes[0], others):
        ax.plot(x, _f(c[name]), ".", ms=1.5, alpha=0.4, color=COLORS.get(name, "k"))
        hi = max(x.max(), _f(c[name]).max())
        ax.plot([0, hi], [0, hi], "k--", lw=0.8)
        ax.set_xlabel(f"{ref} payoff")
        ax.set_ylabel(f"{name} payoff")
    return _save(fig, out / "scatter.png")


def plot_local_vol(d: Path, out: Path) -> Path | None:
    f = d / "local_vol.csv"
    if not f.exists():
        return None
    arr = np.loadtxt(f, delimiter=",", skiprows=1)
    t, S, sig = arr[:, 0], arr[:, 1], arr[:, 2]
    fig, ax = plt.subplots(figsize=(6, 4))
    tn = np.unique(t)
    for tt in (0.25, 0.5, 0.75, 1.0):
        j = tn[np.argmin(np.abs(tn - tt))]
        m = (t == j) & (S > 5) & (S < 16)
        ax.plot(S[m], sig[m], label=f"t={j:.2f}")
    ax.set_xlabel("S")
    ax.set_ylabel("local volatility")
    ax.legend(fontsize=8)
    return _save(fig, out / "local_vol.png")


def plot_iv_densities(d: Path, out: Path) -> Path | None:
    f = d / "iv_densities.csv"
    if not f.exists():
        return None
    arr = np.loadtxt(f, delimiter=",", skiprows=1)
    ts = np.unique(arr[:, 0])
    fig, axes = plt.subplots(1, ts.size, figsize=(4 * ts.size, 3.5), squeeze=False)
    for ax, tt in zip(axes[0], ts):
        m = arr[:, 0] == tt
        sig = arr[m, 1]
        ax.hist(sig[np.isfinite(sig)], bins=80, density=True, histtype="step", label="implied vol")
        ax.hist(arr[m, 2], bins=80, density=True, histtype="step", label="sqrt(v)")
        ax.set_title(f"t = {tt:.3f}", fontsize=9)
        ax.legend(fontsize=7)
    return _save(fig, out / "iv_densities.png")


def plot_boundaries_by_rho(d: Path, out: Path) -> Path | None:
    f = d / "boundaries_by_rho.csv"
    if not f.exists():
        return None
    c = _read(f)
    model = np.array(c["model"])
    rho, t, v, b = _f(c["rho"]), _f(c["t"]), _f(c["v"]), _f(c["boundary_price"])
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    for ax, name in zip(axes, ("heston", "bs", "dupire")):
        for k, r in enumerate(np.unique(rho)):
            m = (model == name) & (rho == r)
            if name == "heston":
                m &= np.isclose(v, 0.1)
            ax.plot(t[m], b[m], color=f"C{k}", label=f"rho={r:+.1f}")
        ax.set_title(name + (" (v=0.1)" if name == "heston" else ""), fontsize=9)
        ax.set_xlabel("t")
        ax.legend(fontsize=7)
    return _save(fig, out / "boundaries_by_rho.png")


def render_report(results: str | Path, out: str | Path | None = None) -> list[Path]:
    """Render every figure whose source CSV exists under ``results`` (recursing into sub-runs)."""
    results = Path(results)
    if not results.is_dir():
        raise FileNotFoundError(f"no results directory at {results}")
    made: list[Path] = []
    dirs = [results] + sorted(p for p in results.iterdir() if p.is_dir() and p.name != "figures")
    for d in dirs:
        o = (Path(out) if out else results / "figures") / (d.name if d != results else "")
        o.mkdir(parents=True, exist_ok=True)
        for fn in (plot_boundaries, plot_scatter, plot_local_vol, plot_iv_densities, plot_boundaries_by_rho):
            p = fn(d, o)
            if p is not None:
                made.append(p)
        made.extend(plot_qq(d, o))
    return made
