"""Heston parameters, European Heston prices via the characteristic function,
Black-Scholes closed form and implied-volatility inversion."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.typing import NDArray
from scipy import integrate, optimize
from scipy.special import ndtr, roots_legendre

__all__ = [
    "HestonParams",
    "OptionSpec",
    "QuoteSurface",
    "ImpliedVolError",
    "PricingError",
    "BASE_CASE",
    "PAPER_STRIKES",
    "PAPER_MATURITIES",
    "heston_european_call",
    "heston_european_put",
    "heston_put_batch",
    "bs_price",
    "bs_vega",
    "implied_vol",
    "implied_vol_batch",
    "generate_quote_surface",
]

IV_LO, IV_HI = 1e-6, 6.0


class PricingError(ArithmeticError):
    pass


class ImpliedVolError(ValueError):
    """Price outside the invertible range, or the root search failed."""


@dataclass(frozen=True)
class HestonParams:
    kappa: float
    theta: float
    sigma_v: float
    rho: float
    r: float
    s0: float
    v0: float

    def __post_init__(self) -> None:
        if self.kappa <= 0 or self.theta <= 0 or self.sigma_v <= 0:
            raise ValueError("kappa, theta and sigma_v must be positive")
        if not -1 < self.rho < 1:
            raise ValueError("rho must lie in (-1, 1)")
        if self.s0 <= 0 or self.v0 <= 0:
            raise ValueError("s0 and v0 must be positive")
        if self.r < 0:
            raise ValueError("r must be nonnegative")
        if 2 * self.kappa * self.theta <= self.sigma_v**2:
            raise ValueError(
                f"Feller condition violated: 2*kappa*theta={2 * self.kappa * self.theta:g} <= sigma_v^2={self.sigma_v**2:g}"
            )

    def with_rho(self, rho: float) -> HestonParams:
        return replace(self, rho=rho)

    def to_dict(self) -> dict:
        return asdict(self)


BASE_CASE = HestonParams(kappa=5.0, theta=0.16, sigma_v=0.9, rho=-0.5, r=0.1, s0=10.0, v0=0.0625)
PAPER_STRIKES = tuple(7.0 + 0.25 * k for k in range(25))
PAPER_MATURITIES = (0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class OptionSpec:
    strike: float
    maturity: float
    kind: Literal["call", "put"] = "call"
    style: Literal["european", "american"] = "european"

    def __post_init__(self) -> None:
        if self.strike < 0 or (self.strike == 0 and self.kind == "put"):
            raise ValueError("strike must be positive")
        if self.maturity <= 0:
            raise ValueError("maturity must be positive")
        if self.kind not in ("call", "put") or self.style not in ("european", "american"):
            raise ValueError("unknown option kind/style")


@dataclass(frozen=True)
class QuoteSurface:
    strikes: NDArray[np.float64]
    maturities: NDArray[np.float64]
    prices: NDArray[np.float64]
    model: str = "heston"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        for name in ("strikes", "maturities", "prices"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.strikes.shape == self.maturities.shape == self.prices.shape):
            raise ValueError("strikes, maturities and prices must align")

    def __len__(self) -> int:
        return self.prices.size

    def lookup(self, strike: float, maturity: float) -> float:
        hit = np.flatnonzero(np.isclose(self.strikes, strike, rtol=0, atol=1e-12) & np.isclose(self.maturities, maturity, rtol=0, atol=1e-12))
        if hit.size == 0:
            raise KeyError(f"no quote for (K={strike}, T={maturity})")
        return float(self.prices[hit[0]])

    def lattice(self) -> tuple[NDArray, NDArray, NDArray]:
        """Unique strikes, unique maturities and the (maturity, strike) price grid."""
        Ks = np.unique(self.strikes)
        Ts = np.unique(self.maturities)
        if Ks.size * Ts.size != self.prices.size:
            raise ValueError("quotes do not form a complete strike x maturity lattice")
        grid = np.full((Ts.size, Ks.size), np.nan)
        grid[np.searchsorted(Ts, self.maturities), np.searchsorted(Ks, self.strikes)] = self.prices
        if np.isnan(grid).any():
            raise ValueError("quotes do not form a complete strike x maturity lattice")
        return Ks, Ts, grid

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["strike", "maturity", "price"])
            for k, t, c in zip(self.strikes, self.maturities, self.prices):
                w.writerow([repr(float(k)), repr(float(t)), repr(float(c))])

    @classmethod
    def from_csv(cls, path: str | Path, model: str = "unknown") -> QuoteSurface:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [float(r["strike"]) for r in rows],
            [float(r["maturity"]) for r in rows],
            [float(r["price"]) for r in rows],
            model=model,
        )


# --- characteristic function -------------------------------------------------


def _log_forward_cf(u, tau: float, v, p: HestonParams):
    """E[exp(i u log(S_T / F))] under Heston, in the rotation-count-free form.

    ``u`` may be complex; ``v`` broadcasts against ``u``.
    """
    k, th, s, rho = p.kappa, p.theta, p.sigma_v, p.rho
    iu = 1j * u
    beta = k - rho * s * iu
    d = np.sqrt(beta * beta + s * s * (iu + u * u))
    g = (beta - d) / (beta + d)
    e = np.exp(-d * tau)
    C = k * th / (s * s) * ((beta - d) * tau - 2.0 * np.log((1.0 - g * e) / (1.0 - g)))
    D = (beta - d) / (s * s) * (1.0 - e) / (1.0 - g * e)
    return np.exp(C + D * v)


def _lewis_integrand(u, x: float, tau: float, v: float, p: HestonParams) -> float:
    z = u - 0.5j
    return float(np.real(np.exp(1j * u * x) * _log_forward_cf(z, tau, v, p)) / (u * u + 0.25))


def heston_european_call(p: HestonParams, spec: OptionSpec, at: tuple[float, float, float] | None = None) -> float:
    """European call under Heston at state ``at = (t, S, v)`` (default: time 0 at p.s0, p.v0).

    Uses the single-integral Lewis representation
    C = S - sqrt(F K) e^{-r tau} / pi * int_0^inf Re[e^{i u x} phi(u - i/2)] / (u^2 + 1/4) du
    with x = log(F / K) and phi the characteristic function of log(S_T / F).
    """
    if spec.style != "european":
        raise ValueError("only European options have a characteristic-function price")
    t, S, v = at if at is not None else (0.0, p.s0, p.v0)
    tau = spec.maturity - t
    if tau <= 0:
        raise ValueError("valuation time must be before maturity")
    K = spec.strike
    if K == 0:
        call = S
    else:
        F = S * math.exp(p.r * tau)
        x = math.log(F / K)
        with warnings.catch_warnings():
            # roundoff warnings are judged by the returned error estimate instead
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            val, err = integrate.quad(_lewis_integrand, 0.0, np.inf, args=(x, tau, v, p), epsabs=1e-10, epsrel=1e-10, limit=500)
        if not np.isfinite(val) or err > 1e-7 * max(1.0, abs(val)):
            raise PricingError(f"characteristic-function integration failed (value {val!r}, error estimate {err:.2e})")
        call = S - math.sqrt(F * K) * math.exp(-p.r * tau) * val / math.pi
    if spec.kind == "put":
        return call - S + K * math.exp(-p.r * tau)
    return call


def heston_european_put(p: HestonParams, spec: OptionSpec, at: tuple[float, float, float] | None = None) -> float:
    call_spec = replace(spec, kind="call")
    t, S, _ = at if at is not None else (0.0, p.s0, p.v0)
    call = heston_european_call(p, call_spec, at)
    return call - S + spec.strike * math.exp(-p.r * (spec.maturity - t))


_GL_CACHE: dict[int, tuple[NDArray, NDArray]] = {}


def _gauss_legendre(n: int) -> tuple[NDArray, NDArray]:
    if n not in _GL_CACHE:
        _GL_CACHE[n] = roots_legendre(n)
    return _GL_CACHE[n]


def heston_put_batch(p: HestonParams, K: float, tau: float, S: NDArray, v: NDArray, n_nodes: int = 400) -> NDArray:
    """European puts for many (S, v) states sharing strike and time to maturity.

    Fixed-node Gauss-Legendre version of the Lewis integral, used where the
    adaptive scalar pricer would be too slow (pathwise recalibration). The
    truncation point is set from the smallest integrated variance in the batch.
    """
    S = np.asarray(S, dtype=float)
    v = np.maximum(np.asarray(v, dtype=float), 0.0)
    if tau <= 0:
        raise ValueError("tau must be positive")
    # lower bound on integrated variance over [0, tau] given v >= 0
    ekt = math.exp(-p.kappa * tau)
    w_min = p.theta * (tau - (1.0 - ekt) / p.kappa) + float(np.min(v, initial=p.theta)) * (1.0 - ekt) / p.kappa
    w_min = max(w_min, 1e-8)
    u_max = min(math.sqrt(2.0 * 40.0 / w_min), 5000.0)
    # split at a few breakpoints so the nodes concentrate where the integrand lives
    edges = np.array([0.0, 0.05, 0.2, 0.5, 1.0]) * u_max
    xs, ws = _gauss_legendre(n_nodes // 4)
    u = np.concatenate([0.5 * (b - a) * xs + 0.5 * (b + a) for a, b in zip(edges[:-1], edges[1:])])
    wts = np.concatenate([0.5 * (b - a) * ws for a, b in zip(edges[:-1], edges[1:])])
    z = u - 0.5j
    k, th, s, rho = p.kappa, p.theta, p.sigma_v, p.rho
    iu = 1j * z
    beta = k - rho * s * iu
    d = np.sqrt(beta * beta + s * s * (iu + z * z))
    g = (beta - d) / (beta + d)
    e = np.exp(-d * tau)
    C = k * th / (s * s) * ((beta - d) * tau - 2.0 * np.log((1.0 - g * e) / (1.0 - g)))
    D = (beta - d) / (s * s) * (1.0 - e) / (1.0 - g * e)
    F = S * math.exp(p.r * tau)
    x = np.log(F / K)
    out = np.empty(S.shape)
    flat_x, flat_v, flat_out = x.ravel(), v.ravel(), out.ravel()
    chunk = max(1, 2_000_000 // u.size)
    base = wts / (u * u + 0.25)
    for a in range(0, flat_x.size, chunk):
        xb = flat_x[a : a + chunk, None]
        vb = flat_v[a : a + chunk, None]
        integrand = np.real(np.exp(1j * u * xb + C + D * vb))
        flat_out[a : a + chunk] = integrand @ base
    call = S - np.sqrt(F * K) * math.exp(-p.r * tau) * out / math.pi
    return call - S + K * math.exp(-p.r * tau)


# --- Black-Scholes -----------------------------------------------------------


def bs_price(sigma, r: float, S, spec: OptionSpec):
    """Black-Scholes value at time 0 with time to maturity ``spec.maturity``.

    Vectorised over ``sigma`` and ``S``.
    """
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    S = np.asarray(S, dtype=float)
    K, T = spec.strike, spec.maturity
    df = math.exp(-r * T)
    fwd_intr_call = np.maximum(S - K * df, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = sigma * math.sqrt(T)
        d1 = (np.log(S / K) + (r + 0.5 * sigma * sigma) * T) / sq
        d2 = d1 - sq
        call = S * ndtr(d1) - K * df * ndtr(d2)
    call = np.where(sq > 0, call, fwd_intr_call) if K > 0 else S * np.ones_like(sq)
    if spec.kind == "put":
        out = call - S + K * df
    else:
        out = call
    return float(out) if np.ndim(out) == 0 else out


def bs_vega(sigma, r: float, S, spec: OptionSpec):
    sigma = np.asarray(sigma, dtype=float)
    K, T = spec.strike, spec.maturity
    d1 = (np.log(S / K) + (r + 0.5 * sigma * sigma) * T) / (sigma * math.sqrt(T))
    return S * np.exp(-0.5 * d1 * d1) / math.sqrt(2 * math.pi) * math.sqrt(T)


def implied_vol(price: float, r: float, S: float, spec: OptionSpec) -> float:
    """Black-Scholes implied volatility by Brent's method on [1e-6, 6]."""
    lo_p = bs_price(IV_LO, r, S, spec)
    hi_p = bs_price(IV_HI, r, S, spec)
    if not lo_p < price < hi_p:
        raise ImpliedVolError(f"price {price!r} outside invertible range ({lo_p!r}, {hi_p!r})")
    try:
        sigma, res = optimize.brentq(
            lambda s: bs_price(s, r, S, spec) - price, IV_LO, IV_HI, xtol=1e-15, rtol=4 * np.finfo(float).eps,
            maxiter=200, full_output=True,
        )
    except RuntimeError as exc:
        raise ImpliedVolError(str(exc)) from exc
    if not res.converged:
        raise ImpliedVolError("implied volatility search did not converge")
    return float(sigma)


def implied_vol_batch(price: NDArray, r: float, S: NDArray, spec: OptionSpec, n_iter: int = 100) -> NDArray:
    """Vectorised implied volatility; entries outside the invertible range are nan."""
    price = np.asarray(price, dtype=float)
    S = np.broadcast_to(np.asarray(S, dtype=float), price.shape)
    lo = np.full(price.shape, IV_LO)
    hi = np.full(price.shape, IV_HI)
    ok = (bs_price(lo, r, S, spec) < price) & (price < bs_price(hi, r, S, spec))
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        above = bs_price(mid, r, S, spec) > price
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
        if np.all(hi - lo < 1e-13):
            break
    out = 0.5 * (lo + hi)
    return np.where(ok, out, np.nan)


def generate_quote_surface(p: HestonParams, strikes=PAPER_STRIKES, maturities=PAPER_MATURITIES) -> QuoteSurface:
    Ks, Ts, Cs = [], [], []
    for T in maturities:
        for K in strikes:
            Ks.append(K)
            Ts.append(T)
            Cs.append(heston_european_call(p, OptionSpec(K, T)))
    return QuoteSurface(Ks, Ts, Cs, model="heston", meta={"params": p.to_dict(), "r": p.r, "s0": p.s0})
