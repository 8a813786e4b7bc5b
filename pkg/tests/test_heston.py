import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import bs_call, heston_call_gil_pelaez

from exercise_risk.heston import (
    BASE_CASE,
    HestonParams,
    ImpliedVolError,
    OptionSpec,
    QuoteSurface,
    bs_price,
    heston_european_call,
    heston_european_put,
    heston_put_batch,
    implied_vol,
    implied_vol_batch,
)

P = BASE_CASE


@pytest.mark.parametrize(
    "kw",
    [dict(sigma_v=2.0), dict(rho=1.0), dict(kappa=-1.0), dict(s0=0.0), dict(r=-0.01), dict(v0=0.0)],
)
def test_params_validation(kw):
    d = P.to_dict()
    d.update(kw)
    with pytest.raises(ValueError):
        HestonParams(**d)


def test_option_spec_validation():
    with pytest.raises(ValueError):
        OptionSpec(10, 0.0)
    with pytest.raises(ValueError):
        OptionSpec(0, 1.0, "put")


def test_call_matches_independent_cf_formula():
    for K, T in ((7.0, 0.25), (10.0, 1.0), (13.0, 0.5)):
        assert heston_european_call(P, OptionSpec(K, T)) == pytest.approx(heston_call_gil_pelaez(P, K, T), abs=1e-8)


def test_zero_strike_call_is_spot():
    assert heston_european_call(P, OptionSpec(0.0, 1.0)) == pytest.approx(P.s0, abs=1e-10)


def test_degenerate_heston_is_black_scholes():
    p = HestonParams(kappa=5, theta=0.09, sigma_v=1e-4, rho=0.0, r=0.05, s0=10, v0=0.09)
    for K in (8.0, 10.0, 12.0):
        assert heston_european_call(p, OptionSpec(K, 1.0)) == pytest.approx(bs_call(10, K, 1.0, 0.05, 0.3), abs=1e-4)


@settings(max_examples=100, deadline=None)
@given(K=st.floats(5, 15), T=st.floats(0.05, 2), rho=st.floats(-0.9, 0.9))
def test_put_call_parity(K, T, rho):
    p = P.with_rho(rho)
    spec = OptionSpec(K, T)
    c = heston_european_call(p, spec)
    pu = heston_european_put(p, OptionSpec(K, T, "put"))
    assert c - pu == pytest.approx(p.s0 - K * math.exp(-p.r * T), abs=1e-10)


def test_deep_itm_put():
    pu = heston_european_put(P, OptionSpec(60.0, 1.0, "put"))
    assert pu == pytest.approx(60 * math.exp(-0.1) - 10, abs=1e-3)


def test_atm_put_call_iv_consistent():
    c = heston_european_call(P, OptionSpec(10, 1))
    pu = heston_european_put(P, OptionSpec(10, 1, "put"))
    assert implied_vol(pu, 0.1, 10, OptionSpec(10, 1, "put")) == pytest.approx(implied_vol(c, 0.1, 10, OptionSpec(10, 1)), abs=1e-6)


def test_put_batch_matches_scalar():
    S = np.array([6.0, 9.0, 10.0, 11.5, 14.0])
    v = np.array([0.3, 0.1, 0.16, 0.05, 0.01])
    for tau in (0.9, 0.2, 0.01):
        ref = [heston_european_put(P, OptionSpec(10, 1.0, "put"), at=(1 - tau, s, vv)) for s, vv in zip(S, v)]
        np.testing.assert_allclose(heston_put_batch(P, 10, tau, S, v), ref, atol=1e-7)


def test_bs_limits_and_parity():
    spec = OptionSpec(9.0, 1.0)
    assert bs_price(1e-9, 0.1, 10.0, spec) == pytest.approx(10 - 9 * math.exp(-0.1), abs=1e-12)
    c = bs_price(0.3, 0.1, 10.0, spec)
    pu = bs_price(0.3, 0.1, 10.0, OptionSpec(9.0, 1.0, "put"))
    assert c - pu == pytest.approx(10 - 9 * math.exp(-0.1), abs=1e-12)
    assert c == pytest.approx(bs_call(10, 9, 1, 0.1, 0.3), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(sig=st.floats(0.05, 2.0), K=st.floats(6, 14), T=st.floats(0.1, 2), kind=st.sampled_from(["call", "put"]))
def test_implied_vol_round_trip(sig, K, T, kind):
    spec = OptionSpec(K, T, kind)
    price = bs_price(sig, 0.1, 10.0, spec)
    if bs_price(sig, 0.1, 10.0, spec) - bs_price(1e-6, 0.1, 10.0, spec) < 1e-9:
        return  # no vega left to invert
    assert implied_vol(price, 0.1, 10.0, spec) == pytest.approx(sig, abs=1e-6)


def test_implied_vol_exact_and_errors():
    spec = OptionSpec(10, 1)
    assert implied_vol(bs_price(0.25, 0.1, 10, spec), 0.1, 10, spec) == pytest.approx(0.25, abs=1e-8)
    with pytest.raises(ImpliedVolError):
        implied_vol(0.1, 0.1, 10, spec)  # below intrinsic
    with pytest.raises(ImpliedVolError):
        implied_vol(11.0, 0.1, 10, spec)  # above spot


def test_implied_vol_batch():
    spec = OptionSpec(10, 0.5, "put")
    S = np.array([8.0, 10.0, 12.0])
    sig = np.array([0.2, 0.4, 0.6])
    prices = np.array([bs_price(s, 0.1, x, spec) for s, x in zip(sig, S)])
    np.testing.assert_allclose(implied_vol_batch(prices, 0.1, S, spec), sig, atol=1e-7)
    out = implied_vol_batch(np.array([-1.0]), 0.1, np.array([10.0]), spec)
    assert np.isnan(out[0])


def test_quote_surface_csv_round_trip(tmp_path, base_quotes):
    base_quotes.to_csv(tmp_path / "q.csv")
    q = QuoteSurface.from_csv(tmp_path / "q.csv")
    np.testing.assert_array_equal(q.prices, base_quotes.prices)
    Ks, Ts, grid = q.lattice()
    assert grid.shape == (4, 25)
    with pytest.raises(KeyError):
        q.lookup(10.1, 1.0)
