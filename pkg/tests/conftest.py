import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from exercise_risk.calibrate import calibrate_black_scholes, calibrate_dupire  # noqa: E402
from exercise_risk.heston import BASE_CASE, generate_quote_surface  # noqa: E402
from exercise_risk.pde1d import LocalVolFn, Solver1DConfig, price_american_put_1d  # noqa: E402
from exercise_risk.pde2d import HestonGridConfig, MCSConfig, price_american_put_heston  # noqa: E402


@pytest.fixture(scope="session")
def base_quotes():
    return generate_quote_surface(BASE_CASE)


@pytest.fixture(scope="session")
def base_sigma(base_quotes):
    return calibrate_black_scholes(base_quotes)


@pytest.fixture(scope="session")
def base_dupire(base_quotes):
    return calibrate_dupire(base_quotes)


@pytest.fixture(scope="session")
def bs_put_solution(base_sigma):
    return price_american_put_1d(LocalVolFn(base_sigma), Solver1DConfig(), 10.0, 1.0, 0.1)


@pytest.fixture(scope="session")
def heston_solutions():
    """American Heston solutions for the three correlations, computed once."""
    return {rho: price_american_put_heston(BASE_CASE.with_rho(rho), 10.0, 1.0, HestonGridConfig(), MCSConfig())
            for rho in (-0.5, 0.0, 0.5)}


# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {name} | {detail}")
