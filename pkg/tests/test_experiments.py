import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exercise_risk.experiments import (
    ConfigError,
    ExperimentConfig,
    qq_pairs,
    run_base_case,
    summarize,
)


def test_summarize_constant():
    s = summarize([1.0, 1.0, 1.0])
    assert (s.median, s.mean, s.q3, s.max, s.se) == (1, 1, 1, 1, 0)


def test_summarize_type7_quartile():
    s = summarize([0.0, 1.0, 2.0, 3.0])
    assert s.median == 1.5 and s.q3 == 2.25 and s.max == 3


def test_summarize_empty():
    with pytest.raises(ValueError):
        summarize([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=2, max_size=200))
def test_summary_ordering(x):
    s = summarize(x)
    assert s.median <= s.q3 + 1e-12 <= s.max + 2e-12
    assert s.se == pytest.approx(np.std(x, ddof=1) / np.sqrt(len(x)))


def test_qq_pairs():
    rng = np.random.default_rng(0)
    b = rng.exponential(size=500)
    for qa, qb in qq_pairs(b, b, 19):
        assert qa == qb
    for qa, qb in qq_pairs(2 * b, b, 19):
        assert qa == pytest.approx(2 * qb)
    assert len(qq_pairs(b, b)) == 99
    with pytest.raises(ValueError):
        qq_pairs([], b)


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig(n_paths=1234, seed=5, rhos=(-0.5, 0.5))
    cfg.dump(tmp_path / "c.json")
    d = json.loads((tmp_path / "c.json").read_text())
    assert d.pop("config_hash") == cfg.config_hash()
    back = ExperimentConfig.from_dict(d)
    assert back == cfg and back.config_hash() == cfg.config_hash()
    (tmp_path / "c.yaml").write_text("n_paths: 77\nparams:\n  rho: 0.0\nmcs:\n  lambda2: 0.5\n")
    y = ExperimentConfig.load(tmp_path / "c.yaml")
    assert y.n_paths == 77 and y.params.rho == 0.0 and y.mcs.lambda2 == 0.5 and y.params.kappa == 5


@pytest.mark.parametrize(
    "d", [{"n_paths": 0}, {"bogus": 1}, {"params": {"sigma_v": 5}}, {"rhos": [1.5]}, {"mcs": {"lambda2": 0}}]
)
def test_config_errors(d):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


def test_config_hash_ignores_output_location():
    assert ExperimentConfig(out_dir="a").config_hash() == ExperimentConfig(out_dir="b", workers=4).config_hash()
    assert ExperimentConfig(seed=1).config_hash() != ExperimentConfig(seed=2).config_hash()


def test_grid_consistency_required(tmp_path):
    from exercise_risk.pde2d import MCSConfig

    cfg = ExperimentConfig(n_paths=10, mcs=MCSConfig(m3=200), out_dir=str(tmp_path))
    with pytest.raises(ConfigError):
        run_base_case(cfg)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("base")
    cfg = ExperimentConfig(n_paths=3000, seed=9, block_size=1000, out_dir=str(out))
    return cfg, run_base_case(cfg)


def test_base_case_outputs(small_run):
    cfg, res = small_run
    out = res.out_dir
    for f in ("summary.json", "config.json", "qq.csv", "scatter.csv", "boundary_bs.csv", "boundary_dupire.csv",
              "boundary_heston.csv", "calibration_report.json", "payoffs_heston.csv", "quotes.csv"):
        assert (out / f).exists(), f
    s = json.loads((out / "summary.json").read_text())
    assert s["config_hash"] == cfg.config_hash()
    assert set(s["payoff"]) == {"heston", "bs", "dupire"}
    assert s["quartile_method"] == "linear"


def test_base_case_bit_identical(small_run, tmp_path):
    cfg, res = small_run
    from dataclasses import replace

    again = run_base_case(replace(cfg, out_dir=str(tmp_path), workers=2), write_payoffs=False)
    for k in ("heston", "bs", "dupire"):
        np.testing.assert_array_equal(again.payoffs[k].payoff, res.payoffs[k].payoff)
    assert json.loads((tmp_path / "summary.json").read_text())["payoff"] == res.summary["payoff"]
