import math

import numpy as np
import pytest
from scipy.special import log_ndtr

from smcprobit.scaling import ScalingConfig, ScalingRow, _cutoff_for, fit_lines, run_scaling, scaling_covariance


def test_covariance_design():
    s = scaling_covariance(4)
    assert s[0, 1] == s[1, 0] == 0.9
    assert np.array_equal(np.diag(s), np.ones(4))
    off = s - np.diag(np.diag(s))
    assert np.count_nonzero(off) == 2


@pytest.mark.parametrize("p", [2, 4, 8, 16])
def test_cutoff_hits_log_probability(p):
    for lp in (-16.0, -9.5, -3.0):
        c = _cutoff_for(lp, p)
        assert p * log_ndtr(-c) == pytest.approx(lp, abs=1e-10)


def test_start_cutoff_quarter_mass():
    c0 = _cutoff_for(math.log(0.25), 2)
    assert 2 * log_ndtr(-c0) == pytest.approx(math.log(0.25))


def test_config_validation():
    with pytest.raises(ValueError):
        ScalingConfig(replicates=1)
    with pytest.raises(ValueError):
        ScalingConfig(log_prob_range=(-3.0, -16.0))
    with pytest.raises(ValueError):
        ScalingConfig(log_prob_range=(-3.0, -1.0))
    with pytest.raises(ValueError):
        ScalingConfig(dims=(1, 2))


def test_default_sampler_has_no_pilot():
    assert ScalingConfig().smc.pilot_particles() == 0


def test_fit_lines_recovers_exact_line():
    rows = [ScalingRow(2, x, int(3 + 5 * x), 0.0, -x, 1.0) for x in range(1, 8)]
    (fit,) = fit_lines(rows)
    assert fit.slope == pytest.approx(5.0)
    assert fit.intercept == pytest.approx(3.0)
    assert fit.r2 == pytest.approx(1.0)
    assert fit.n == 7


def test_small_run_rows():
    cfg = ScalingConfig(dims=(2, 4), replicates=4, n_particles=400, seed=3)
    rows = run_scaling(cfg)
    assert len(rows) == 8
    assert {r.dim for r in rows} == {2, 4}
    for r in rows:
        assert r.steps >= 1
        assert r.log_ratio > 0
        assert r.log_r < r.log_r0
        # positive correlation raises the orthant probability above the independent value
        assert r.log_r > r.dim * log_ndtr(-r.cutoff) - 0.2
    again = run_scaling(cfg)
    assert [(r.steps, r.log_r) for r in again] == [(r.steps, r.log_r) for r in rows]


def test_steps_grow_with_log_ratio():
    cfg = ScalingConfig(dims=(2,), replicates=12, n_particles=1000, seed=5)
    rows = run_scaling(cfg)
    (fit,) = fit_lines(rows)
    assert fit.slope > 0
    assert fit.r2 > 0.8
