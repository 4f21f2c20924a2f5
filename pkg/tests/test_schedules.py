import math

import mpmath
import numpy as np
import pytest

from semisam.schedules import LrSchedule, RampSchedule, lambda_c, lambda_s, learning_rate

mpmath.mp.dps = 40


def closed_form_up(t, t_max):
    return float(mpmath.mpf("0.1") * mpmath.exp(-5 * (1 - mpmath.mpf(t) / t_max)))


def test_lambda_c_endpoints():
    assert lambda_c(6000, 6000) == 0.1
    assert lambda_c(0, 6000) == pytest.approx(6.737946999085467e-4, abs=1e-15)
    assert lambda_c(3000, 6000) == pytest.approx(8.208499862389880e-3, abs=1e-15)


def test_lambda_c_matches_high_precision():
    for t in (0, 1, 777, 2999, 5999, 6000):
        assert abs(lambda_c(t, 6000) - closed_form_up(t, 6000)) < 1e-15


def test_lambda_s_endpoints():
    assert lambda_s(0, 6000) == 0.1
    assert lambda_s(6000, 6000) == pytest.approx(0.1 * math.exp(-5), abs=1e-16)


def test_substitution_symmetry():
    t_max = 6000
    for t in np.linspace(0, t_max, 1000):
        assert abs(lambda_s(t, t_max) - lambda_c(t_max - t, t_max)) < 1e-12


def test_monotone_on_grid():
    grid = np.linspace(0, 300, 1000)
    up = np.array([lambda_c(t, 300) for t in grid])
    down = np.array([lambda_s(t, 300) for t in grid])
    assert np.all(np.diff(up) > 0)
    assert np.all(np.diff(down) < 0)


def test_sum_symmetric_about_midpoint():
    t_max = 6000
    for t in np.linspace(0, t_max, 101):
        f = lambda_c(t, t_max) + lambda_s(t, t_max)
        g = lambda_c(t_max - t, t_max) + lambda_s(t_max - t, t_max)
        assert abs(f - g) < 1e-12


@pytest.mark.parametrize("t", [-1, 6001])
def test_out_of_range(t):
    with pytest.raises(ValueError):
        lambda_c(t, 6000)
    with pytest.raises(ValueError):
        lambda_s(t, 6000)


def test_ramp_schedule_bounds():
    up = RampSchedule("ramp_up", 100)
    down = RampSchedule("ramp_down", 100)
    for t in range(101):
        assert 0 < up(t) <= 0.1
        assert 0 < down(t) <= 0.1
    with pytest.raises(ValueError):
        RampSchedule("sideways", 100)


@pytest.mark.parametrize(
    "t, expected", [(0, 0.01), (2499, 0.01), (2500, 0.001), (5000, 0.0001), (5999, 0.0001)]
)
def test_learning_rate_steps(t, expected):
    assert learning_rate(t) == expected


def test_learning_rate_drop_count():
    t_max = 6000
    lrs = [learning_rate(t) for t in range(t_max)]
    drops = sum(1 for a, b in zip(lrs, lrs[1:]) if b != a)
    assert drops == t_max // 2500
    assert all(lr > 0 for lr in lrs)
    assert LrSchedule()(2500) == 0.001
