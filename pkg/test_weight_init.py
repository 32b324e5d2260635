#!/usr/bin/env python3
"""
Statistical checks of the complex weight initializers.
"""
import numpy as np
import pytest
from numpy.testing import assert_array_equal
from scipy import stats

from errors import ConfigError, ShapeError
from weight_init import (FanPair, InitPolicy, bcw_init, bcw_variance, initialize, initialize_real, rayleigh_init,
                         rayleigh_sigma, xavier_bound, xavier_init)

SAMPLES = 100_000


def test_fans_for_conv():
    fans = FanPair.for_conv(c_in=4, c_out=8, kernel=3)
    assert (fans.fan_in, fans.fan_out) == (36, 72)
    assert bcw_variance(fans) == pytest.approx(1 / 108)
    with pytest.raises(ShapeError):
        FanPair(0, 3)


def test_policy_validation():
    with pytest.raises(ConfigError):
        InitPolicy('he')
    with pytest.raises(ConfigError):
        InitPolicy('rayleigh', rayleigh_mode='lecun')


def test_bcw_per_component_variance():
    fans = FanPair.for_conv(16, 32, 3)
    w = bcw_init((SAMPLES, 1), fans, np.random.default_rng(0))
    target = 1.0 / (fans.fan_in + fans.fan_out)
    for part in (w.re, w.im):
        assert abs(part.astype(np.float64).ravel().var() / target - 1) < 0.05
        assert abs(part.mean()) < 5 * np.sqrt(target / SAMPLES)


def test_bcw_components_are_gaussian():
    fans = FanPair(100, 100)
    w = bcw_init((SAMPLES, 1), fans, np.random.default_rng(1))
    sigma = np.sqrt(bcw_variance(fans))
    assert stats.kstest(w.re.astype(np.float64).ravel(), 'norm', args=(0, sigma)).pvalue > 0.01


def test_bcw_components_are_uncorrelated():
    w = bcw_init((SAMPLES, 1), FanPair(64, 64), np.random.default_rng(4))
    corr = np.corrcoef(w.re.astype(np.float64).ravel(), w.im.astype(np.float64).ravel())[0, 1]
    assert abs(corr) < 0.01


def test_xavier_mean_within_three_sigma():
    fans = FanPair(50, 30)
    w = xavier_init((SAMPLES, 1), fans, np.random.default_rng(6))
    sigma_of_mean = xavier_bound(fans) / np.sqrt(3.0 * SAMPLES)
    for part in (w.re, w.im):
        assert abs(part.astype(np.float64).mean()) < 3 * sigma_of_mean


@pytest.mark.parametrize('mode, variance', [('glorot', 2 / (72 + 144)), ('he', 2 / 72)])
def test_rayleigh_complex_variance(mode, variance):
    w = rayleigh_init((SAMPLES, 1), FanPair(72, 144), np.random.default_rng(8), mode)
    power = w.re.astype(np.float64) ** 2 + w.im.astype(np.float64) ** 2
    # E|W|^2 = 2 sigma^2
    assert abs(power.mean() / variance - 1) < 0.02


def test_xavier_bound_and_variance():
    fans = FanPair(50, 30)
    w = xavier_init((SAMPLES, 1), fans, np.random.default_rng(2))
    a = xavier_bound(fans)
    assert np.abs(w.data).max() <= a * (1 + 1e-6)
    assert abs(w.re.astype(np.float64).var() / (a * a / 3) - 1) < 0.05


@pytest.mark.parametrize('mode', ['glorot', 'he'])
def test_rayleigh_amplitude_and_phase(mode):
    fans = FanPair(72, 144)
    w = rayleigh_init((SAMPLES, 1), fans, np.random.default_rng(3), mode)
    z = (w.re.astype(np.float64) + 1j * w.im.astype(np.float64)).ravel()
    sigma = rayleigh_sigma(fans, mode)
    assert stats.kstest(np.abs(z), 'rayleigh', args=(0, sigma)).pvalue > 0.01
    assert stats.kstest(np.angle(z), 'uniform', args=(-np.pi, 2 * np.pi)).pvalue > 0.01


def test_rayleigh_sigma_modes():
    fans = FanPair(9, 27)
    assert rayleigh_sigma(fans, 'glorot') == pytest.approx(1 / 6)
    assert rayleigh_sigma(fans, 'he') == pytest.approx(1 / 3)


def test_same_seed_same_weights():
    fans = FanPair(9, 9)
    for kind in ('bcw', 'xavier', 'rayleigh'):
        policy = InitPolicy(kind, seed=7)
        a = initialize(policy, (4, 1, 3, 3), fans, policy.generator())
        b = initialize(policy, (4, 1, 3, 3), fans, policy.generator())
        assert_array_equal(a.data, b.data)
        assert a.data.shape == (4, 2, 3, 3)


def test_real_init_takes_real_component():
    fans = FanPair(9, 18)
    policy = InitPolicy('bcw', seed=5)
    full = initialize(policy, (2, 1, 3, 3), fans, 5)
    real = initialize_real(policy, (2, 1, 3, 3), fans, 5)
    assert_array_equal(real, full.re)
    assert real.dtype == np.float32
