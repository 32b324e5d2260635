"""
Complex weight initialization: BCW, Xavier (per component) and Rayleigh.

BCW draws each component from N(0, 1/(fan_in + fan_out)): the forward
constraint gives 1/(2 fan_in), the backward one 1/(2 fan_out), and the
harmonic compromise of the two is 1/(fan_in + fan_out).
"""

import logging
from dataclasses import dataclass

import numpy as np

from ctensor import ComplexTensor, float_dtype
from errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

INIT_POLICIES = ('bcw', 'xavier', 'rayleigh')
RAYLEIGH_MODES = ('glorot', 'he')


@dataclass(frozen=True)
class FanPair:
    fan_in: int
    fan_out: int

    def __post_init__(self):
        if self.fan_in <= 0 or self.fan_out <= 0:
            raise ShapeError(f"fans must be positive, got ({self.fan_in}, {self.fan_out})")

    @classmethod
    def for_conv(cls, c_in, c_out, kernel):
        """fan_in = k^2 C_in, fan_out = k^2 C_out, counted in complex channels"""
        return cls(kernel * kernel * c_in, kernel * kernel * c_out)

    @property
    def total(self):
        return self.fan_in + self.fan_out


@dataclass(frozen=True)
class InitPolicy:
    kind: str = 'bcw'
    seed: int = 0
    rayleigh_mode: str = 'glorot'

    def __post_init__(self):
        if self.kind not in INIT_POLICIES:
            raise ConfigError(f"unknown init policy '{self.kind}', expected one of {INIT_POLICIES}")
        if self.rayleigh_mode not in RAYLEIGH_MODES:
            raise ConfigError(f"unknown rayleigh mode '{self.rayleigh_mode}', expected one of {RAYLEIGH_MODES}")

    def generator(self):
        return np.random.default_rng(self.seed)


def bcw_variance(fans):
    return 1.0 / fans.total


def xavier_bound(fans):
    return float(np.sqrt(6.0 / fans.total))


def rayleigh_sigma(fans, mode='glorot'):
    if mode == 'he':
        return 1.0 / np.sqrt(fans.fan_in)
    return 1.0 / np.sqrt(fans.total)


def bcw_init(shape, fans, rng):
    rng = np.random.default_rng(rng)
    std = np.sqrt(bcw_variance(fans))
    re = rng.normal(0.0, std, size=shape)
    im = rng.normal(0.0, std, size=shape)
    return ComplexTensor.from_parts(re.astype(float_dtype()), im.astype(float_dtype()))


def xavier_init(shape, fans, rng):
    """Glorot uniform on each component: U(-a, a), a = sqrt(6 / (fan_in + fan_out))"""
    rng = np.random.default_rng(rng)
    a = xavier_bound(fans)
    re = rng.uniform(-a, a, size=shape)
    im = rng.uniform(-a, a, size=shape)
    return ComplexTensor.from_parts(re.astype(float_dtype()), im.astype(float_dtype()))


def rayleigh_init(shape, fans, rng, mode='glorot'):
    """Polar init: |W| ~ Rayleigh(sigma), phase ~ U(-pi, pi)"""
    if mode not in RAYLEIGH_MODES:
        raise ConfigError(f"unknown rayleigh mode '{mode}'")
    rng = np.random.default_rng(rng)
    sigma = rayleigh_sigma(fans, mode)
    modulus = rng.rayleigh(scale=sigma, size=shape)
    phase = rng.uniform(-np.pi, np.pi, size=shape)
    re = modulus * np.cos(phase)
    im = modulus * np.sin(phase)
    return ComplexTensor.from_parts(re.astype(float_dtype()), im.astype(float_dtype()))


def initialize(policy, shape, fans, rng):
    if policy.kind == 'bcw':
        return bcw_init(shape, fans, rng)
    if policy.kind == 'xavier':
        return xavier_init(shape, fans, rng)
    return rayleigh_init(shape, fans, rng, policy.rayleigh_mode)


def initialize_real(policy, shape, fans, rng):
    """Real-valued layers (BNN baseline, classifier head) take the real component of the policy's draw"""
    return np.ascontiguousarray(initialize(policy, shape, fans, rng).re)
