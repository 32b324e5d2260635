"""
Adam over latent weights and the step learning-rate schedule.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from errors import ConfigError, NonConvergenceError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    lr_decay: float = 0.2
    milestones: tuple = (80, 150, 200, 240, 270)
    epochs: int = 5
    batch_size: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-08
    latent_clip: float = 1.0
    threads: int = 1
    prefetch: int = 0
    metrics_file: str = 'metrics.jsonl'
    checkpoint: str = 'checkpoint.npz'

    def __post_init__(self):
        object.__setattr__(self, 'milestones', tuple(int(m) for m in self.milestones))
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {list(self.milestones)}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"epochs >= 0 and batch_size >= 1 required, got {self.epochs}, {self.batch_size}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("Adam needs 0 <= beta1, beta2 < 1 and eps > 0")
        if self.latent_clip <= 0 or self.threads < 1 or self.prefetch < 0:
            raise ConfigError("latent_clip > 0, threads >= 1 and prefetch >= 0 required")

    def to_dict(self):
        d = asdict(self)
        d['milestones'] = list(self.milestones)
        return d


def lr_at(epoch, config):
    """Learning rate for a 0-based epoch: lr * decay^(milestones passed)"""
    if epoch < 0:
        raise ConfigError(f"epoch must be non-negative, got {epoch}")
    passed = sum(1 for m in config.milestones if epoch >= m)
    return config.lr * config.lr_decay ** passed


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ensure(self, params):
        for p in params:
            if p.name not in self.m:
                self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)


def adam_step(params, state, config, lr=None):
    """
    One Adam update with bias correction on every parameter with a gradient;
    latent weights of binary layers are clamped to [-latent_clip, latent_clip] afterwards.
    """
    lr = config.lr if lr is None else lr
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.value.shape:
            raise ShapeError(f"{p.name}: gradient shape {p.grad.shape} != parameter shape {p.value.shape}")
        if not np.all(np.isfinite(p.grad)):
            raise NonConvergenceError(f"non-finite gradient in {p.name} at step {state.step + 1}")
    state.ensure(params)
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for p in params:
        if p.grad is None:
            continue
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + config.adam_eps)
        p.value -= update.astype(p.value.dtype)
        if p.binary:
            np.clip(p.value, -config.latent_clip, config.latent_clip, out=p.value)
    return state
