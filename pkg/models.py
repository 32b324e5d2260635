"""
Declarative model construction for BCNN and its BNN/DNN baselines.

Graph: generator (complex only) -> full-precision stem conv -> binary blocks
-> global average pool -> full-precision real linear head.
Every binary conv unit runs binarize -> conv -> norm.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ctensor import ComplexTensor
from errors import ConfigError, ShapeError
from layers import (BinaryComplexConv2d, BinaryConv2d, ComplexConv2d, ComplexInputGenerator, Conv2d,
                    GlobalAvgPool, Layer, MaxPool2x2, QuadrantBinarize, RealLinear, ReLU, Sequential,
                    SignBinarize)
from normalization import NORM_KINDS, make_norm
from weight_init import INIT_POLICIES, RAYLEIGH_MODES, InitPolicy

logger = logging.getLogger(__name__)

ARCHS = ('small', 'nin', 'resnet', 'resnete')
BLOCK_TYPES = ('mlpconv', 'basic-residual', 'residual-e')
MIN_SCALED_CHANNELS = 8

_ARCH_WIDTHS = {'small': 2, 'nin': 8}


def scaled_channels(channels, complex_valued=True):
    """Complex width for a real-BNN width: round(c / sqrt(2)), at least 8"""
    if not complex_valued:
        return int(channels)
    return max(MIN_SCALED_CHANNELS, int(np.floor(channels / np.sqrt(2.0) + 0.5)))


@dataclass(frozen=True)
class ModelSpec:
    arch: str = 'small'
    base_channels: tuple = (32, 64)
    num_classes: int = 10
    in_channels: int = 1
    norm: str = 'cgbn'
    init: str = 'bcw'
    rayleigh_mode: str = 'glorot'
    init_seed: int = 0
    complex_valued: bool = True
    binary: bool = True
    blocks_per_stage: int = 2
    t_clip: float = 1.0
    pool_before_norm: bool = False
    full_precision_blocks: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'base_channels', tuple(int(c) for c in self.base_channels))
        object.__setattr__(self, 'full_precision_blocks', tuple(int(i) for i in self.full_precision_blocks))
        self.validate()

    def validate(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch '{self.arch}', expected one of {ARCHS}")
        if self.norm not in NORM_KINDS:
            raise ConfigError(f"unknown norm '{self.norm}', expected one of {NORM_KINDS}")
        if self.init not in INIT_POLICIES:
            raise ConfigError(f"unknown init '{self.init}', expected one of {INIT_POLICIES}")
        if self.rayleigh_mode not in RAYLEIGH_MODES:
            raise ConfigError(f"unknown rayleigh mode '{self.rayleigh_mode}'")
        if not self.base_channels or any(c <= 0 for c in self.base_channels):
            raise ConfigError(f"base_channels must be positive, got {self.base_channels}")
        needed = _ARCH_WIDTHS.get(self.arch)
        if needed and len(self.base_channels) != needed:
            raise ConfigError(f"arch '{self.arch}' needs {needed} base_channels, got {len(self.base_channels)}")
        if self.num_classes < 2 or self.in_channels < 1 or self.blocks_per_stage < 1:
            raise ConfigError("num_classes >= 2, in_channels >= 1 and blocks_per_stage >= 1 are required")
        if self.t_clip <= 0:
            raise ConfigError(f"t_clip must be positive, got {self.t_clip}")

    @property
    def widths(self):
        return [scaled_channels(c, self.complex_valued) for c in self.base_channels]

    def policy(self):
        return InitPolicy(self.init, self.init_seed, self.rayleigh_mode)

    def to_dict(self):
        d = asdict(self)
        d['base_channels'] = list(self.base_channels)
        d['full_precision_blocks'] = list(self.full_precision_blocks)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_config(cls, section):
        """Build from a [model] config section, whose 'complex' key maps to complex_valued"""
        d = dict(section)
        d['complex_valued'] = d.pop('complex')
        return cls(**d)


@dataclass(frozen=True)
class BlockDescriptor:
    type: str
    c_in: int
    c_out: int
    kernel_sizes: tuple = (3,)
    stride: int = 1
    shortcut: str = 'none'      # none | identity | strided
    pool: bool = False

    def __post_init__(self):
        if self.type not in BLOCK_TYPES:
            raise ConfigError(f"unknown block type '{self.type}'")


class Residual(Layer):
    """out = main(x) + shortcut(x); shortcut None is the identity"""
    kind = 'residual'

    def __init__(self, main, shortcut=None, name=''):
        super().__init__(name)
        self.main = main
        self.shortcut = shortcut

    def children(self):
        return [self.main] + ([self.shortcut] if self.shortcut is not None else [])

    def forward(self, x):
        out = self.main.forward(x)
        skip = self.shortcut.forward(x) if self.shortcut is not None else x
        if isinstance(out, ComplexTensor):
            if out.data.shape != skip.data.shape:
                raise ShapeError(f"{self.name}: residual shapes differ {out.shape} vs {skip.shape}")
            return out + skip
        if out.shape != skip.shape:
            raise ShapeError(f"{self.name}: residual shapes differ {out.shape} vs {skip.shape}")
        return out + skip

    def backward(self, grad):
        g_main = self.main.backward(grad)
        g_skip = self.shortcut.backward(grad) if self.shortcut is not None else grad
        return g_main + g_skip


class _Builder:
    """Hands out layer names, RNG draws and unit indices while a graph is assembled"""

    def __init__(self, spec):
        self.spec = spec
        self.policy = spec.policy()
        self.rng = self.policy.generator()
        self.unit_index = 0

    def conv(self, c_in, c_out, kernel, stride, padding, binary, name):
        s = self.spec
        if s.complex_valued:
            if binary:
                return BinaryComplexConv2d(c_in, c_out, kernel, stride, padding, s.t_clip, self.policy, self.rng, name)
            return ComplexConv2d(c_in, c_out, kernel, stride, padding, self.policy, self.rng, name)
        if binary:
            return BinaryConv2d(c_in, c_out, kernel, stride, padding, s.t_clip, self.policy, self.rng, name)
        return Conv2d(c_in, c_out, kernel, stride, padding, self.policy, self.rng, name=name)

    def norm(self, channels, name):
        return make_norm(self.spec.norm, channels, self.spec.complex_valued, name)

    def activation(self, binary, name):
        if not binary:
            return ReLU(name=name)
        if self.spec.complex_valued:
            return QuadrantBinarize(self.spec.t_clip, name=name)
        return SignBinarize(self.spec.t_clip, name=name)

    def unit(self, c_in, c_out, kernel, stride=1, pool=False, name=''):
        """binarize -> conv -> norm, with the pool before or after the norm per pool_before_norm"""
        binary = self.spec.binary and self.unit_index not in self.spec.full_precision_blocks
        self.unit_index += 1
        layers = [
            self.activation(binary, f"{name}.act"),
            self.conv(c_in, c_out, kernel, stride, kernel // 2, binary, f"{name}.conv"),
        ]
        norm = self.norm(c_out, f"{name}.norm")
        if pool and self.spec.pool_before_norm:
            layers += [MaxPool2x2(name=f"{name}.pool"), norm]
        elif pool:
            layers += [norm, MaxPool2x2(name=f"{name}.pool")]
        else:
            layers.append(norm)
        return Sequential(layers, name=name)

    def stem(self, c_out, kernel, pool=False):
        """Full-precision first conv, never binarized"""
        c_in = self.spec.in_channels
        layers = [self.conv(c_in, c_out, kernel, 1, kernel // 2, False, 'stem.conv')]
        norm = self.norm(c_out, 'stem.norm')
        if pool and self.spec.pool_before_norm:
            layers += [MaxPool2x2(name='stem.pool'), norm]
        elif pool:
            layers += [norm, MaxPool2x2(name='stem.pool')]
        else:
            layers.append(norm)
        return Sequential(layers, name='stem')

    def fp_downsample(self, c_in, c_out, stride, name):
        return Sequential([
            self.conv(c_in, c_out, 1, stride, 0, False, f"{name}.conv"),
            self.norm(c_out, f"{name}.norm"),
        ], name=name)

    def block(self, desc, name):
        if desc.type == 'mlpconv':
            units = []
            c_in = desc.c_in
            for i, k in enumerate(desc.kernel_sizes):
                last = i == len(desc.kernel_sizes) - 1
                units.append(self.unit(c_in, desc.c_out, k,
                                       pool=desc.pool and last, name=f"{name}.unit{i}"))
                c_in = desc.c_out
            return Sequential(units, name=name)
        if desc.type == 'basic-residual':
            main = Sequential([
                self.unit(desc.c_in, desc.c_out, 3, desc.stride, name=f"{name}.unit0"),
                self.unit(desc.c_out, desc.c_out, 3, name=f"{name}.unit1"),
            ], name=f"{name}.main")
            shortcut = None
            if desc.shortcut == 'strided':
                # plain ResNet: strided binary 1x1 conv on the shortcut
                shortcut = self.unit(desc.c_in, desc.c_out, 1, desc.stride, name=f"{name}.down")
            return Residual(main, shortcut, name=name)
        # residual-e: a shortcut around every conv, full-precision downsampling
        shortcut = None
        if desc.shortcut == 'strided':
            shortcut = self.fp_downsample(desc.c_in, desc.c_out, desc.stride, f"{name}.down")
        first = Residual(self.unit(desc.c_in, desc.c_out, 3, desc.stride, name=f"{name}.unit0"),
                         shortcut, name=f"{name}.res0")
        second = Residual(self.unit(desc.c_out, desc.c_out, 3, name=f"{name}.unit1"), None, name=f"{name}.res1")
        return Sequential([first, second], name=name)


def block_descriptors(spec):
    """Block sequence (after the stem) for a spec, in complex or real widths"""
    w = spec.widths
    if spec.arch == 'small':
        return [BlockDescriptor('mlpconv', w[0], w[1], (3,), pool=True),
                BlockDescriptor('mlpconv', w[1], w[1], (3,))]
    if spec.arch == 'nin':
        # stem (5x5, w0) opens the first mlpconv; the last 1x1 conv is replaced by the linear head
        return [BlockDescriptor('mlpconv', w[0], w[1], (1,)),
                BlockDescriptor('mlpconv', w[1], w[2], (1,), pool=True),
                BlockDescriptor('mlpconv', w[2], w[3], (5,)),
                BlockDescriptor('mlpconv', w[3], w[4], (1,)),
                BlockDescriptor('mlpconv', w[4], w[5], (1,), pool=True),
                BlockDescriptor('mlpconv', w[5], w[6], (3,)),
                BlockDescriptor('mlpconv', w[6], w[7], (1,))]
    block_type = 'basic-residual' if spec.arch == 'resnet' else 'residual-e'
    descs = []
    c_in = w[0]
    for stage, c_out in enumerate(w):
        for i in range(spec.blocks_per_stage):
            stride = 2 if stage > 0 and i == 0 else 1
            shortcut = 'strided' if stride != 1 or c_in != c_out else 'identity'
            descs.append(BlockDescriptor(block_type, c_in, c_out, (3, 3), stride, shortcut))
            c_in = c_out
    return descs


class BCNNModel(Sequential):
    kind = 'model'

    def __init__(self, spec, layers):
        super().__init__(layers, name='model')
        self.spec = spec

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"model expects (N, {self.spec.in_channels}, H, W) input, got {x.shape}")
        return super().forward(x)

    def binary_layers(self):
        return [layer for layer in self.layers() if layer.kind in ('binary_complex_conv', 'binary_conv')]

    def shortcut_count(self):
        return sum(1 for layer in self.layers() if isinstance(layer, Residual))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state(self):
        """Copies of every parameter and buffer, keyed by name"""
        params = {p.name: p.value.copy() for p in self.parameters()}
        buffers = {name: value.copy() for name, value in self.buffers().items()}
        return params, buffers

    def load_state(self, params, buffers):
        own = {p.name: p for p in self.parameters()}
        own_buffers = self.buffers()
        missing = (set(own) - set(params)) | (set(own_buffers) - set(buffers))
        if missing:
            raise ShapeError(f"state is missing {sorted(missing)[:5]}")
        for name, p in own.items():
            if params[name].shape != p.value.shape:
                raise ShapeError(f"{name}: stored shape {params[name].shape} != model shape {p.value.shape}")
            np.copyto(p.value, params[name])
        for name, value in own_buffers.items():
            np.copyto(value, buffers[name])


def build_model(spec):
    """Assemble the layer graph for a ModelSpec"""
    b = _Builder(spec)
    layers = []
    if spec.complex_valued:
        layers.append(ComplexInputGenerator(spec.in_channels, b.policy, b.rng, name='generator'))
    w = spec.widths
    if spec.arch == 'small':
        layers.append(b.stem(w[0], 3, pool=True))
    elif spec.arch == 'nin':
        layers.append(b.stem(w[0], 5))
    else:
        layers.append(b.stem(w[0], 3))
    for i, desc in enumerate(block_descriptors(spec)):
        layers.append(b.block(desc, f"block{i}"))
    if not spec.binary:
        layers.append(ReLU(name='head.act'))
    layers.append(GlobalAvgPool(name='pool'))
    features = 2 * w[-1] if spec.complex_valued else w[-1]
    layers.append(RealLinear(features, spec.num_classes, b.policy, b.rng, name='head'))
    model = BCNNModel(spec, layers)
    logger.debug(f"built {spec.arch} model: {len(model.layers())} layers, {model.shortcut_count()} shortcuts")
    return model


@dataclass
class ParamCensus:
    full_precision: int = 0
    binary_weights: int = 0          # binarized scalar components (two per complex weight)
    binary_bits: int = 0             # deployed packed size, one bit per component
    buffers: int = 0
    per_layer: dict = field(default_factory=dict)

    @property
    def total_params(self):
        """Latent (training-time) parameter count"""
        return self.full_precision + self.binary_weights

    @property
    def latent_mb(self):
        return self.total_params * 4 / 2 ** 20

    @property
    def total_equivalent_mb(self):
        """Deployed size: packed binary weights plus float32 parameters and running stats"""
        return (self.binary_bits / 8 + (self.full_precision + self.buffers) * 4) / 2 ** 20

    def as_dict(self):
        return {
            'full_precision': self.full_precision,
            'binary_weights': self.binary_weights,
            'binary_bits': self.binary_bits,
            'buffers': self.buffers,
            'total_params': self.total_params,
            'latent_MB': round(self.latent_mb, 6),
            'total_equivalent_MB': round(self.total_equivalent_mb, 6),
        }


def count_params(graph):
    census = ParamCensus()
    for layer in graph.layers():
        own = layer.own_parameters()
        buffers = layer.own_buffers()
        if not own and not buffers:
            continue
        entry = {'full_precision': 0, 'binary_bits': 0}
        for p in own:
            if p.binary:
                census.binary_weights += p.value.size
                census.binary_bits += p.value.size
                entry['binary_bits'] += p.value.size
            else:
                census.full_precision += p.value.size
                entry['full_precision'] += p.value.size
        census.buffers += sum(v.size for v in buffers.values())
        census.per_layer[layer.name] = entry
    return census
