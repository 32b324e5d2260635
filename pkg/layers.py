"""
Differentiable BCNN building blocks with explicit forward and backward rules.

Every layer caches what its backward needs during forward; calling backward
without that cache raises StateError. Parameter gradients are written to
Parameter.grad, the returned value is the gradient w.r.t. the layer input.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from bitpack import PackedComplexMatrix, binary_complex_gemm, binary_gemm, pack_bool_rows, unpack_bool_rows
from ctensor import (ComplexTensor, Im2ColPlan, check_finite, col2im, float_dtype, im2row,
                     nchw_to_rows, rows_to_nchw)
from errors import DomainError, ShapeError, StateError
from weight_init import FanPair, InitPolicy, initialize, initialize_real

logger = logging.getLogger(__name__)


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: Optional[np.ndarray] = None
    binary: bool = False        # latent weight of a binary layer, clamped after each optimizer step

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


def _data(x):
    return x.data if isinstance(x, ComplexTensor) else x


def _like(x, data):
    return ComplexTensor(data) if isinstance(x, ComplexTensor) else data


def _signs(x):
    return np.where(x >= 0, 1, -1).astype(float_dtype())


class Layer:
    kind = 'layer'

    def __init__(self, name=''):
        self.name = name
        self.training = True
        self._cache = None

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def own_parameters(self):
        return []

    def own_buffers(self):
        return {}

    def children(self):
        return []

    def parameters(self):
        params = list(self.own_parameters())
        for child in self.children():
            params.extend(child.parameters())
        return params

    def buffers(self):
        buffers = {f"{self.name}.{key}": value for key, value in self.own_buffers().items()}
        for child in self.children():
            buffers.update(child.buffers())
        return buffers

    def layers(self):
        """This layer and every descendant, depth first"""
        found = [self]
        for child in self.children():
            found.extend(child.layers())
        return found

    def train(self, mode=True):
        for layer in self.layers():
            layer.training = mode
        return self

    def eval(self):
        return self.train(False)

    def _require_cache(self):
        if self._cache is None:
            raise StateError(f"{self.name or self.kind}: backward called without a forward cache")
        cache = self._cache
        self._cache = None
        return cache

    def __call__(self, x):
        return self.forward(x)


class Sequential(Layer):
    kind = 'sequential'

    def __init__(self, layers, name=''):
        super().__init__(name)
        self.items = list(layers)

    def children(self):
        return self.items

    def forward(self, x):
        for layer in self.items:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.items):
            grad = layer.backward(grad)
        return grad


class SignBinarize(Layer):
    """sign(r) with sign(0) = +1; STE backward passes the gradient where |r| < t_clip"""
    kind = 'sign'

    def __init__(self, t_clip=1.0, name=''):
        super().__init__(name)
        if t_clip <= 0:
            raise ValueError(f"t_clip must be positive, got {t_clip}")
        self.t_clip = t_clip

    def forward(self, x):
        latent = _data(x)
        check_finite(latent, self.name or self.kind)
        self._cache = latent
        return _like(x, _signs(latent))

    def backward(self, grad):
        latent = self._require_cache()
        return _like(grad, _data(grad) * (np.abs(latent) < self.t_clip))


class QuadrantBinarize(SignBinarize):
    """Maps z to the binary complex value of its quadrant: sign(x) + i sign(y)"""
    kind = 'quadrant_binarize'

    def forward(self, z):
        if not isinstance(z, ComplexTensor):
            raise ShapeError("quadrant binarization expects a ComplexTensor")
        return super().forward(z)


class ReLU(Layer):
    """Pointwise ReLU; on a ComplexTensor it acts on each component"""
    kind = 'relu'

    def forward(self, x):
        data = _data(x)
        self._cache = data > 0
        return _like(x, data * self._cache)

    def backward(self, grad):
        mask = self._require_cache()
        return _like(grad, _data(grad) * mask)


def complex_rows_forward(rx, ry, a, b):
    """c = x A^T - y B^T, d = x B^T + y A^T over row-lowered operands"""
    return rx @ a.T - ry @ b.T, rx @ b.T + ry @ a.T


def complex_rows_backward(dc, dd, rx, ry, a, b):
    dx = dc @ a + dd @ b
    dy = dd @ a - dc @ b
    da = dc.T @ rx + dd.T @ ry
    db = dd.T @ rx - dc.T @ ry
    return dx, dy, da, db


class _ConvBase(Layer):

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, name=''):
        super().__init__(name)
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self._plans = {}

    @property
    def fans(self):
        return FanPair.for_conv(self.c_in, self.c_out, self.kernel)

    def plan_for(self, shape):
        key = tuple(shape[1:])
        if key[0] != self.c_in:
            raise ShapeError(f"{self.name or self.kind}: expected {self.c_in} input channels, got {key[0]}")
        if key not in self._plans:
            self._plans[key] = Im2ColPlan.build(self.c_in, key[1], key[2], self.kernel, self.stride, self.padding)
        return self._plans[key]

    def own_parameters(self):
        return [self.weight, self.bias]


class ComplexConv2d(_ConvBase):
    """Full-precision complex convolution (first layer, FP shortcuts, DNN baseline)"""
    kind = 'complex_conv'

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, policy=None, rng=None, name=''):
        super().__init__(c_in, c_out, kernel, stride, padding, name)
        policy = policy or InitPolicy()
        weight = initialize(policy, (c_out, c_in, kernel, kernel), self.fans, rng)
        self.weight = Parameter(f"{name}.weight", weight.data)
        self.bias = Parameter(f"{name}.bias", np.zeros(2 * c_out, dtype=float_dtype()))

    def weight_parts(self):
        w = ComplexTensor(self.weight.value)
        return w.re.reshape(self.c_out, -1), w.im.reshape(self.c_out, -1)

    def forward(self, z):
        plan = self.plan_for(z.shape)
        rx = im2row(z.re, plan)
        ry = im2row(z.im, plan)
        a, b = self.weight_parts()
        c, d = complex_rows_forward(rx, ry, a, b)
        c = c + self.bias.value[:self.c_out]
        d = d + self.bias.value[self.c_out:]
        self._cache = (plan, z.shape[0], rx, ry, a, b)
        return ComplexTensor.from_parts(rows_to_nchw(c, z.shape[0], plan), rows_to_nchw(d, z.shape[0], plan))

    def backward(self, grad):
        plan, batch, rx, ry, a, b = self._require_cache()
        dc = nchw_to_rows(grad.re)
        dd = nchw_to_rows(grad.im)
        drx, dry, da, db = complex_rows_backward(dc, dd, rx, ry, a, b)
        self.weight.grad = np.concatenate(
            [da.reshape(self.c_out, self.c_in, self.kernel, self.kernel),
             db.reshape(self.c_out, self.c_in, self.kernel, self.kernel)], axis=1).astype(self.weight.value.dtype)
        self.bias.grad = np.concatenate([dc.sum(axis=0), dd.sum(axis=0)]).astype(self.bias.value.dtype)
        return ComplexTensor.from_parts(col2im(drx, plan, batch), col2im(dry, plan, batch))


class BinaryComplexConv2d(_ConvBase):
    """
    Binary complex convolution. Forward packs sign(input) and sign(latent weight)
    and runs the xnor-popcount complex GEMM; zero padding is applied before the sign,
    so padded positions enter as +1+i. Latent weights stay full precision.
    """
    kind = 'binary_complex_conv'

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, t_clip=1.0, policy=None, rng=None, name=''):
        super().__init__(c_in, c_out, kernel, stride, padding, name)
        policy = policy or InitPolicy()
        self.t_clip = t_clip
        weight = initialize(policy, (c_out, c_in, kernel, kernel), self.fans, rng)
        self.weight = Parameter(f"{name}.weight", weight.data, binary=True)
        self.bias = Parameter(f"{name}.bias", np.zeros(2 * c_out, dtype=float_dtype()))

    def packed_weight(self):
        w = ComplexTensor(self.weight.value)
        return PackedComplexMatrix.from_dense(w.re.reshape(self.c_out, -1), w.im.reshape(self.c_out, -1))

    def forward(self, z):
        if not isinstance(z, ComplexTensor):
            raise ShapeError(f"{self.name or self.kind}: expected a ComplexTensor input")
        if not np.all(np.abs(z.data) == 1):
            raise DomainError(f"{self.name or self.kind}: binary path requires ±1 inputs, binarize first")
        plan = self.plan_for(z.shape)
        rx = im2row(z.re, plan)
        ry = im2row(z.im, plan)
        packed_x = PackedComplexMatrix(pack_bool_rows(rx >= 0), pack_bool_rows(ry >= 0), rx.shape[0], plan.rows)
        c, d = binary_complex_gemm(packed_x, self.packed_weight())
        dtype = self.bias.value.dtype
        c = c.astype(dtype) + self.bias.value[:self.c_out]
        d = d.astype(dtype) + self.bias.value[self.c_out:]
        self._cache = (plan, z.shape[0], packed_x)
        return ComplexTensor.from_parts(rows_to_nchw(c, z.shape[0], plan), rows_to_nchw(d, z.shape[0], plan))

    def backward(self, grad):
        plan, batch, packed_x = self._require_cache()
        dtype = self.weight.value.dtype
        w = ComplexTensor(self.weight.value)
        a = _signs(w.re.reshape(self.c_out, -1)).astype(dtype)
        b = _signs(w.im.reshape(self.c_out, -1)).astype(dtype)
        rx, ry = (part.astype(dtype) for part in packed_x.unpack())
        dc = nchw_to_rows(grad.re)
        dd = nchw_to_rows(grad.im)
        drx, dry, da, db = complex_rows_backward(dc, dd, rx, ry, a, b)
        shape = (self.c_out, self.c_in, self.kernel, self.kernel)
        # STE on the latent weights, same clip window as activations
        ste = np.abs(self.weight.value) < self.t_clip
        self.weight.grad = (np.concatenate([da.reshape(shape), db.reshape(shape)], axis=1) * ste).astype(dtype)
        self.bias.grad = np.concatenate([dc.sum(axis=0), dd.sum(axis=0)]).astype(dtype)
        return ComplexTensor.from_parts(col2im(drx, plan, batch), col2im(dry, plan, batch))


class Conv2d(_ConvBase):
    """Full-precision real convolution (generator, BNN/DNN baselines)"""
    kind = 'conv'

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, policy=None, rng=None, zero_init=False, name=''):
        super().__init__(c_in, c_out, kernel, stride, padding, name)
        policy = policy or InitPolicy()
        shape = (c_out, c_in, kernel, kernel)
        if zero_init:
            weight = np.zeros(shape, dtype=float_dtype())
        else:
            weight = initialize_real(policy, shape, self.fans, rng)
        self.weight = Parameter(f"{name}.weight", weight)
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out, dtype=float_dtype()))

    def forward(self, x):
        plan = self.plan_for(x.shape)
        rows = im2row(x, plan)
        w = self.weight.value.reshape(self.c_out, -1)
        out = rows @ w.T + self.bias.value
        self._cache = (plan, x.shape[0], rows, w)
        return rows_to_nchw(out, x.shape[0], plan)

    def backward(self, grad):
        plan, batch, rows, w = self._require_cache()
        g = nchw_to_rows(grad)
        self.weight.grad = (g.T @ rows).reshape(self.weight.value.shape).astype(self.weight.value.dtype)
        self.bias.grad = g.sum(axis=0).astype(self.bias.value.dtype)
        return col2im(g @ w, plan, batch)


class BinaryConv2d(_ConvBase):
    """Real BNN convolution on one packed bit plane"""
    kind = 'binary_conv'

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, t_clip=1.0, policy=None, rng=None, name=''):
        super().__init__(c_in, c_out, kernel, stride, padding, name)
        policy = policy or InitPolicy()
        self.t_clip = t_clip
        weight = initialize_real(policy, (c_out, c_in, kernel, kernel), self.fans, rng)
        self.weight = Parameter(f"{name}.weight", weight, binary=True)
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out, dtype=float_dtype()))

    def forward(self, x):
        if not np.all(np.abs(x) == 1):
            raise DomainError(f"{self.name or self.kind}: binary path requires ±1 inputs, binarize first")
        plan = self.plan_for(x.shape)
        rows = im2row(x, plan)
        packed_x = pack_bool_rows(rows >= 0)
        packed_w = pack_bool_rows(self.weight.value.reshape(self.c_out, -1) >= 0)
        out = binary_gemm(packed_x, packed_w, plan.rows).astype(self.bias.value.dtype) + self.bias.value
        self._cache = (plan, x.shape[0], packed_x)
        return rows_to_nchw(out, x.shape[0], plan)

    def backward(self, grad):
        plan, batch, packed_x = self._require_cache()
        dtype = self.weight.value.dtype
        rows = np.where(unpack_bool_rows(packed_x, plan.rows), 1, -1).astype(dtype)
        w = _signs(self.weight.value.reshape(self.c_out, -1)).astype(dtype)
        g = nchw_to_rows(grad)
        ste = np.abs(self.weight.value) < self.t_clip
        self.weight.grad = ((g.T @ rows).reshape(self.weight.value.shape) * ste).astype(dtype)
        self.bias.grad = g.sum(axis=0).astype(dtype)
        return col2im(g @ w, plan, batch)


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2, per channel; on a ComplexTensor this is per component, never by modulus"""
    kind = 'maxpool'

    def forward(self, x):
        data = _data(x)
        if data.ndim != 4:
            raise ShapeError(f"max pooling expects NCHW input, got {data.shape}")
        n, c, h, w = data.shape
        oh, ow = h // 2, w // 2
        if oh == 0 or ow == 0:
            raise ShapeError(f"cannot 2x2-pool a {h}x{w} map")
        windows = data[:, :, :2 * oh, :2 * ow].reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
        windows = windows.reshape(n, c, oh, ow, 4)
        arg = windows.argmax(axis=-1)
        self._cache = (data.shape, arg)
        return _like(x, np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0])

    def backward(self, grad):
        shape, arg = self._require_cache()
        g = _data(grad)
        n, c, h, w = shape
        oh, ow = h // 2, w // 2
        windows = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
        np.put_along_axis(windows, arg[..., None], g[..., None], axis=-1)
        out = np.zeros(shape, dtype=g.dtype)
        out[:, :, :2 * oh, :2 * ow] = windows.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, 2 * oh, 2 * ow)
        return _like(grad, out)


class GlobalAvgPool(Layer):
    """(N, C, H, W) -> (N, C); a complex input keeps its real-first channel layout"""
    kind = 'global_avgpool'

    def forward(self, x):
        data = _data(x)
        if data.ndim != 4:
            raise ShapeError(f"global average pooling expects NCHW input, got {data.shape}")
        self._cache = data.shape
        return _like(x, data.mean(axis=(2, 3)))

    def backward(self, grad):
        shape = self._require_cache()
        g = _data(grad)
        out = np.broadcast_to(g[:, :, None, None] / (shape[2] * shape[3]), shape).astype(g.dtype)
        return _like(grad, out)


class RealLinear(Layer):
    """Full-precision real classifier; M complex features enter as 2M real features"""
    kind = 'linear'

    def __init__(self, in_features, out_features, policy=None, rng=None, name=''):
        super().__init__(name)
        policy = policy or InitPolicy()
        self.in_features = in_features
        self.out_features = out_features
        weight = initialize_real(policy, (out_features, in_features), FanPair(in_features, out_features), rng)
        self.weight = Parameter(f"{name}.weight", weight)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features, dtype=float_dtype()))

    def own_parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        features = _data(x)
        if features.ndim != 2 or features.shape[1] != self.in_features:
            raise ShapeError(f"{self.name or self.kind}: expected (N, {self.in_features}) features, got {features.shape}")
        self._cache = (x, features)
        return features @ self.weight.value.T + self.bias.value

    def backward(self, grad):
        x, features = self._require_cache()
        self.weight.grad = (grad.T @ features).astype(self.weight.value.dtype)
        self.bias.grad = grad.sum(axis=0).astype(self.bias.value.dtype)
        return _like(x, grad @ self.weight.value)


class ComplexInputGenerator(Layer):
    """
    Lifts a real image to a complex one: re = x, im = x + conv2(relu(bn(conv1(x)))).
    Both convs are 1x1 with C -> C channels; conv2 starts at zero so im == x at init.
    """
    kind = 'generator'

    def __init__(self, channels=3, policy=None, rng=None, name='generator'):
        super().__init__(name)
        from normalization import BatchNorm
        self.channels = channels
        self.conv1 = Conv2d(channels, channels, 1, policy=policy, rng=rng, name=f"{name}.conv1")
        self.bn = BatchNorm(channels, name=f"{name}.bn")
        self.relu = ReLU(name=f"{name}.relu")
        self.conv2 = Conv2d(channels, channels, 1, zero_init=True, name=f"{name}.conv2")
        self.branch = Sequential([self.conv1, self.bn, self.relu, self.conv2], name=f"{name}.branch")

    def children(self):
        return [self.branch]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"generator expects (N, {self.channels}, H, W), got {x.shape}")
        self._cache = True
        return ComplexTensor.from_parts(x, x + self.branch.forward(x))

    def backward(self, grad):
        self._require_cache()
        return grad.re + grad.im + self.branch.backward(np.ascontiguousarray(grad.im))
