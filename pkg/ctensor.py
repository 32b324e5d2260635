"""
Dense real and complex tensors, NCHW layout.

A RealTensor is a numpy array of shape (N, C, H, W) or (N, F).
A ComplexTensor with M channels owns one real array with 2M channels:
the first M hold the real parts, the last M the imaginary parts.
Convolutions are lowered to GEMM through an Im2ColPlan gather table.
"""

from dataclasses import dataclass

import numpy as np

from errors import DomainError, ShapeError

_FLOAT_DTYPE = [np.float32]


def float_dtype():
    return _FLOAT_DTYPE[0]


def set_float_dtype(dtype):
    """Switch activations and latent weights between float32 (training) and float64 (gradient checks)"""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported float dtype {dtype}")
    previous = _FLOAT_DTYPE[0]
    _FLOAT_DTYPE[0] = dtype
    return previous


def check_finite(x, what='tensor'):
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{what} contains non-finite values")


def channel_concat(re, im):
    """(N, M, ...) x 2 -> (N, 2M, ...), real parts first"""
    if re.shape != im.shape:
        raise ShapeError(f"real and imaginary halves differ: {re.shape} vs {im.shape}")
    return np.concatenate([re, im], axis=1)


def channel_split(x):
    """(N, 2M, ...) -> (re, im) views sharing memory with x"""
    if x.ndim < 2 or x.shape[1] % 2:
        raise ShapeError(f"channel split needs an even channel count, got shape {x.shape}")
    m = x.shape[1] // 2
    return x[:, :m], x[:, m:]


class ComplexTensor:
    __slots__ = ('data',)

    def __init__(self, data):
        data = np.asarray(data)
        if data.ndim not in (2, 4) or data.shape[1] % 2:
            raise ShapeError(f"complex tensor storage must be (N, 2M, ...) with even 2M, got {data.shape}")
        self.data = data

    @classmethod
    def from_parts(cls, re, im):
        return cls(channel_concat(np.asarray(re), np.asarray(im)))

    @classmethod
    def from_complex(cls, z, dtype=None):
        dtype = dtype or float_dtype()
        return cls.from_parts(np.real(z).astype(dtype), np.imag(z).astype(dtype))

    @classmethod
    def zeros(cls, shape, dtype=None):
        shape = (shape[0], 2 * shape[1]) + tuple(shape[2:])
        return cls(np.zeros(shape, dtype=dtype or float_dtype()))

    @property
    def channels(self):
        return self.data.shape[1] // 2

    @property
    def re(self):
        return self.data[:, :self.channels]

    @property
    def im(self):
        return self.data[:, self.channels:]

    @property
    def shape(self):
        return self.re.shape

    @property
    def dtype(self):
        return self.data.dtype

    def copy(self):
        return ComplexTensor(self.data.copy())

    def astype(self, dtype):
        return ComplexTensor(self.data.astype(dtype))

    def conj(self):
        return ComplexTensor.from_parts(self.re, -self.im)

    def to_complex(self):
        return self.re + 1j * self.im

    def __add__(self, other):
        if not isinstance(other, ComplexTensor):
            return NotImplemented
        if other.data.shape != self.data.shape:
            raise ShapeError(f"cannot add complex tensors {self.shape} and {other.shape}")
        return ComplexTensor(self.data + other.data)

    def __repr__(self):
        return f"ComplexTensor(shape={self.shape}, dtype={self.dtype})"


def complex_elementwise_mul(a, b):
    """(a.re b.re - a.im b.im) + i (a.re b.im + a.im b.re), numpy broadcasting on the halves"""
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from e
    re = a.re * b.re - a.im * b.im
    im = a.re * b.im + a.im * b.re
    return ComplexTensor.from_parts(re, im)


@dataclass(frozen=True)
class Im2ColPlan:
    """
    Gather table lowering a k x k convolution to GEMM.
    index[r, l] addresses the flattened (C*H*W) sample for kernel row r = (c, ki, kj)
    and output position l; padded positions address the zero sentinel at C*H*W.
    """
    channels: int
    height: int
    width: int
    kernel: int
    stride: int
    padding: int
    out_height: int
    out_width: int
    index: np.ndarray

    @classmethod
    def build(cls, channels, height, width, kernel, stride=1, padding=0):
        out_h = (height + 2 * padding - kernel) // stride + 1
        out_w = (width + 2 * padding - kernel) // stride + 1
        if kernel < 1 or stride < 1 or padding < 0 or out_h < 1 or out_w < 1:
            raise ShapeError(
                f"kernel {kernel}, stride {stride}, padding {padding} do not fit a {height}x{width} input")
        c_idx = np.repeat(np.arange(channels), kernel * kernel)
        ki = np.tile(np.repeat(np.arange(kernel), kernel), channels)
        kj = np.tile(np.arange(kernel), kernel * channels)
        oy = np.repeat(np.arange(out_h), out_w)
        ox = np.tile(np.arange(out_w), out_h)
        iy = ki[:, None] + stride * oy[None, :] - padding
        ix = kj[:, None] + stride * ox[None, :] - padding
        valid = (iy >= 0) & (iy < height) & (ix >= 0) & (ix < width)
        sentinel = channels * height * width
        index = np.where(valid, c_idx[:, None] * height * width + iy * width + ix, sentinel)
        return cls(channels, height, width, kernel, stride, padding, out_h, out_w, index.astype(np.int64))

    @property
    def rows(self):
        return self.channels * self.kernel * self.kernel

    @property
    def positions(self):
        return self.out_height * self.out_width

    @property
    def sentinel(self):
        return self.channels * self.height * self.width

    def check_input(self, x):
        if x.ndim != 4 or x.shape[1:] != (self.channels, self.height, self.width):
            raise ShapeError(
                f"plan expects (N, {self.channels}, {self.height}, {self.width}), got {x.shape}")


def im2row(x, plan, pad_value=0.0):
    """(N, C, H, W) -> (N * L, K): one row per output position, zeros (or pad_value) in the padding"""
    plan.check_input(x)
    n = x.shape[0]
    flat = x.reshape(n, plan.sentinel)
    pad = np.full((n, 1), pad_value, dtype=x.dtype)
    padded = np.concatenate([flat, pad], axis=1)
    return padded[:, plan.index.T].reshape(n * plan.positions, plan.rows)


def im2col(x, plan):
    """(N, C, H, W) -> (k*k*C, N * H_out * W_out) matrix"""
    return im2row(x, plan).T


def col2im(rows, plan, batch):
    """Scatter-add (N * L, K) row gradients back to (N, C, H, W); padding contributions are dropped"""
    if rows.shape != (batch * plan.positions, plan.rows):
        raise ShapeError(f"expected rows {(batch * plan.positions, plan.rows)}, got {rows.shape}")
    width = plan.sentinel + 1
    offsets = np.arange(batch, dtype=np.int64)[:, None, None] * width
    target = (plan.index.T[None, :, :] + offsets).ravel()
    summed = np.bincount(target, weights=rows.reshape(-1), minlength=batch * width)
    return summed.reshape(batch, width)[:, :-1].reshape(
        batch, plan.channels, plan.height, plan.width).astype(rows.dtype)


def rows_to_nchw(out, batch, plan):
    """(N * L, C_out) GEMM output -> (N, C_out, H_out, W_out)"""
    c_out = out.shape[1]
    return out.reshape(batch, plan.out_height, plan.out_width, c_out).transpose(0, 3, 1, 2)


def nchw_to_rows(grad):
    n, c, h, w = grad.shape
    return grad.transpose(0, 2, 3, 1).reshape(n * h * w, c)


def conv2d(x, weight, bias, plan):
    """Direct float convolution via im2row; weight is (C_out, C_in, k, k)"""
    rows = im2row(x, plan)
    out = rows @ weight.reshape(weight.shape[0], -1).T
    if bias is not None:
        out = out + bias
    return rows_to_nchw(out, x.shape[0], plan)
