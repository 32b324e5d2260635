"""
Batch normalization variants: real BN, complex Gaussian BN (CGBN) and
covariance-whitening complex BN (CBN).

All variants use population (biased) batch variance and update running
statistics as running = (1 - momentum) * running + momentum * batch.
"""

import functools
import logging

import numpy as np

from ctensor import ComplexTensor, float_dtype
from errors import ConfigError, ShapeError
from layers import Layer, Parameter, _data, _like

logger = logging.getLogger(__name__)

INV_SQRT2 = 1.0 / np.sqrt(2.0)
NORM_KINDS = ('cgbn', 'cbn', 'bn')


def _axes(x):
    if x.ndim == 4:
        return (0, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise ShapeError(f"normalization expects (N, C, H, W) or (N, C), got {x.shape}")


def _expand(v, ndim):
    return v.reshape((1, -1, 1, 1) if ndim == 4 else (1, -1))


def _check_batch(x, training, name):
    if training and x.shape[0] < 2:
        raise ConfigError(f"{name}: training-mode batch statistics need a batch of at least 2, got {x.shape[0]}")


def normalize_backward(dxhat, xhat, inv_std, axes, scale=1.0):
    """
    Backward of xhat = (x - mean) / sqrt(scale * var + eps) with batch statistics:
    dx = inv_std * (dxhat - mean(dxhat) - scale * xhat * mean(dxhat * xhat))
    """
    mean_d = dxhat.mean(axis=axes, keepdims=True)
    mean_dx = (dxhat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (dxhat - mean_d - scale * xhat * mean_dx)


class BatchNorm(Layer):
    """Real BN per channel; on a ComplexTensor the 2M real channels are normalized independently"""
    kind = 'bn'

    def __init__(self, channels, eps=1e-5, momentum=0.1, name=''):
        super().__init__(name)
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        dtype = float_dtype()
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def own_parameters(self):
        return [self.gamma, self.beta]

    def own_buffers(self):
        return {'running_mean': self.running_mean, 'running_var': self.running_var}

    def forward(self, x):
        data = _data(x)
        if data.shape[1] != self.channels:
            raise ShapeError(f"{self.name or self.kind}: expected {self.channels} channels, got {data.shape[1]}")
        axes = _axes(data)
        _check_batch(data, self.training, self.name or self.kind)
        if self.training:
            mean = data.mean(axis=axes)
            var = data.var(axis=axes)
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = _expand(1.0 / np.sqrt(var + self.eps), data.ndim)
        xhat = (data - _expand(mean, data.ndim)) * inv_std
        self._cache = (xhat, inv_std, axes, self.training)
        out = xhat * _expand(self.gamma.value, data.ndim) + _expand(self.beta.value, data.ndim)
        return _like(x, out.astype(data.dtype))

    def backward(self, grad):
        xhat, inv_std, axes, training = self._require_cache()
        g = _data(grad)
        self.gamma.grad = (g * xhat).sum(axis=axes).astype(self.gamma.value.dtype)
        self.beta.grad = g.sum(axis=axes).astype(self.beta.value.dtype)
        dxhat = g * _expand(self.gamma.value, g.ndim)
        if training:
            dx = normalize_backward(dxhat, xhat, inv_std, axes)
        else:
            dx = dxhat * inv_std
        return _like(grad, dx.astype(g.dtype))


class CGBN(Layer):
    """
    Complex Gaussian BN: each component normalized to mean 0, variance 1/2,
        z~ = (z_r - mu_r) / sqrt(2 var_r + eps) + i (z_i - mu_i) / sqrt(2 var_i + eps)
    then out = gamma * z~ + beta with complex multiplication.
    gamma starts at 1/sqrt(2) + i/sqrt(2), beta at 0.
    """
    kind = 'cgbn'

    def __init__(self, channels, eps=1e-5, momentum=0.1, name=''):
        super().__init__(name)
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        dtype = float_dtype()
        # [real parts | imaginary parts] per complex channel
        self.gamma = Parameter(f"{name}.gamma", np.full(2 * channels, INV_SQRT2, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(2 * channels, dtype=dtype))
        self.running_mean = np.zeros(2 * channels, dtype=dtype)
        self.running_var = np.full(2 * channels, 0.5, dtype=dtype)

    def own_parameters(self):
        return [self.gamma, self.beta]

    def own_buffers(self):
        return {'running_mean': self.running_mean, 'running_var': self.running_var}

    def forward(self, z):
        if not isinstance(z, ComplexTensor) or z.channels != self.channels:
            raise ShapeError(f"{self.name or self.kind}: expected a ComplexTensor with {self.channels} channels")
        data = z.data
        axes = _axes(data)
        _check_batch(data, self.training, self.name or self.kind)
        if self.training:
            mean = data.mean(axis=axes)
            var = data.var(axis=axes)
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = _expand(1.0 / np.sqrt(2.0 * var + self.eps), data.ndim)
        xhat = ComplexTensor((data - _expand(mean, data.ndim)) * inv_std)
        self._cache = (xhat, inv_std, axes, self.training)
        m = self.channels
        gr = _expand(self.gamma.value[:m], data.ndim)
        gi = _expand(self.gamma.value[m:], data.ndim)
        br = _expand(self.beta.value[:m], data.ndim)
        bi = _expand(self.beta.value[m:], data.ndim)
        out_r = gr * xhat.re - gi * xhat.im + br
        out_i = gr * xhat.im + gi * xhat.re + bi
        return ComplexTensor.from_parts(out_r.astype(data.dtype), out_i.astype(data.dtype))

    def backward(self, grad):
        xhat, inv_std, axes, training = self._require_cache()
        m = self.channels
        nd = grad.data.ndim
        gr = _expand(self.gamma.value[:m], nd)
        gi = _expand(self.gamma.value[m:], nd)
        dor, doi = grad.re, grad.im
        xr, xi = xhat.re, xhat.im
        dgr = (dor * xr + doi * xi).sum(axis=axes)
        dgi = (doi * xr - dor * xi).sum(axis=axes)
        self.gamma.grad = np.concatenate([dgr, dgi]).astype(self.gamma.value.dtype)
        self.beta.grad = np.concatenate([dor.sum(axis=axes), doi.sum(axis=axes)]).astype(self.beta.value.dtype)
        dxhat = np.concatenate([gr * dor + gi * doi, gr * doi - gi * dor], axis=1)
        if training:
            dz = normalize_backward(dxhat, xhat.data, inv_std, axes, scale=2.0)
        else:
            dz = dxhat * inv_std
        return ComplexTensor(dz.astype(grad.data.dtype))


def inverse_sqrt_2x2(vrr, vii, vri):
    """
    Closed-form inverse square root of the symmetric PSD matrix [[vrr, vri], [vri, vii]]:
    with s = sqrt(det), t = sqrt(trace + 2s), V^(-1/2) = [[vii + s, -vri], [-vri, vrr + s]] / (s t)
    """
    s = np.sqrt(vrr * vii - vri * vri)
    t = np.sqrt(vrr + vii + 2.0 * s)
    inv = 1.0 / (s * t)
    return (vii + s) * inv, (vrr + s) * inv, -vri * inv


class CBN(Layer):
    """
    Covariance-whitening complex BN: z~ = V^(-1/2) (z - E[z]) / sqrt(2), so the whitened
    covariance is I/2, then a 2x2 symmetric affine gamma and a complex shift beta.
    """
    kind = 'cbn'

    def __init__(self, channels, eps=1e-5, momentum=0.1, name=''):
        super().__init__(name)
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        dtype = float_dtype()
        gamma = np.zeros((3, channels), dtype=dtype)
        gamma[0] = INV_SQRT2    # gamma_rr
        gamma[1] = INV_SQRT2    # gamma_ii, row 2 is gamma_ri
        self.gamma = Parameter(f"{name}.gamma", gamma)
        self.beta = Parameter(f"{name}.beta", np.zeros(2 * channels, dtype=dtype))
        self.running_mean = np.zeros(2 * channels, dtype=dtype)
        cov = np.zeros((3, channels), dtype=dtype)
        cov[0] = 1.0
        cov[1] = 1.0
        self.running_cov = cov  # rows: Vrr, Vii, Vri

    def own_parameters(self):
        return [self.gamma, self.beta]

    def own_buffers(self):
        return {'running_mean': self.running_mean, 'running_cov': self.running_cov}

    def forward(self, z):
        if not isinstance(z, ComplexTensor) or z.channels != self.channels:
            raise ShapeError(f"{self.name or self.kind}: expected a ComplexTensor with {self.channels} channels")
        data = z.data
        nd = data.ndim
        axes = _axes(data)
        _check_batch(data, self.training, self.name or self.kind)
        if self.training:
            mean = data.mean(axis=axes)
            centered = ComplexTensor(data - _expand(mean, nd))
            ur, ui = centered.re, centered.im
            cov = np.stack([(ur * ur).mean(axis=axes), (ui * ui).mean(axis=axes), (ur * ui).mean(axis=axes)])
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_cov *= 1.0 - self.momentum
            self.running_cov += self.momentum * cov
        else:
            mean, cov = self.running_mean, self.running_cov
            centered = ComplexTensor(data - _expand(mean, nd))
            ur, ui = centered.re, centered.im
        vrr, vii, vri = cov[0] + self.eps, cov[1] + self.eps, cov[2]
        wrr, wii, wri = inverse_sqrt_2x2(vrr, vii, vri)
        e = functools.partial(_expand, ndim=nd)
        xr = (e(wrr) * ur + e(wri) * ui) * INV_SQRT2
        xi = (e(wri) * ur + e(wii) * ui) * INV_SQRT2
        self._cache = (ur, ui, xr, xi, (vrr, vii, vri), (wrr, wii, wri), axes, self.training)
        grr, gii, gri = (e(row) for row in self.gamma.value)
        m = self.channels
        out_r = grr * xr + gri * xi + e(self.beta.value[:m])
        out_i = gri * xr + gii * xi + e(self.beta.value[m:])
        return ComplexTensor.from_parts(out_r.astype(data.dtype), out_i.astype(data.dtype))

    def backward(self, grad):
        ur, ui, xr, xi, v, w, axes, training = self._require_cache()
        nd = grad.data.ndim
        e = functools.partial(_expand, ndim=nd)
        dor, doi = grad.re, grad.im
        grr, gii, gri = (e(row) for row in self.gamma.value)
        self.gamma.grad = np.stack([
            (dor * xr).sum(axis=axes),
            (doi * xi).sum(axis=axes),
            (dor * xi + doi * xr).sum(axis=axes),
        ]).astype(self.gamma.value.dtype)
        self.beta.grad = np.concatenate([dor.sum(axis=axes), doi.sum(axis=axes)]).astype(self.beta.value.dtype)

        dxr = grr * dor + gri * doi
        dxi = gri * dor + gii * doi
        wrr, wii, wri = w
        dur = (e(wrr) * dxr + e(wri) * dxi) * INV_SQRT2
        dui = (e(wri) * dxr + e(wii) * dxi) * INV_SQRT2
        if training:
            count = ur.size // ur.shape[1]
            # gradient w.r.t. the whitening matrix, (C, 2, 2), rows index output component
            g_w = np.stack([
                np.stack([(dxr * ur).sum(axis=axes), (dxr * ui).sum(axis=axes)], axis=-1),
                np.stack([(dxi * ur).sum(axis=axes), (dxi * ui).sum(axis=axes)], axis=-1),
            ], axis=-2) * INV_SQRT2
            g_v = _whitening_grad_to_cov(g_w, v, w)
            sym = g_v + np.swapaxes(g_v, -1, -2)
            dur = dur + (e(sym[:, 0, 0]) * ur + e(sym[:, 0, 1]) * ui) / count
            dui = dui + (e(sym[:, 1, 0]) * ur + e(sym[:, 1, 1]) * ui) / count
            dur = dur - dur.mean(axis=axes, keepdims=True)
            dui = dui - dui.mean(axis=axes, keepdims=True)
        return ComplexTensor.from_parts(dur.astype(grad.data.dtype), dui.astype(grad.data.dtype))


def _whitening_grad_to_cov(g_w, v, w):
    """
    Pull a gradient on W = V^(-1/2) back to V. With S = V^(1/2), W = S^-1 gives
    G_S = -W G_W W, and S dS + dS S = dV gives G_V = Q [(Q^T G_S Q) / (s_i + s_j)] Q^T.
    """
    vrr, vii, vri = v
    wrr, wii, wri = w
    cov = np.stack([np.stack([vrr, vri], -1), np.stack([vri, vii], -1)], -2)
    wm = np.stack([np.stack([wrr, wri], -1), np.stack([wri, wii], -1)], -2)
    g_s = -wm @ g_w @ wm
    lam, q = np.linalg.eigh(cov)
    s = np.sqrt(np.clip(lam, 0.0, None))
    inner = np.swapaxes(q, -1, -2) @ g_s @ q
    inner = inner / (s[:, :, None] + s[:, None, :])
    return q @ inner @ np.swapaxes(q, -1, -2)


def make_norm(kind, channels, complex_valued=True, name=''):
    """Norm layer for M complex (or real) channels; 'bn' on complex maps normalizes all 2M real channels"""
    if kind not in NORM_KINDS:
        raise ConfigError(f"unknown norm '{kind}', expected one of {NORM_KINDS}")
    if not complex_valued:
        return BatchNorm(channels, name=name)
    if kind == 'cgbn':
        return CGBN(channels, name=name)
    if kind == 'cbn':
        return CBN(channels, name=name)
    return BatchNorm(2 * channels, name=name)
