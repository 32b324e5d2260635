#!/usr/bin/env python3
"""
Tests for real BN, complex Gaussian BN and covariance-whitening complex BN.
"""
import numpy as np
import pytest
from numpy.testing import assert_allclose

from ctensor import ComplexTensor
from errors import ConfigError, ShapeError
from normalization import CBN, CGBN, BatchNorm, inverse_sqrt_2x2, make_norm

GRAD_TOL = 1e-4


def correlated(rng, shape, scale=2.0, shift=0.7):
    """Complex batch whose real and imaginary parts are correlated and off-center"""
    re = scale * rng.normal(size=shape) + shift
    im = 0.6 * re + rng.normal(size=shape) - shift
    return ComplexTensor.from_parts(re, im)


def random_shape(r):
    if r.random() < 0.3:
        return int(r.integers(6, 11)), int(r.integers(1, 4))
    return int(r.integers(2, 4)), int(r.integers(1, 4)), int(r.integers(2, 4)), int(r.integers(2, 4))


def test_cgbn_batch_statistics(float64, rng):
    z = correlated(rng, (4096, 3))
    layer = CGBN(3, name='cgbn')
    layer.gamma.value[:3] = 1.0
    layer.gamma.value[3:] = 0.0
    out = layer.forward(z)
    for part in (out.re, out.im):
        assert np.abs(part.mean(axis=0)).max() < 1e-6
        assert np.abs(part.var(axis=0) - 0.5).max() < 1e-3


def test_cgbn_affine_is_complex_multiply(float64, rng):
    z = correlated(rng, (64, 2, 2, 2))
    layer = CGBN(2, name='cgbn')
    plain = layer.forward(z).to_complex()
    # default gamma is (1 + i) / sqrt(2)
    layer.gamma.value[:2] = 1.0
    layer.gamma.value[2:] = 0.0
    xhat = layer.forward(z).to_complex()
    assert_allclose(plain, xhat * (1 + 1j) / np.sqrt(2), rtol=1e-12, atol=1e-12)


def test_cbn_whitens_to_half_identity(float64, rng):
    z = correlated(rng, (4096, 2))
    layer = CBN(2, name='cbn')
    layer.gamma.value[:] = [[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]]
    out = layer.forward(z)
    re, im = out.re, out.im
    assert np.abs(re.mean(axis=0)).max() < 1e-6
    assert_allclose(re.var(axis=0), 0.5, atol=1e-3)
    assert_allclose(im.var(axis=0), 0.5, atol=1e-3)
    assert_allclose((re * im).mean(axis=0), 0.0, atol=1e-3)


def test_cgbn_two_sample_example(float64):
    z = ComplexTensor.from_parts(np.array([[1.0], [3.0]]), np.array([[2.0], [2.0]]))
    out = CGBN(1, name='cgbn').forward(z).to_complex().ravel()
    assert_allclose(out, [-0.5 - 0.5j, 0.5 + 0.5j], atol=1e-5)


def test_cgbn_constant_input_gives_beta(float64):
    z = ComplexTensor.from_parts(np.full((4, 1, 2, 2), 3.0), np.full((4, 1, 2, 2), -1.0))
    layer = CGBN(1, name='cgbn')
    layer.beta.value[:] = [5.0, 5.0]
    out = layer.forward(z).to_complex()
    assert_allclose(out, np.full(out.shape, 5 + 5j), atol=1e-12)


def test_cgbn_with_real_gamma_is_two_real_batch_norms(float64, rng):
    z = correlated(rng, (8, 2, 3, 3))
    grad = rng.normal(size=z.data.shape)
    cgbn = CGBN(2, eps=1e-5, name='cgbn')
    cgbn.gamma.value[:2] = 1.0
    cgbn.gamma.value[2:] = 0.0
    # sqrt(2) * sqrt(var + eps / 2) == sqrt(2 var + eps)
    bn = BatchNorm(4, eps=0.5e-5, name='bn')
    bn.gamma.value[:] = 1.0 / np.sqrt(2.0)
    assert_allclose(cgbn.forward(z).data, bn.forward(z.data.copy()), rtol=1e-12, atol=1e-12)
    dz = cgbn.backward(ComplexTensor(grad.copy()))
    dx = bn.backward(grad.copy())
    assert_allclose(dz.data, dx, rtol=1e-10, atol=1e-12)


def test_cbn_identity_covariance():
    wrr, wii, wri = inverse_sqrt_2x2(1.0, 1.0, 0.0)
    assert (wrr, wii, wri) == pytest.approx((1.0, 1.0, 0.0))


def test_cbn_diagonal_covariance_matches_cgbn(float64):
    # sign patterns with zero cross moment give an exactly diagonal covariance
    re = np.array([1.0, -1.0, 1.0, -1.0])[:, None] * 3.0 + 2.0
    im = np.array([1.0, 1.0, -1.0, -1.0])[:, None] * 0.5 - 1.0
    z = ComplexTensor.from_parts(re, im)
    cgbn = CGBN(1, eps=0.0, name='cgbn')
    cgbn.gamma.value[:] = [1.0, 0.0]
    cbn = CBN(1, eps=0.0, name='cbn')
    cbn.gamma.value[:] = [[1.0], [1.0], [0.0]]
    assert_allclose(cbn.forward(z).data, cgbn.forward(z).data, rtol=1e-12, atol=1e-12)


def test_inverse_sqrt_closed_form(rng):
    for _ in range(50):
        a = rng.normal(size=(2, 2))
        v = a @ a.T + 0.1 * np.eye(2)
        wrr, wii, wri = inverse_sqrt_2x2(v[0, 0], v[1, 1], v[0, 1])
        w = np.array([[wrr, wri], [wri, wii]])
        assert_allclose(w @ v @ w, np.eye(2), atol=1e-10)
        assert np.all(np.linalg.eigvalsh(w) > 0)


@pytest.mark.parametrize('kind', ['cgbn', 'cbn', 'bn'])
def test_norm_gradients_random_configs(float64, grad_check, kind):
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(100 + seed)
        shape = random_shape(r)
        layer = make_norm(kind, shape[1], complex_valued=True, name=kind)
        layer.gamma.value[:] = r.normal(size=layer.gamma.value.shape)
        if kind == 'cbn':
            # keep the 2x2 affine away from singular
            layer.gamma.value[:2] = 1.0 + np.abs(layer.gamma.value[:2])
        layer.beta.value[:] = r.normal(size=layer.beta.value.shape)
        check = grad_check(layer, correlated(r, shape))
        worst = max(worst, check.input_error(), *check.param_errors().values())
    assert worst < GRAD_TOL


def test_real_bn_gradients(float64, grad_check, rng):
    layer = BatchNorm(3, name='bn')
    layer.gamma.value[:] = rng.normal(size=3)
    check = grad_check(layer, rng.normal(size=(4, 3, 3, 3)) * 3 + 1)
    assert check.input_error() < GRAD_TOL
    assert max(check.param_errors().values()) < GRAD_TOL


@pytest.mark.parametrize('kind', ['cgbn', 'cbn', 'bn'])
def test_eval_mode_uses_running_statistics(float64, rng, kind):
    layer = make_norm(kind, 2, name=kind)
    z = correlated(rng, (16, 2, 3, 3))
    layer.forward(z)
    layer.eval()
    a = layer.forward(z.copy())
    b = layer.forward(correlated(rng, (1, 2, 3, 3)))
    # a single sample is fine in eval mode and the output does not depend on the batch
    assert b.shape == (1, 2, 3, 3)
    c = layer.forward(ComplexTensor(z.data[:1].copy()))
    assert_allclose(c.data, a.data[:1], rtol=1e-12)


@pytest.mark.parametrize('kind', ['cgbn', 'cbn', 'bn'])
def test_eval_backward_matches_numeric(float64, grad_check, rng, kind):
    layer = make_norm(kind, 2, name=kind)
    layer.forward(correlated(rng, (16, 2, 3, 3)))
    layer.eval()
    check = grad_check(layer, correlated(rng, (2, 2, 2, 2)))
    assert check.input_error() < GRAD_TOL


def test_running_statistics_momentum(float64, rng):
    layer = CGBN(1, name='cgbn')
    z = correlated(rng, (32, 1, 2, 2))
    layer.forward(z)
    mean = z.data.mean(axis=(0, 2, 3))
    var = z.data.var(axis=(0, 2, 3))
    assert_allclose(layer.running_mean, 0.1 * mean, rtol=1e-12)
    assert_allclose(layer.running_var, 0.9 * 0.5 + 0.1 * var, rtol=1e-12)


@pytest.mark.parametrize('kind', ['cgbn', 'cbn', 'bn'])
def test_training_batch_of_one_is_config_error(rng, kind):
    layer = make_norm(kind, 2, name=kind)
    with pytest.raises(ConfigError):
        layer.forward(correlated(rng, (1, 2, 3, 3)))


def test_channel_mismatch_and_unknown_kind(rng):
    with pytest.raises(ShapeError):
        CGBN(3).forward(correlated(rng, (4, 2, 2, 2)))
    with pytest.raises(ShapeError):
        CBN(2).forward(rng.normal(size=(4, 4, 2, 2)))
    with pytest.raises(ConfigError):
        make_norm('layernorm', 4)


def test_make_norm_on_real_maps():
    assert isinstance(make_norm('cgbn', 8, complex_valued=False), BatchNorm)
    bn = make_norm('bn', 8, complex_valued=True)
    assert isinstance(bn, BatchNorm) and bn.channels == 16
