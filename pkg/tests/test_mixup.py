import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixskd import autodiff as ad
from mixskd.autodiff import Tensor
from mixskd.errors import InvalidConfigError, InvalidShapeError
from mixskd.mixup import (MixupConfig, interpolate_features, interpolate_logits, make_mix_batch, mix,
                          one_hot, sample_gamma, sample_lambda, sample_lambdas)


def test_config_validates_alpha():
    with pytest.raises(InvalidConfigError):
        MixupConfig(alpha=0.0)


@pytest.mark.parametrize("alpha", [0.0, -1.0])
def test_sample_lambda_rejects_bad_alpha(alpha):
    with pytest.raises(InvalidConfigError):
        sample_lambda(alpha, np.random.default_rng(0))


def test_sample_lambda_is_deterministic_per_seed():
    a = sample_lambdas(0.4, 20, np.random.default_rng(9))
    b = sample_lambdas(0.4, 20, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    assert ((a >= 0) & (a <= 1)).all()


@pytest.mark.parametrize("shape", [0.3, 1.0, 2.5])
def test_gamma_moments(shape):
    rng = np.random.default_rng(1)
    g = np.array([sample_gamma(shape, rng) for _ in range(40000)])
    assert g.mean() == pytest.approx(shape, rel=0.03)
    assert g.var() == pytest.approx(shape, rel=0.06)


def test_alpha_one_is_uniform():
    lam = sample_lambdas(1.0, 20000, np.random.default_rng(2))
    hist, _ = np.histogram(lam, bins=5, range=(0, 1))
    assert np.all(np.abs(hist / 20000 - 0.2) < 0.02)


def test_mix_endpoints_are_bitwise():
    rng = np.random.default_rng(0)
    a, b = Tensor(rng.random((3, 4))), Tensor(rng.random((3, 4)))
    assert mix(a, b, 1.0).data.tobytes() == a.data.tobytes()
    assert mix(a, b, 0.0).data.tobytes() == b.data.tobytes()
    np.testing.assert_allclose(mix(a, b, 0.25).data, 0.25 * a.data + 0.75 * b.data, rtol=1e-6)


def test_mix_per_sample_lambda():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 3)))
    np.testing.assert_allclose(mix(a, b, [0.2, 0.9]).data, [[0.2] * 3, [0.9] * 3], rtol=1e-6)
    with pytest.raises(InvalidShapeError):
        mix(a, b, [0.1, 0.2, 0.3])


@pytest.mark.parametrize("lam", [-0.1, 1.5, float("nan")])
def test_mix_rejects_out_of_range_lambda(lam):
    with pytest.raises(InvalidConfigError):
        mix(Tensor(np.ones(2)), Tensor(np.ones(2)), lam)


def test_mix_shape_mismatch():
    with pytest.raises(InvalidShapeError):
        interpolate_logits(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), 0.5)
    with pytest.raises(InvalidShapeError):
        interpolate_features([Tensor(np.ones(2))], [], 0.5)


def test_mix_gradient_splits_by_lambda(f64):
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    ad.backward(ad.sum(mix(a, b, 0.3)))
    np.testing.assert_allclose(a.grad, 0.3)
    np.testing.assert_allclose(b.grad, 0.7)


def test_make_mix_batch_labels():
    xi, xj = np.zeros((2, 3, 4, 4)), np.ones((2, 3, 4, 4))
    mb = make_mix_batch(xi, xj, [0, 2], [1, 2], 0.25, 3)
    np.testing.assert_allclose(mb.y_tilde, [[0.25, 0.75, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(mb.x_tilde.data, 0.75)
    with pytest.raises(InvalidShapeError):
        make_mix_batch(xi, xj, [0], [1, 2], 0.5, 3)


def test_one_hot():
    np.testing.assert_array_equal(one_hot([2, 0], 3), [[0, 0, 1], [1, 0, 0]])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2), st.integers(0, 2))
def test_soft_label_is_distribution(lam, yi, yj):
    mb = make_mix_batch(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)), [yi], [yj], lam, 3)
    assert mb.y_tilde.sum() == pytest.approx(1.0)
    assert (mb.y_tilde >= 0).all()
