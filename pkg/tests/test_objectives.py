import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from euvptycho.errors import InvalidArgumentError
from euvptycho.objectives import (
    LossConfig,
    amplitude_mse,
    gaussian_nll,
    mixed_nll,
    poisson_nll,
    tv_l1_regularize,
)

from conftest import crandn


def _fd_real(f, x, h):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def _fd_complex(f, x, h):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        for unit in (1, 1j):
            xp, xm = x.copy(), x.copy()
            xp[idx] += h * unit
            xm[idx] -= h * unit
            g[idx] += unit * (f(xp) - f(xm)) / (2 * h)
    return g


def _rel(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


@pytest.fixture
def pair(rng):
    I = rng.uniform(0.5, 20.0, (16, 16))
    meas = rng.poisson(I * rng.uniform(0.7, 1.3, I.shape)).astype(float)
    mask = rng.random(I.shape) > 0.1
    return I, meas, mask


def test_amplitude_mse_examples():
    val, _ = amplitude_mse(np.array([4.0]), np.array([9.0]))
    assert val == pytest.approx(1.0, abs=1e-8)
    I = np.array([3.0, 7.0])
    val, g = amplitude_mse(I, I)
    assert val < 1e-18 and np.max(np.abs(g)) < 1e-9
    mask = np.array([True, False])
    a = amplitude_mse(np.array([1.0, 5.0]), np.array([1.0, 6.0e4]), mask)
    b = amplitude_mse(np.array([1.0, 0.0]), np.array([1.0, 0.0]), mask)
    assert a[0] == b[0] and a[1][1] == 0.0


def test_poisson_examples():
    I = np.array([2.0, 5.0])
    assert np.max(np.abs(poisson_nll(I, I)[1])) < 1e-9
    val, g = poisson_nll(I, np.zeros(2))
    assert val == pytest.approx(7.0) and np.all(g == 1.0)


def test_gaussian_examples():
    I = np.array([2.0, 5.0])
    val, g = gaussian_nll(I, I, var=3.0)
    assert val == 0 and np.all(g == 0)
    _, g1 = gaussian_nll(I + 1, I, var=2.0)
    _, g2 = gaussian_nll(I + 2, I, var=2.0)
    assert np.allclose(g2, 2 * g1)
    with pytest.raises(InvalidArgumentError):
        gaussian_nll(I, I, var=0.0)


def test_mixed_examples():
    I = np.array([2.0, 5.0])
    _, g = mixed_nll(I, I, read_var=0.0)
    assert np.allclose(g, 0.5 / (I + 1e-9), rtol=1e-12)
    big = 1e12
    _, gm = mixed_nll(I + 1, I, read_var=big)
    _, gg = gaussian_nll(I + 1, I, var=big)
    assert np.allclose(gm, gg + 0.5 / big, rtol=1e-6)
    with pytest.raises(InvalidArgumentError):
        mixed_nll(I, I, read_var=-1.0)


@pytest.mark.parametrize(
    "fn, tol",
    [
        (lambda I, m, k: amplitude_mse(I, m, k), 1e-7),
        (lambda I, m, k: poisson_nll(I, m, k), 1e-7),
        (lambda I, m, k: gaussian_nll(I, m, k, var=4.0), 1e-7),
        (lambda I, m, k: mixed_nll(I, m, k, read_var=2.0), 1e-6),
    ],
)
def test_loss_gradients_fd(pair, fn, tol):
    I, meas, mask = pair
    _, g = fn(I, meas, mask)
    fd = _fd_real(lambda x: fn(x, meas, mask)[0], I, 1e-5)
    assert _rel(g, fd) < tol


@pytest.mark.parametrize("kind", ["amp_mse", "poisson", "gaussian", "mixed"])
def test_excluded_pixels_never_matter(pair, rng, kind):
    I, meas, mask = pair
    loss = LossConfig(kind, read_noise_variance=3.0)
    v1, g1 = loss(I, meas, mask)
    I2, meas2 = I.copy(), meas.copy()
    I2[~mask] = rng.uniform(0, 1e5, (~mask).sum())
    meas2[~mask] = rng.uniform(0, 1e5, (~mask).sum())
    v2, g2 = loss(I2, meas2, mask)
    assert v1 == v2 and np.array_equal(g1, g2) and np.all(g2[~mask] == 0)


@given(st.integers(0, 2**31), st.sampled_from(["amp_mse", "poisson", "gaussian", "mixed"]))
def test_gradients_vanish_at_match(seed, kind):
    I = np.random.default_rng(seed).uniform(1.0, 100.0, (4, 4))
    _, g = LossConfig(kind, read_noise_variance=1.0)(I, I)
    # the mixed loss keeps its log-determinant slope at the match
    expected = 0.5 / (I + 1.0 + 1e-9) if kind == "mixed" else 0.0
    assert np.allclose(g, expected, atol=1e-8)


def test_loss_config_validation():
    with pytest.raises(InvalidArgumentError):
        LossConfig("l2")
    with pytest.raises(InvalidArgumentError):
        LossConfig(epsilon=0.0)
    with pytest.raises(InvalidArgumentError):
        LossConfig(read_noise_variance=-1.0)


def test_tv_examples(rng):
    const = np.full((1, 8, 8), 2.0 * np.exp(0.3j))
    val, _ = tv_l1_regularize(const, 0.0, 1.0)
    assert val < 1e-4
    obj = crandn(rng, 1, 8, 8)
    val, g = tv_l1_regularize(obj, 0.0, 0.0)
    assert val == 0 and np.all(g == 0)
    with pytest.raises(InvalidArgumentError):
        tv_l1_regularize(obj, -1.0, 0.0)


@pytest.mark.parametrize("w", [(1.0, 0.0), (0.0, 1.0), (0.3, 0.7)])
def test_tv_l1_gradient_fd(rng, w):
    obj = crandn(rng, 2, 8, 8)
    _, g = tv_l1_regularize(obj, *w)
    fd = _fd_complex(lambda x: tv_l1_regularize(x, *w)[0], obj, 1e-6)
    assert _rel(g, fd) < 1e-5


def test_regulariser_ignores_phase(rng):
    obj = crandn(rng, 1, 8, 8)
    a = tv_l1_regularize(obj, 0.5, 0.5)[0]
    b = tv_l1_regularize(obj * np.exp(1j * rng.uniform(0, 6, obj.shape)), 0.5, 0.5)[0]
    assert a == pytest.approx(b, rel=1e-12)
