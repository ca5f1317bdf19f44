import numpy as np
import pytest

from qdk.errors import ShapeError, UnsupportedLayerError
from qdk.network import (DECODER_LAYERS, KURTOSIS_THRESHOLD, Activation, Layer, Linear, NetworkSpec,
                         ToyNetwork, build_toy_mde, channel_kurtosis, synthetic_images)
from qdk.pipeline import calibration_images


def dec2_input_kurtosis(net, images):
    m = net.layer("dec2")
    m.capture = True
    net.forward(images)
    k = channel_kurtosis(m.captured_input, axis=1)
    net.clear_hooks()
    return k


def test_deterministic():
    a, b = build_toy_mde(3), build_toy_mde(3)
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert a.outlier_channels == b.outlier_channels
    x = synthetic_images(2, 0)
    assert np.array_equal(a.forward(x), b.forward(x))
    assert not np.array_equal(build_toy_mde(4).state_dict()["dec1.weight"], sa["dec1.weight"])


def test_synthetic_images_seeded():
    assert np.array_equal(synthetic_images(3, 5), synthetic_images(3, 5))
    assert synthetic_images(2, 5, size=16).shape == (2, 3, 16, 16)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_planted_outliers_exceed_kurtosis_threshold(seed):
    net = build_toy_mde(seed, decoder_outlier_channels=4)
    k = dec2_input_kurtosis(net, calibration_images(seed))
    above = set(np.flatnonzero(k > KURTOSIS_THRESHOLD).tolist())
    assert above == set(net.outlier_channels) and len(above) == 4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_no_outliers_below_threshold(seed):
    net = build_toy_mde(seed, decoder_outlier_channels=0)
    k = dec2_input_kurtosis(net, calibration_images(seed))
    assert net.outlier_channels == ()
    assert np.all(k < KURTOSIS_THRESHOLD)


def test_kurtosis_of_gaussian_near_three(rng):
    x = rng.normal(size=(50000, 2))
    np.testing.assert_allclose(channel_kurtosis(x, axis=1), 3.0, atol=0.1)


def test_output_positive_depth():
    net = build_toy_mde(0)
    y = net.forward(synthetic_images(2, 1))
    assert y.shape == (2, 8, 8) and np.all(y > 0.5)   # decoder runs on the patch grid


def test_decoder_policy():
    net = build_toy_mde(0)
    pol = {m.name for m in net.quantizable() if m.policy.polish}
    assert pol == set(DECODER_LAYERS)


def test_gradients_match_finite_differences():
    net = build_toy_mde(0, width=8, depth=1, decoder_outlier_channels=1, image_size=8, patch=4)
    x = synthetic_images(1, 2, size=8)
    r = np.random.default_rng(0)
    dy = r.normal(size=net.forward(x).shape)
    gx = net.backward(dy)
    for _ in range(5):
        idx = tuple(int(r.integers(0, s)) for s in x.shape)
        h = 1e-6
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (np.sum(net.forward(xp) * dy) - np.sum(net.forward(xm) * dy)) / (2 * h)
        assert gx[idx] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_layer_output_gradient_captured():
    net = build_toy_mde(0, width=8, depth=1, decoder_outlier_channels=1, image_size=8, patch=4)
    x = synthetic_images(2, 3, size=8)
    m = net.layer("dec2")
    m.capture_grad = True
    y = net.forward(x)
    net.backward(np.ones_like(y))
    assert m.captured_grad.shape == (2 * 2 * 2, 4)   # (samples x grid positions, out channels)


def test_state_dict_round_trip():
    a, b = build_toy_mde(0), build_toy_mde(1)
    b.load_state_dict(a.state_dict())
    x = synthetic_images(1, 0)
    assert np.array_equal(a.forward(x), b.forward(x))
    bad = dict(a.state_dict())
    bad["dec1.weight"] = np.zeros((1, 1))
    with pytest.raises(ShapeError):
        b.load_state_dict(bad)
    del bad["dec1.weight"]
    with pytest.raises(KeyError):
        b.load_state_dict(bad)


def test_errors():
    with pytest.raises(ShapeError):
        build_toy_mde(0, width=4, decoder_outlier_channels=5)
    with pytest.raises(UnsupportedLayerError):
        Activation("a", "tanh")
    with pytest.raises(UnsupportedLayerError):
        Layer("x").backward(np.ones(1))
    with pytest.raises(ShapeError):
        Linear("l", np.ones((2, 3)), None).forward(np.ones((1, 4)))
