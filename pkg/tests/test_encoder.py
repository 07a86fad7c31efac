"""Tests for the convolutional encoder."""

from __future__ import annotations

import numpy as np
import pytest

from warpclust import autodiff as ad
from warpclust import encoder
from warpclust.errors import StructuralError


def _zero_params(dims=1, clusters=2, grid_size=40, channels=(4, 8, 16)):
    p = encoder.init_encoder_params(dims, clusters, grid_size, channels,
                                    np.random.default_rng(0))
    for _, arr in p.named_arrays():
        arr[...] = 0.0
    return p


def test_zero_parameters_give_zero_latent():
    p = _zero_params()
    z = encoder.encode(np.random.default_rng(1).normal(size=(1, 40)), p)
    np.testing.assert_array_equal(z, 0.0)


def test_output_dimension_is_cluster_count():
    p = encoder.init_encoder_params(1, 2, 315, rng=np.random.default_rng(2))
    z = encoder.encode(np.random.default_rng(3).normal(size=(1, 315)), p)
    assert z.shape == (2,)


def test_feature_length_floors_three_halvings():
    assert encoder.feature_length(100) == 64 * 12
    assert encoder.feature_length(16, (4, 8, 16)) == 16 * 2
    with pytest.raises(ValueError, match="too short"):
        encoder.feature_length(7)


def test_latents_vary_across_shifted_curves():
    # flattened features keep position: time-shifted copies of one curve
    # must not collapse to one latent
    rng = np.random.default_rng(4)
    p = encoder.init_encoder_params(1, 2, 64, channels=(4, 8, 16), rng=rng)
    base = np.exp(-((np.linspace(0, 1, 64) - 0.5) / 0.1) ** 2)
    zs = np.stack([encoder.encode(np.roll(base, s)[None, :], p)
                   for s in (-6, -3, 0, 3, 6)])
    assert zs.std(axis=0).max() > 1e-4


def test_latents_nonnegative():
    rng = np.random.default_rng(5)
    for _ in range(10):
        p = encoder.init_encoder_params(2, 3, 32, channels=(4, 8, 16),
                                        rng=rng)
        z = encoder.encode(rng.normal(size=(2, 32)), p)
        assert z.min() >= 0.0


def test_deterministic():
    rng = np.random.default_rng(6)
    p = encoder.init_encoder_params(1, 2, 48, channels=(4, 8, 16), rng=rng)
    x = rng.normal(size=(1, 48))
    np.testing.assert_array_equal(encoder.encode(x, p), encoder.encode(x, p))


def test_channel_mismatch_raises():
    p = encoder.init_encoder_params(2, 2, 32, channels=(4, 8, 16),
                                    rng=np.random.default_rng(7))
    with pytest.raises(StructuralError):
        encoder.encode(np.zeros((3, 32)), p)


def test_init_bounds_follow_fan_in():
    p = encoder.init_encoder_params(1, 2, 100, rng=np.random.default_rng(8))
    assert np.abs(p.w1).max() <= 1.0 / np.sqrt(1 * 3)
    assert np.abs(p.w2).max() <= 1.0 / np.sqrt(16 * 3)
    assert p.wd.shape == (2, 64 * 12)
    assert np.abs(p.wd).max() <= 1.0 / np.sqrt(64 * 12)


@pytest.mark.parametrize("group", ["wd", "w1", "w3", "b2", "bd"])
def test_gradient_wrt_parameter_groups(group):
    rng = np.random.default_rng(9)
    params = encoder.init_encoder_params(1, 2, 24, channels=(3, 4, 5),
                                         rng=rng)
    x_val = rng.normal(size=(2, 1, 24))

    def f(v):
        tape = v.tape
        leaves = {name: (v if name == group else tape.leaf(arr))
                  for name, arr in params.named_arrays()}
        x = tape.leaf(x_val)
        return encoder.encode_batch(x, leaves).sum()

    assert ad.check_gradient(f, getattr(params, group)) < 1e-4


def test_gradient_wrt_curve_values():
    rng = np.random.default_rng(10)
    params = encoder.init_encoder_params(1, 2, 24, channels=(3, 4, 5),
                                         rng=rng)
    x_val = rng.normal(size=(2, 1, 24))

    def f(v):
        tape = v.tape
        leaves = encoder.params_to_leaves(tape, params, requires_grad=False)
        return (encoder.encode_batch(v, leaves) ** 2.0).sum()

    assert ad.check_gradient(f, x_val) < 1e-4
