"""Convolutional encoder mapping curves to nonnegative flow seeds.

Three conv blocks (same-padded kernel-3 convolution, ELU, max-pool 2), then
the feature maps are flattened and projected by a dense layer under ReLU.
The output dimension equals the cluster count C: coordinate j seeds cluster
j's flow.  Flattening keeps the position of every feature, which the warper
needs to tell curves of one cluster apart; the dense layer is therefore bound
to the grid size the model was initialized for (resample first if it
differs).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad

DEFAULT_CHANNELS = (16, 32, 64)
KERNEL_SIZE = 3
POOL_BLOCKS = 3


@dataclass
class EncoderParams:
    """Weights for the three conv blocks and the final dense projection."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    wd: np.ndarray
    bd: np.ndarray

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def feature_length(grid_size: int,
                   channels: tuple[int, int, int] = DEFAULT_CHANNELS) -> int:
    """Flattened feature count after the conv stack at a given grid size."""
    t = grid_size
    for _ in range(POOL_BLOCKS):
        t //= 2
    if t == 0:
        raise ValueError(f"grid size {grid_size} too short for "
                         f"{POOL_BLOCKS} pool-2 blocks")
    return channels[2] * t


def _uniform(rng: np.random.Generator, shape: tuple[int, ...],
             fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(dims: int, clusters: int, grid_size: int,
                        channels: tuple[int, int, int] = DEFAULT_CHANNELS,
                        rng: np.random.Generator | None = None,
                        head_gain: float = 0.25) -> EncoderParams:
    """Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer.

    The dense head is shrunk by ``head_gain`` so the initial latent seeds
    start small: early epochs then move the shared field first and grow the
    seeds smoothly, instead of producing a loss bump while oversized random
    seeds are unwound.
    """
    rng = rng or np.random.default_rng(0)
    c1, c2, c3 = channels
    k = KERNEL_SIZE
    f = feature_length(grid_size, channels)
    return EncoderParams(
        w1=_uniform(rng, (c1, dims, k), dims * k),
        b1=_uniform(rng, (c1,), dims * k),
        w2=_uniform(rng, (c2, c1, k), c1 * k),
        b2=_uniform(rng, (c2,), c1 * k),
        w3=_uniform(rng, (c3, c2, k), c2 * k),
        b3=_uniform(rng, (c3,), c2 * k),
        wd=head_gain * _uniform(rng, (clusters, f), f),
        bd=head_gain * _uniform(rng, (clusters,), f),
    )


def encode_batch(x: ad.Node, p: dict[str, ad.Node]) -> ad.Node:
    """Latent seeds ``z[N,C] = relu(W flat(x) + b)`` for curves ``x[N,d,T]``."""
    h = x
    for w_name, b_name in (("w1", "b1"), ("w2", "b2"), ("w3", "b3")):
        w, b = p[w_name], p[b_name]
        h = ad.conv1d(h, w) + ad.reshape(b, (1, b.shape[0], 1))
        h = ad.maxpool1d(ad.elu(h), 2)
    n, c3, t3 = h.shape
    g = ad.reshape(h, (n, c3 * t3))  # keep feature positions
    z = ad.matmul(g, ad.transpose(p["wd"], (1, 0))) + p["bd"]
    return ad.relu(z)


def params_to_leaves(tape: ad.Tape, params: EncoderParams,
                     requires_grad: bool = True) -> dict[str, ad.Node]:
    return {name: tape.leaf(arr, requires_grad=requires_grad, name=f"enc.{name}")
            for name, arr in params.named_arrays()}


def encode(values: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Convenience single-curve encoding of ``values[d,T]`` to ``z[C]``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected values[d,T], got shape {values.shape}")
    tape = ad.Tape()
    x = tape.leaf(values[None, :, :])
    z = encode_batch(x, params_to_leaves(tape, params, requires_grad=False))
    return z.value[0]
