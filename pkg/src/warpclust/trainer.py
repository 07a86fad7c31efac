"""Joint training loop: warp alignment and cluster self-training together.

One epoch encodes every curve to flow seeds, integrates and mixes the
per-cluster warps with the previous epoch's soft assignments, re-projects
the aligned curves onto the Fourier basis, updates assignments and targets,
and takes one Adam step on the combined loss.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import encoder, spectral, srvf, warper
from .data import Dataset
from .errors import ConfigError, NumericalError

CHECKPOINT_MAGIC = b"WARPCLUST-CKPT-1"


@dataclass
class TrainConfig:
    """Hyperparameters; the defaults are the method's reference settings."""

    clusters: int = 2
    basis_k: int = 10
    alpha: float = 0.01
    epochs: int = 300
    learning_rate: float = 1e-3
    lr_decay_every: int = 100
    lr_decay_factor: float = 10.0
    substeps: int = 4
    seed: int = 0
    batch_size: int | None = None
    encoder_channels: tuple[int, int, int] = (16, 32, 64)
    flow_hidden: tuple[int, int] = (64, 64)
    kernel_dof: float = 1.0
    freeze_templates: bool = False
    smooth_eps: float = srvf.SMOOTH_EPS

    def validate(self) -> None:
        if self.clusters < 1:
            raise ConfigError(f"clusters must be >= 1, got {self.clusters}")
        if self.basis_k < 1:
            raise ConfigError(f"basis size must be >= 1, got {self.basis_k}")
        if self.alpha < 0.0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning rate must be positive")
        if self.lr_decay_every < 1 or self.lr_decay_factor < 1.0:
            raise ConfigError("decay interval must be >= 1 and factor >= 1")
        if self.substeps < 1:
            raise ConfigError(f"substeps must be >= 1, got {self.substeps}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch size must be >= 1 when set")
        if self.kernel_dof <= 0.0:
            raise ConfigError("kernel dof must be positive")


@dataclass
class ModelParams:
    """All trainable arrays: encoder, flow field, and cluster centroids."""

    encoder: encoder.EncoderParams
    flow: warper.FlowParams
    centroids: np.ndarray

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"enc.{n}", a) for n, a in self.encoder.named_arrays()]
        out += [(f"flow.{n}", a) for n, a in self.flow.named_arrays()]
        out.append(("centroids", self.centroids))
        return out


@dataclass
class TrainReport:
    """Loss curves, final per-curve outputs, and the trained parameters.

    Loss row ``e`` is evaluated with the parameters entering epoch ``e``;
    the extra last row is evaluated after the final step, so it matches the
    returned parameters exactly.  ``assignments`` is the last in-loop
    membership update: one forward pass with (params, assignments) as the
    mixture state reproduces ``warps``, ``aligned``, and the last loss row
    bit for bit.
    """

    reg_losses: np.ndarray
    clu_losses: np.ndarray
    total_losses: np.ndarray
    epoch_seconds: np.ndarray
    warps: np.ndarray
    aligned: np.ndarray
    assignments: np.ndarray
    labels: np.ndarray
    params: ModelParams
    config: TrainConfig


def total_loss(l_reg, l_clu, alpha: float):
    """Combined objective ``l_reg + alpha * l_clu`` (nodes or floats)."""
    return l_reg + alpha * l_clu


# ---------------------------------------------------------------------------
# k-means initialization of the centroids
# ---------------------------------------------------------------------------

def kmeans_init(coeffs: np.ndarray, clusters: int,
                seed: int | np.random.Generator = 0) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding on feature rows ``[N,F]``.

    Runs at most 50 iterations or until the assignment stabilizes; empty
    clusters are re-seeded at the point farthest from its current centroid.
    Deterministic given the seed.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    n = coeffs.shape[0]
    if n < clusters:
        raise ConfigError(f"{n} points cannot seed {clusters} clusters")
    rng = np.random.default_rng(seed) if not isinstance(
        seed, np.random.Generator) else seed
    centroids = np.empty((clusters, coeffs.shape[1]))
    centroids[0] = coeffs[rng.integers(n)]
    d2 = ((coeffs - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, clusters):
        total = d2.sum()
        if total > 0.0:
            idx = rng.choice(n, p=d2 / total)
        else:  # all remaining points coincide with a centroid
            idx = int(rng.integers(n))
        centroids[j] = coeffs[idx]
        d2 = np.minimum(d2, ((coeffs - centroids[j]) ** 2).sum(axis=1))

    assign = np.full(n, -1)
    for _ in range(50):
        dist = ((coeffs[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist.argmin(axis=1)
        for j in range(clusters):
            members = new_assign == j
            if members.any():
                centroids[j] = coeffs[members].mean(axis=0)
            else:
                far = dist[np.arange(n), new_assign].argmax()
                centroids[j] = coeffs[far]
                new_assign[far] = j
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return centroids


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(arrays: list[tuple[str, np.ndarray]],
              grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One in-place Adam update over named arrays, fixed iteration order."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, arr in arrays:
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(arr))
        v = state.v.setdefault(name, np.zeros_like(arr))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# the epoch forward pass
# ---------------------------------------------------------------------------

def _build_leaves(tape: ad.Tape, params: ModelParams
                  ) -> dict[str, ad.Node]:
    return {name: tape.leaf(arr, requires_grad=True, name=name)
            for name, arr in params.named_arrays()}


def _epoch_forward(x: np.ndarray, grid: np.ndarray, params: ModelParams,
                   p_prev: np.ndarray, config: TrainConfig):
    """One full forward pass; returns the tape nodes and loss values."""
    tape = ad.Tape()
    leaves = _build_leaves(tape, params)
    x_leaf = tape.leaf(x, name="curves")
    enc_leaves = {n[4:]: node for n, node in leaves.items()
                  if n.startswith("enc.")}
    flow_leaves = {n[5:]: node for n, node in leaves.items()
                   if n.startswith("flow.")}
    z = encoder.encode_batch(x_leaf, enc_leaves)
    gamma, aligned = warper.time_warping_module(
        z, flow_leaves, p_prev, x_leaf, grid, config.substeps)
    q = srvf.srvf_transform(aligned, config.smooth_eps)
    coeffs = spectral.fourier_project(aligned, config.basis_k)
    p = spectral.soft_assign(coeffs, leaves["centroids"], config.kernel_dof)
    target = spectral.target_distribution(p.value)
    if config.freeze_templates:
        mu = srvf.karcher_templates(tape.leaf(q.value), tape.leaf(p.value))
    else:
        mu = srvf.karcher_templates(q, p)
    l_reg = srvf.registration_loss(q, mu, p)
    l_clu = spectral.clustering_loss(target, p)
    l_tot = total_loss(l_reg, l_clu, config.alpha)
    return leaves, gamma, aligned, p, l_reg, l_clu, l_tot


def _check_finite(value: float, epoch: int, what: str) -> None:
    if not np.isfinite(value):
        raise NumericalError(f"{what} became non-finite at epoch {epoch}")


def train(dataset: Dataset, config: TrainConfig) -> TrainReport:
    """Run the full joint training loop; deterministic given the seed.

    Initializes centroids by k-means on raw-curve Fourier coefficients,
    then alternates warp mixing (with the previous epoch's assignments),
    assignment/target refresh, and one Adam step per epoch.  The learning
    rate divides by the decay factor every ``lr_decay_every`` epochs.
    """
    config.validate()
    x = dataset.values
    grid = dataset.grid
    n = dataset.n
    if n < config.clusters:
        raise ConfigError(f"{n} curves cannot form {config.clusters} clusters")

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng = np.random.default_rng(seeds[0])
    kmeans_rng = np.random.default_rng(seeds[1])
    batch_rng = np.random.default_rng(seeds[2])

    raw_coeffs = spectral.fourier_project(x, config.basis_k)
    params = ModelParams(
        encoder=encoder.init_encoder_params(
            dataset.dims, config.clusters, dataset.length,
            config.encoder_channels, init_rng),
        flow=warper.init_flow_params(
            config.clusters, config.flow_hidden, init_rng),
        centroids=kmeans_init(raw_coeffs, config.clusters, kmeans_rng),
    )
    arrays = params.named_arrays()
    adam = AdamState()
    p_prev = np.full((n, config.clusters), 1.0 / config.clusters)

    reg_hist = np.empty(config.epochs + 1)
    clu_hist = np.empty(config.epochs + 1)
    tot_hist = np.empty(config.epochs + 1)
    seconds = np.empty(config.epochs)

    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = config.learning_rate / (
            config.lr_decay_factor ** (epoch // config.lr_decay_every))
        if config.batch_size is None or config.batch_size >= n:
            batches = [np.arange(n)]
        else:
            order = batch_rng.permutation(n)
            batches = np.array_split(
                order, -(-n // config.batch_size))
        reg_sum = clu_sum = tot_sum = 0.0
        for idx in batches:
            try:
                leaves, gamma, _, p, l_reg, l_clu, l_tot = _epoch_forward(
                    x[idx], grid, params, p_prev[idx], config)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}: {exc}") from exc
            _check_finite(l_tot.value.item(), epoch, "total loss")
            warper.assert_valid_warps(gamma.value, context=f"epoch {epoch}")
            grads = ad.backward(l_tot)
            named_grads = {name: grads[node]
                           for name, node in leaves.items() if node in grads}
            adam_step(arrays, named_grads, adam, lr)
            for name, arr in arrays:
                if not np.all(np.isfinite(arr)):
                    raise NumericalError(
                        f"parameter {name} became non-finite at epoch {epoch}")
            p_prev[idx] = p.value
            reg_sum += l_reg.value.item()
            clu_sum += l_clu.value.item()
            tot_sum += l_tot.value.item()
        reg_hist[epoch] = reg_sum
        clu_hist[epoch] = clu_sum
        tot_hist[epoch] = tot_sum
        seconds[epoch] = time.perf_counter() - started

    # closing evaluation: loss and outputs for the returned parameters, with
    # the last in-loop assignment update as the mixture state.  Re-running
    # this forward from (params, assignments) reproduces the last loss row.
    _, gamma, aligned, _, l_reg, l_clu, l_tot = _epoch_forward(
        x, grid, params, p_prev, config)
    _check_finite(l_tot.value.item(), config.epochs, "total loss")
    warper.assert_valid_warps(gamma.value, context="final evaluation")
    reg_hist[-1] = l_reg.value.item()
    clu_hist[-1] = l_clu.value.item()
    tot_hist[-1] = l_tot.value.item()

    return TrainReport(
        reg_losses=reg_hist,
        clu_losses=clu_hist,
        total_losses=tot_hist,
        epoch_seconds=seconds,
        warps=gamma.value.copy(),
        aligned=aligned.value.copy(),
        assignments=p_prev.copy(),
        labels=p_prev.argmax(axis=1),
        params=params,
        config=config,
    )


def epoch_scaling_probe(sizes: list[int], config: TrainConfig,
                        dims: int = 1, grid_size: int = 100,
                        probe_epochs: int = 4) -> list[float]:
    """Median per-epoch wall-clock on random data at each sample size.

    The first epoch is discarded as warm-up; sizes must be increasing.
    """
    if sorted(sizes) != list(sizes):
        raise ConfigError("sizes must be increasing")
    if probe_epochs < 2:
        raise ConfigError("need at least 2 probe epochs")
    rng = np.random.default_rng(config.seed)
    grid = np.linspace(0.0, 1.0, grid_size)
    times = []
    for n in sizes:
        ds = Dataset(values=rng.normal(size=(n, dims, grid_size)), grid=grid)
        report = train(ds, replace(config, epochs=probe_epochs))
        times.append(float(np.median(report.epoch_seconds[1:])))
    return times


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, params: ModelParams, config: TrainConfig,
                    epoch: int) -> None:
    """Write a bitwise-reproducible binary dump of params + config."""
    arrays = params.named_arrays()
    header = {
        "epoch": int(epoch),
        "config": asdict(config),
        "arrays": [{"name": name, "shape": list(arr.shape)}
                   for name, arr in arrays],
    }
    blob = json.dumps(header, sort_keys=True,
                      separators=(",", ":")).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[ModelParams, TrainConfig, int]:
    """Inverse of :func:`save_checkpoint`; round-trips bitwise."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path} is not a checkpoint file")
        size = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(size).decode("ascii"))
        values = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = fh.read(8 * count)
            values[entry["name"]] = np.frombuffer(
                buf, dtype="<f8").reshape(shape).copy()
    cfg = header["config"]
    for key in ("encoder_channels", "flow_hidden"):
        cfg[key] = tuple(cfg[key])
    config = TrainConfig(**cfg)
    enc = encoder.EncoderParams(**{
        f.name: values[f"enc.{f.name}"]
        for f in fields(encoder.EncoderParams)})
    flow = warper.FlowParams(**{
        name: values[f"flow.{name}"] for name in warper.FLOW_PARAM_NAMES})
    params = ModelParams(encoder=enc, flow=flow,
                         centroids=values["centroids"])
    return params, config, int(header["epoch"])
