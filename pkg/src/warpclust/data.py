"""Synthetic curve generation, tabular IO, and corruption protocols.

The generator realizes the warped-template data model: each curve is a
per-cluster analytic template, amplitude-scaled, composed with the inverse
of a random monotone warp, plus Gaussian noise.  Ground-truth labels and
warps travel with the dataset so recovery can be scored exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import spectral, warper
from .errors import (ConfigError, DataFormatError, ImputationError,
                     NormalizationError, StructuralError)

TEMPLATE_NAMES = ("unimodal", "bimodal", "sinusoid")


def _bump(t: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-((t - center) ** 2) / width ** 2)


def template_curve(name: str, pos: np.ndarray, dim: int = 0) -> np.ndarray:
    """Evaluate a named analytic template at positions in [0,1].

    Dimensions beyond the first reuse the same shape with a deterministic
    phase shift, so multivariate curves share features and the warp.
    """
    pos = np.asarray(pos, dtype=np.float64)
    shift = 0.13 * dim
    if name == "unimodal":
        return _bump(pos, 0.5 + shift * 0.5, 0.084)
    if name == "bimodal":
        return _bump(pos, 0.30 + shift * 0.5, 0.056) + \
            _bump(pos, 0.70 + shift * 0.5, 0.056)
    if name == "sinusoid":
        return np.sin(2.0 * np.pi * (pos + shift))
    raise ConfigError(f"unknown template {name!r}; "
                      f"choose from {TEMPLATE_NAMES}")


@dataclass
class SyntheticSpec:
    """Recipe for a labelled synthetic dataset with known warps."""

    clusters: int = 2
    per_cluster: int | tuple[int, ...] = 100
    grid_size: int = 100
    dims: int = 1
    templates: tuple[str, ...] | None = None
    sharpness: float = 0.2
    amplitude_range: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = 0.02
    seed: int = 0

    def counts(self) -> tuple[int, ...]:
        if isinstance(self.per_cluster, int):
            return (self.per_cluster,) * self.clusters
        return tuple(self.per_cluster)

    def template_names(self) -> tuple[str, ...]:
        if self.templates is not None:
            names = tuple(self.templates)
        else:
            names = TEMPLATE_NAMES[:self.clusters]
        if len(names) != self.clusters:
            raise ConfigError(f"{self.clusters} clusters need "
                              f"{self.clusters} templates, got {len(names)}")
        return names

    def validate(self) -> None:
        if self.clusters < 1:
            raise ConfigError(f"clusters must be >= 1, got {self.clusters}")
        if any(c < 1 for c in self.counts()):
            raise ConfigError("per-cluster counts must be >= 1")
        if self.grid_size < 16:
            raise ConfigError(f"grid size must be >= 16, got {self.grid_size}")
        if self.dims < 1:
            raise ConfigError(f"dims must be >= 1, got {self.dims}")
        if self.noise_sigma < 0.0:
            raise ConfigError("noise sigma must be >= 0")
        if self.sharpness < 0.0:
            raise ConfigError("sharpness must be >= 0")
        self.template_names()


@dataclass
class Dataset:
    """Curves ``values[N,d,T]`` on one shared grid, with optional truth."""

    values: np.ndarray
    grid: np.ndarray
    labels: np.ndarray | None = None
    warps: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.values.ndim != 3:
            raise StructuralError(
                f"values must be [N,d,T], got shape {self.values.shape}")
        if self.grid.shape != (self.values.shape[2],):
            raise StructuralError(
                f"grid length {self.grid.shape} does not match curves "
                f"of length {self.values.shape[2]}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.values.shape[0],):
                raise StructuralError("labels do not match curve count")
        if self.warps is not None:
            self.warps = np.asarray(self.warps, dtype=np.float64)
            if self.warps.shape != (self.values.shape[0],
                                    self.values.shape[2]):
                raise StructuralError("warps do not match values shape")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]

    @property
    def length(self) -> int:
        return self.values.shape[2]


def random_warp(t: int, sharpness: float,
                rng: np.random.Generator) -> np.ndarray:
    """Monotone random warp on ``linspace(0,1,t)`` from Gamma increments.

    ``sharpness`` is the inverse Gamma shape: 0 gives the exact identity,
    larger values give rougher warps.
    """
    if sharpness <= 0.0:
        return np.linspace(0.0, 1.0, t)
    inc = rng.gamma(1.0 / sharpness, 1.0, size=t - 1) + 1e-12
    gamma = np.concatenate([[0.0], np.cumsum(inc)])
    gamma /= gamma[-1]
    gamma[-1] = 1.0
    return gamma


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Draw a labelled dataset of warped, scaled, noisy template curves."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    names = spec.template_names()
    counts = spec.counts()
    t = spec.grid_size
    grid = np.linspace(0.0, 1.0, t)
    n = sum(counts)
    values = np.empty((n, spec.dims, t))
    labels = np.empty(n, dtype=np.int64)
    warps = np.empty((n, t))
    lo, hi = spec.amplitude_range
    i = 0
    for cls, count in enumerate(counts):
        for _ in range(count):
            gamma = random_warp(t, spec.sharpness, rng)
            scale = rng.uniform(lo, hi)
            inv = np.interp(grid, gamma, grid)
            for r in range(spec.dims):
                values[i, r] = scale * template_curve(names[cls], inv, r)
            if spec.noise_sigma > 0.0:
                values[i] += rng.normal(0.0, spec.noise_sigma,
                                        size=(spec.dims, t))
            labels[i] = cls
            warps[i] = gamma
            i += 1
    warper.assert_valid_warps(warps, context="synthetic truth")
    return Dataset(values=values, grid=grid, labels=labels, warps=warps)


# ---------------------------------------------------------------------------
# tabular IO
# ---------------------------------------------------------------------------

def _parse_table(path: str, delimiter: str) -> tuple[np.ndarray, np.ndarray]:
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cells = line.split(delimiter)
            if width is None:
                width = len(cells)
                if width < 2:
                    raise DataFormatError(
                        f"{path}:{lineno}: need a label and at least "
                        f"one value per row")
            elif len(cells) != width:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {width} columns, "
                    f"got {len(cells)}")
            try:
                numbers = [float(c) for c in cells]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            label = numbers[0]
            if label != int(label):
                raise DataFormatError(
                    f"{path}:{lineno}: label {cells[0]!r} is not an integer")
            labels.append(int(label))
            rows.append(numbers[1:])
    if not rows:
        raise DataFormatError(f"{path}: empty dataset")
    return np.asarray(rows), np.asarray(labels, dtype=np.int64)


def load_table(paths: str | list[str], fmt: str = "tsv") -> Dataset:
    """Load label-first tabular curves; one file per dimension.

    Values sit on an implicit uniform grid over [0,1]; labels of every
    dimension file must agree row by row.
    """
    if fmt not in ("tsv", "csv"):
        raise ConfigError(f"unknown table format {fmt!r}")
    delimiter = "\t" if fmt == "tsv" else ","
    if isinstance(paths, str):
        paths = [paths]
    if not paths:
        raise ConfigError("no input files given")
    blocks, labels = [], None
    for path in paths:
        block, lab = _parse_table(path, delimiter)
        if labels is None:
            labels = lab
        elif not np.array_equal(labels, lab):
            raise DataFormatError(
                f"{path}: labels disagree with {paths[0]}")
        if blocks and block.shape != blocks[0].shape:
            raise DataFormatError(
                f"{path}: curve block {block.shape} does not match "
                f"{blocks[0].shape}")
        blocks.append(block)
    values = np.stack(blocks, axis=1)
    grid = np.linspace(0.0, 1.0, values.shape[2])
    return Dataset(values=values, grid=grid, labels=labels)


def save_table(dataset: Dataset, paths: str | list[str],
               fmt: str = "tsv") -> None:
    """Write label-first tables, one file per dimension, %.17g floats."""
    if fmt not in ("tsv", "csv"):
        raise ConfigError(f"unknown table format {fmt!r}")
    delimiter = "\t" if fmt == "tsv" else ","
    if isinstance(paths, str):
        paths = [paths]
    if len(paths) != dataset.dims:
        raise ConfigError(f"{dataset.dims}-dimensional data needs "
                          f"{dataset.dims} files, got {len(paths)}")
    labels = dataset.labels
    if labels is None:
        labels = np.zeros(dataset.n, dtype=np.int64)
    for r, path in enumerate(paths):
        with open(path, "w", encoding="ascii") as fh:
            for i in range(dataset.n):
                cells = [str(int(labels[i]))]
                cells += ["%.17g" % v for v in dataset.values[i, r]]
                fh.write(delimiter.join(cells) + "\n")


def resample(dataset: Dataset, t_new: int) -> Dataset:
    """Linearly resample every curve onto ``linspace(0,1,t_new)``."""
    if t_new < 2:
        raise ConfigError(f"resample length must be >= 2, got {t_new}")
    grid_new = np.linspace(0.0, 1.0, t_new)
    values = np.empty((dataset.n, dataset.dims, t_new))
    for i in range(dataset.n):
        for r in range(dataset.dims):
            values[i, r] = np.interp(grid_new, dataset.grid,
                                     dataset.values[i, r])
    return Dataset(values=values, grid=grid_new, labels=dataset.labels)


# ---------------------------------------------------------------------------
# corruption protocols
# ---------------------------------------------------------------------------

def impute_missing(values: np.ndarray, missing: np.ndarray, k_fit: int = 10,
                   grid: np.ndarray | None = None) -> np.ndarray:
    """Fill masked samples of ``values[...,T]`` with a truncated Fourier fit.

    ``missing`` is boolean, True where a sample is absent.  Observed samples
    are kept exactly; each 1-d slice needs at least ``2*k_fit + 1`` observed
    points.
    """
    values = np.asarray(values, dtype=np.float64)
    missing = np.asarray(missing, dtype=bool)
    if missing.shape != values.shape:
        raise StructuralError(
            f"mask shape {missing.shape} != values shape {values.shape}")
    t = values.shape[-1]
    if grid is None:
        grid = np.linspace(0.0, 1.0, t)
    out = values.copy()
    flat_v = out.reshape(-1, t)
    flat_m = missing.reshape(-1, t)
    for row, mask in zip(flat_v, flat_m):
        if not mask.any():
            continue
        obs = ~mask
        if obs.sum() < 2 * k_fit + 1:
            raise ImputationError(
                f"{int(obs.sum())} observed points < {2 * k_fit + 1} "
                f"needed for a {k_fit}-term fit")
        basis = spectral.fourier_basis_at(grid[obs], k_fit)
        coef, *_ = np.linalg.lstsq(basis.T, row[obs], rcond=None)
        fit = coef @ spectral.fourier_basis_at(grid[mask], k_fit)
        row[mask] = fit
    return out


def perturb_grid(values: np.ndarray, sigma_t: float,
                 seed: int | np.random.Generator, k_fit: int = 10,
                 grid: np.ndarray | None = None) -> np.ndarray:
    """Simulate irregular sampling of ``values[d,T]`` and re-grid.

    Interior grid points are jittered by a 3-sigma-truncated Gaussian with
    std ``sigma_t`` times the mean spacing; a ``k_fit``-term Fourier
    expansion of the curve is evaluated at the jittered points and
    least-squares re-projected onto the original uniform grid.
    """
    if sigma_t < 0.0:
        raise ConfigError("sigma_t must be >= 0")
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    d, t = values.shape
    if grid is None:
        grid = np.linspace(0.0, 1.0, t)
    rng = np.random.default_rng(seed) if isinstance(seed, int) else seed
    spread = sigma_t * float(np.diff(grid).mean())
    if spread > 0.0:
        jitter = np.clip(rng.normal(0.0, spread, size=t - 2),
                         -3.0 * spread, 3.0 * spread)
    else:
        jitter = np.zeros(t - 2)
    pos = grid.copy()
    pos[1:-1] = np.clip(grid[1:-1] + jitter, 0.0, 1.0)
    pos.sort()
    basis_grid = spectral.fourier_basis_at(grid, k_fit)
    basis_jit = spectral.fourier_basis_at(pos, k_fit)
    out = np.empty_like(values)
    for r in range(d):
        coef, *_ = np.linalg.lstsq(basis_grid.T, values[r], rcond=None)
        samples = coef @ basis_jit
        refit, *_ = np.linalg.lstsq(basis_jit.T, samples, rcond=None)
        out[r] = refit @ basis_grid
    return out


def add_noise(values: np.ndarray, sigma: float,
              seed: int | np.random.Generator) -> np.ndarray:
    """Z-score ``values[...,T]`` per slice and add i.i.d. N(0, sigma^2)."""
    if sigma < 0.0:
        raise ConfigError("sigma must be >= 0")
    values = np.asarray(values, dtype=np.float64)
    t = values.shape[-1]
    flat = values.reshape(-1, t)
    std = flat.std(axis=1)
    if np.any(std < 1e-12):
        raise NormalizationError(
            "zero-variance curve cannot be z-score normalized")
    out = (flat - flat.mean(axis=1, keepdims=True)) / std[:, None]
    if sigma > 0.0:
        rng = np.random.default_rng(seed) if isinstance(seed, int) else seed
        out = out + rng.normal(0.0, sigma, size=out.shape)
    return out.reshape(values.shape)


def corrupt_missing(dataset: Dataset, fraction: float, seed: int,
                    k_fit: int = 10) -> Dataset:
    """Drop a uniform fraction of samples per curve and impute them back."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"missing fraction must be in [0,1), got {fraction}")
    rng = np.random.default_rng(seed)
    mask = rng.random(dataset.values.shape) < fraction
    values = impute_missing(dataset.values, mask, k_fit, dataset.grid)
    return Dataset(values=values, grid=dataset.grid, labels=dataset.labels,
                   warps=dataset.warps)


def corrupt_grid(dataset: Dataset, sigma_t: float, seed: int,
                 k_fit: int = 10) -> Dataset:
    """Apply per-curve sampling jitter and reconstruction to a dataset."""
    rng = np.random.default_rng(seed)
    values = np.stack([perturb_grid(dataset.values[i], sigma_t, rng, k_fit,
                                    dataset.grid)
                       for i in range(dataset.n)])
    return Dataset(values=values, grid=dataset.grid, labels=dataset.labels,
                   warps=dataset.warps)


def corrupt_noise(dataset: Dataset, sigma: float, seed: int) -> Dataset:
    """Z-score every curve dimension and add Gaussian noise."""
    values = add_noise(dataset.values, sigma, seed)
    return Dataset(values=values, grid=dataset.grid, labels=dataset.labels,
                   warps=dataset.warps)
