"""Fourier features, Student-t soft assignment, and the clustering loss.

Aligned curves are summarized by their first K coefficients in an orthonormal
Fourier basis; soft cluster memberships come from a Student-t kernel between
those coefficients and trainable centroids, and a KL loss pulls the
memberships toward a sharpened, mass-balanced target distribution.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, EmptyClusterError

DEFAULT_BASIS_SIZE = 10
DEFAULT_KERNEL_DOF = 1.0


def fourier_basis_at(pos: np.ndarray, k: int) -> np.ndarray:
    """First ``k`` basis functions evaluated at positions in [0,1], ``[k,P]``.

    Ordering: constant, then sqrt(2)cos(2 pi m t) / sqrt(2)sin(2 pi m t)
    interleaved for m = 1, 2, ...
    """
    if k < 1:
        raise ConfigError(f"basis size must be >= 1, got {k}")
    pos = np.asarray(pos, dtype=np.float64)
    basis = np.empty((k, pos.size))
    basis[0] = 1.0
    for idx in range(1, k):
        m = (idx + 1) // 2
        phase = 2.0 * np.pi * m * pos
        basis[idx] = np.sqrt(2.0) * (np.cos(phase) if idx % 2 else np.sin(phase))
    return basis


@lru_cache(maxsize=None)
def fourier_basis(t: int, k: int) -> np.ndarray:
    """First ``k`` orthonormal Fourier functions sampled at ``j/t``.

    Rows are exactly orthonormal under the discrete inner product
    ``(1/t) sum_j``; see :func:`fourier_basis_at` for the ordering.
    """
    if k > t:
        raise ConfigError(f"basis size {k} exceeds grid length {t}")
    return fourier_basis_at(np.arange(t) / t, k)


def fourier_project(x, k: int = DEFAULT_BASIS_SIZE):
    """Coefficients of ``x[..., T]`` in the truncated basis, shape ``[..., k]``.

    Multivariate curves ``[N,d,T]`` yield dimension-major concatenated
    coefficients ``[N, d*k]``. Accepts a tape node (differentiable) or a
    plain array (returns an array).
    """
    t = x.shape[-1]
    basis = fourier_basis(t, k)
    lead = x.shape[:-1]
    rows = int(np.prod(lead, dtype=np.int64)) if lead else 1
    if isinstance(x, np.ndarray):
        coeffs = x.reshape(rows, t) @ (basis.T / t)
        if len(lead) == 2:
            return coeffs.reshape(lead[0], lead[1] * k)
        return coeffs.reshape(lead + (k,))
    proj = x.tape.leaf(basis.T / t, name="fourier_basis")
    coeffs = ad.matmul(ad.reshape(x, (rows, t)), proj)
    if len(lead) == 2:  # [N, d, T] -> [N, d*k]
        return ad.reshape(coeffs, (lead[0], lead[1] * k))
    return ad.reshape(coeffs, lead + (k,))


def soft_assign(coeffs: ad.Node, centroids: ad.Node,
                dof: float = DEFAULT_KERNEL_DOF) -> ad.Node:
    """Row-stochastic Student-t memberships of ``coeffs[N,F]`` to ``[C,F]``.

    ``p[i,j]`` is proportional to ``(1 + ||a_i - c_j||^2 / dof)^-((dof+1)/2)``
    and differentiable with respect to both inputs.
    """
    if dof <= 0:
        raise ConfigError(f"kernel dof must be positive, got {dof}")
    n, f = coeffs.shape
    c = centroids.shape[0]
    diff = ad.reshape(coeffs, (n, 1, f)) - ad.reshape(centroids, (1, c, f))
    d2 = (diff * diff).sum(axis=2)
    kern = ad.power(1.0 + d2 / dof, -(dof + 1.0) / 2.0)
    return kern / kern.sum(axis=1, keepdims=True)


def target_distribution(p: np.ndarray) -> np.ndarray:
    """Sharpened self-training target ``q ~ p^2 / cluster mass``, row-wise.

    Returns a plain array: the target is a constant when used in the loss.
    """
    mass = p.sum(axis=0)
    dead = np.flatnonzero(mass <= 0.0)
    if dead.size:
        raise EmptyClusterError(
            f"cluster {int(dead[0])} has zero soft mass in the target")
    w = p * p / mass
    return w / w.sum(axis=1, keepdims=True)


def clustering_loss(target: np.ndarray, p: ad.Node) -> ad.Node:
    """KL(target || p) with the 0*log(0) = 0 convention.

    The target enters as a constant, so gradients flow only into ``p``.
    """
    safe = np.where(target > 0.0, target, 1.0)
    qlogq = float((target * np.log(safe)).sum())
    tape = p.tape
    cross = (tape.leaf(target, name="kl_target") * ad.log(p)).sum()
    return tape.leaf(qlogq) - cross
