"""Square-root velocity transforms, weighted templates, and alignment loss.

A curve ``x`` sampled on a uniform grid over [0,1] maps to its square-root
velocity form ``q = dx/dt / sqrt(|dx/dt| + eps)``; under this representation
the elastic distance between curves becomes a plain L2 distance, so cluster
templates are weighted means and the alignment loss is a weighted sum of
squared distances.  All functions here build autodiff graphs, so gradients
flow back into curve values (and through them into warps).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import EmptyClusterError, StructuralError

SMOOTH_EPS = 1e-6


def discrete_derivative(x: ad.Node) -> ad.Node:
    """Differentiate samples ``x[..., T]`` on a uniform grid over [0,1].

    Central differences on interior points; second-order one-sided stencils
    at the two endpoints (plain forward/backward difference when T == 2).
    Written difference-first so constant inputs map to exact zeros.
    """
    t = x.shape[-1]
    ax = len(x.shape) - 1
    if t < 2:
        raise StructuralError(f"derivative needs at least 2 samples, got {t}")
    h = 1.0 / (t - 1)
    if t == 2:
        d = (ad.narrow(x, ax, 1, 1) - ad.narrow(x, ax, 0, 1)) * (1.0 / h)
        return ad.concat([d, d], axis=ax)
    interior = (ad.narrow(x, ax, 2, t - 2) - ad.narrow(x, ax, 0, t - 2)) \
        * (0.5 / h)
    x0 = ad.narrow(x, ax, 0, 1)
    x1 = ad.narrow(x, ax, 1, 1)
    x2 = ad.narrow(x, ax, 2, 1)
    first = (x1 - x0) * (2.0 / h) - (x2 - x0) * (0.5 / h)
    xl = ad.narrow(x, ax, t - 1, 1)
    xl1 = ad.narrow(x, ax, t - 2, 1)
    xl2 = ad.narrow(x, ax, t - 3, 1)
    last = (xl - xl1) * (2.0 / h) - (xl - xl2) * (0.5 / h)
    return ad.concat([first, interior, last], axis=ax)


def srvf_transform(x: ad.Node, smooth_eps: float = SMOOTH_EPS) -> ad.Node:
    """Map curve values ``x[..., T]`` to their square-root velocity form.

    The signed square root is smoothed as ``v / sqrt(|v| + smooth_eps)`` so
    the transform stays differentiable where the derivative vanishes.
    """
    v = discrete_derivative(x)
    return v / ad.sqrt(ad.absval(v) + smooth_eps)


def karcher_templates(q: ad.Node, p: ad.Node) -> ad.Node:
    """Weighted mean templates ``mu[C,d,T]`` from ``q[N,d,T]`` and ``p[N,C]``.

    Column ``j`` is ``sum_i p[i,j] q_i / sum_i p[i,j]``; a column with zero
    total mass has no members to average and raises.
    """
    n, d, t = q.shape
    mass = p.value.sum(axis=0)
    dead = np.flatnonzero(mass <= 0.0)
    if dead.size:
        raise EmptyClusterError(
            f"cluster {int(dead[0])} has zero total weight")
    num = ad.matmul(ad.transpose(p, (1, 0)), ad.reshape(q, (n, d * t)))
    den = p.sum(axis=0, keepdims=True)  # [1, C]
    mu = num / ad.transpose(den, (1, 0))
    return ad.reshape(mu, (p.shape[1], d, t))


def karcher_mean(q: ad.Node, weights: ad.Node) -> ad.Node:
    """Single weighted-mean template ``[d,T]`` from ``q[N,d,T]``, ``w[N]``."""
    mu = karcher_templates(q, ad.reshape(weights, (q.shape[0], 1)))
    return ad.reshape(mu, q.shape[1:])


def registration_loss(q: ad.Node, templates: ad.Node, p: ad.Node) -> ad.Node:
    """Soft within-cluster dispersion ``sum_ij p[i,j] ||q_i - mu_j||^2``.

    The squared norm averages over grid points and sums over dimensions, so
    the value is stable under grid refinement.
    """
    n, d, t = q.shape
    c = templates.shape[0]
    diff = ad.reshape(q, (n, 1, d, t)) - ad.reshape(templates, (1, c, d, t))
    dist = (diff * diff).mean(axis=3).sum(axis=2)  # [N, C]
    return (p * dist).sum()
