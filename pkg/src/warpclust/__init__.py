"""Joint time-series alignment and clustering with monotone neural-flow warps.

The package couples three pieces into one differentiable objective: a small
convolutional encoder that produces per-curve flow initial conditions, a
neural flow whose integrated trajectories become monotone time warps, and a
Fourier-domain soft clustering head whose assignments both weight the
alignment loss and mix per-cluster warps.  Training minimizes

    L_total = L_reg + alpha * L_clu

where ``L_reg`` measures within-cluster dispersion of square-root velocity
transforms after warping and ``L_clu`` is a self-sharpening KL clustering
loss on Fourier coefficients.
"""

from __future__ import annotations

__version__ = "0.1.0"
