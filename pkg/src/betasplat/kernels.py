"""Scalar Beta-kernel math: shape transforms, 1D profile, bell-curve diagnostics.

The kernel profile is ``(1 - x) ** beta`` on ``x in [0, 1)``.  A shape
parameter ``b`` selects the exponent: the shared spatial exponent is
``4 * exp(b_x)`` while each extra (view/time) dimension uses ``exp(b_q)``.
``b = 0`` is the bell-like operating point; training clamps ``b`` to
[SHAPE_MIN, SHAPE_MAX] after every optimizer step.
"""

from __future__ import annotations

import numpy as np

SHAPE_MIN = -5.0
SHAPE_MAX = 5.0


def spatial_exponent(b_x):
    """Exponent for the three shared spatial dimensions: ``4 * exp(b_x)``."""
    return 4.0 * np.exp(b_x)


def query_exponent(b_q):
    """Per-dimension exponent for non-spatial dimensions: ``exp(b_q)``."""
    return np.exp(b_q)


def beta1d(x, beta):
    """Evaluate ``(1 - x) ** beta`` for ``x in [0, 1)``, ``beta > 0``.

    Computed as ``exp(beta * log1p(-x))`` so large exponents near the
    support edge do not lose precision to cancellation.
    """
    x = np.asarray(x, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(x < 0.0) or np.any(x >= 1.0):
        raise ValueError("beta1d argument outside [0, 1)")
    if np.any(beta <= 0.0):
        raise ValueError("beta1d exponent must be positive")
    return np.exp(beta * np.log1p(-x))


def gaussian_limit_gap(beta: float, grid_size: int) -> float:
    """Max deviation between the Beta profile and its bell-curve surrogate.

    Scans ``d`` on a uniform grid over [0, 0.999] and returns
    ``max |(1 - d)**beta - exp(-(beta + 0.5) * d**2)|``.  This is a
    regression statistic (the surrogate is a loose stand-in, not a bound);
    tests pin its value, nothing gates on it.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    d = np.linspace(0.0, 0.999, grid_size)
    gap = np.abs(beta1d(d, beta) - np.exp(-(beta + 0.5) * d * d))
    return float(gap.max())


def clamp_shapes(b):
    """Post-step clamp of shape parameters to the usable flat-to-sharp range."""
    return np.clip(b, SHAPE_MIN, SHAPE_MAX)
