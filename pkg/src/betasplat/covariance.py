"""Covariance construction from the block-triangular spatial-orthogonal factor.

The N x N factor is

    L = [ R diag(s_x)      0        ]
        [ L_qx          diag(s_q)   ]

with R the first-order rotation ``I + A`` of a skew-symmetric generator.
``Sigma = L L^T`` is positive semidefinite by construction and keeps the
spatial 3x3 block an explicit rotation-times-scale while the lower block
carries cross-dimensional correlations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CovFactors:
    """Factor parameters for one primitive (scales already activated, > 0)."""

    rot_params: np.ndarray  # (3,) skew generator entries a1, a2, a3
    s_x: np.ndarray         # (3,) spatial scales, > 0
    l_qx: np.ndarray        # (C, 3) cross block
    s_q: np.ndarray         # (C,) non-spatial scales, > 0

    def __post_init__(self):
        self.rot_params = np.asarray(self.rot_params, dtype=np.float64).reshape(3)
        self.s_x = np.asarray(self.s_x, dtype=np.float64).reshape(3)
        self.l_qx = np.asarray(self.l_qx, dtype=np.float64).reshape(-1, 3)
        self.s_q = np.asarray(self.s_q, dtype=np.float64).reshape(-1)
        if self.l_qx.shape[0] != self.s_q.shape[0]:
            raise ValueError("l_qx and s_q disagree on the number of extra dims")
        if not (np.all(np.isfinite(self.rot_params)) and np.all(np.isfinite(self.s_x))
                and np.all(np.isfinite(self.l_qx)) and np.all(np.isfinite(self.s_q))):
            raise ValueError("non-finite covariance factors")
        if np.any(self.s_x <= 0.0) or np.any(self.s_q <= 0.0):
            raise ValueError("scales must be strictly positive")

    @property
    def n_query_dims(self) -> int:
        return self.s_q.shape[0]


@dataclass
class CovBlocks:
    """Partition of ``L L^T`` into spatial / cross / query blocks."""

    sigma_x: np.ndarray   # (3, 3)
    sigma_xq: np.ndarray  # (3, C)
    sigma_q: np.ndarray   # (C, C)


def rotation_first_order(rot_params):
    """First-order rotation ``I + A`` from skew generator entries.

    Accepts (..., 3) and returns (..., 3, 3).  Not exactly orthogonal;
    ``det = 1 + |a|^2`` so the map is always invertible.
    """
    a = np.asarray(rot_params, dtype=np.float64)
    a1, a2, a3 = a[..., 0], a[..., 1], a[..., 2]
    zero = np.zeros_like(a1)
    one = np.ones_like(a1)
    rows = [
        np.stack([one, -a3, a2], axis=-1),
        np.stack([a3, one, -a1], axis=-1),
        np.stack([-a2, a1, one], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def build_l(factors: CovFactors) -> np.ndarray:
    """Assemble the dense (N, N) lower-block factor for one primitive."""
    c = factors.n_query_dims
    n = 3 + c
    out = np.zeros((n, n), dtype=np.float64)
    out[:3, :3] = rotation_first_order(factors.rot_params) * factors.s_x[None, :]
    if c:
        out[3:, :3] = factors.l_qx
        out[3:, 3:] = np.diag(factors.s_q)
    return out


def covariance_blocks(factors: CovFactors) -> CovBlocks:
    """Blocks of ``Sigma = L L^T`` without forming the dense product.

    sigma_x  = L_x L_x^T
    sigma_xq = L_x L_qx^T
    sigma_q  = L_qx L_qx^T + diag(s_q)^2
    """
    l_x = rotation_first_order(factors.rot_params) * factors.s_x[None, :]
    sigma_x = l_x @ l_x.T
    c = factors.n_query_dims
    if c == 0:
        return CovBlocks(sigma_x, np.zeros((3, 0)), np.zeros((0, 0)))
    sigma_xq = l_x @ factors.l_qx.T
    sigma_q = factors.l_qx @ factors.l_qx.T + np.diag(factors.s_q ** 2)
    return CovBlocks(sigma_x, sigma_xq, sigma_q)


def batched_blocks(rot, s_x, l_qx, s_q):
    """Vectorized covariance blocks for a whole scene.

    rot (n,3), s_x (n,3), l_qx (n,C,3), s_q (n,C) ->
    (sigma_x (n,3,3), sigma_xq (n,3,C), sigma_q (n,C,C), l_x (n,3,3)).
    """
    l_x = rotation_first_order(rot) * s_x[:, None, :]
    sigma_x = l_x @ np.swapaxes(l_x, -1, -2)
    n, c = s_q.shape
    if c == 0:
        return sigma_x, np.zeros((n, 3, 0)), np.zeros((n, 0, 0)), l_x
    sigma_xq = l_x @ np.swapaxes(l_qx, -1, -2)
    sigma_q = l_qx @ np.swapaxes(l_qx, -1, -2)
    idx = np.arange(c)
    sigma_q[:, idx, idx] += s_q ** 2
    return sigma_x, sigma_xq, sigma_q, l_x


def invert_query_block(sigma_q, jitter: float = 1e-8):
    """Invert the (n, C, C) query blocks, jittering any that fail Cholesky.

    Returns (inverse, degenerate_mask).  A block that stays non-PD after one
    jitter of ``jitter * I`` is marked degenerate and its inverse slot is
    identity (callers must skip those primitives).
    """
    n, c, _ = sigma_q.shape
    degenerate = np.zeros(n, dtype=bool)
    if c == 0:
        return np.zeros((n, 0, 0)), degenerate
    mat = sigma_q.copy()
    finite = np.isfinite(mat).all(axis=(1, 2))
    if not finite.all():
        degenerate |= ~finite
        mat[~finite] = np.eye(c)
    try:
        np.linalg.cholesky(mat)
        bad = None
    except np.linalg.LinAlgError:
        bad = _non_pd_rows(mat)
    if bad is not None and bad.any():
        mat[bad] += jitter * np.eye(c)
        still = _non_pd_rows(mat)
        if still.any():
            degenerate |= still
            mat[still] = np.eye(c)
    return np.linalg.inv(mat), degenerate


def _non_pd_rows(mats) -> np.ndarray:
    bad = np.zeros(mats.shape[0], dtype=bool)
    for i, m in enumerate(mats):
        try:
            np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            bad[i] = True
    return bad


def parameter_count(n_dims: int) -> dict:
    """Per-primitive parameter budget by field group.

    The covariance entry is the triangular-factor count N (N + 1) / 2, the
    storage a generic N-D Cholesky factor needs; the spatial-orthogonal
    layout spans the same factor with fewer raw floats (rotation 3 +
    spatial scales 3 + cross block 3C + query scales C).
    """
    if n_dims not in (3, 6, 7):
        raise ValueError(f"unsupported dimensionality {n_dims}")
    c = n_dims - 3
    counts = {
        "position": 3,
        "query_mean": c,
        "covariance": n_dims * (n_dims + 1) // 2,
        "shape": 1 + c,
        "opacity": 1,
        "color": 3,
    }
    counts["total"] = sum(counts.values())
    return counts
