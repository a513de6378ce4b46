"""Conditioning an N-D primitive on its query dimensions.

Given a query (view direction and/or time) the N-D splat collapses to a
renderable 3D one: the spatial mean shifts by a shape-weighted regression
onto the query offset, the spatial covariance loses a shape-weighted Schur
term, and the opacity is attenuated by a per-dimension product gate

    d_raw = sigma_q^-1 (q - mu_q)
    d_i   = max(tanh(d_raw_i / 2), 0)
    gate  = prod_i (1 - d_i)^(4 * exp(b_qi))

With all shape weights at 1 the mean/covariance reduce to the textbook
conditional of a joint normal, which the test suite checks against an
independent dense implementation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .covariance import CovBlocks, batched_blocks, invert_query_block, rotation_first_order
from .kernels import query_exponent, spatial_exponent
from .config import DEFAULT_SETTINGS, RenderSettings
from .scene import Primitive, Scene, sigmoid

log = logging.getLogger(__name__)


class DegeneratePrimitiveError(ValueError):
    """Query-block covariance is singular even after jitter."""


@dataclass
class Query:
    """Non-spatial coordinates of one frame.

    Layout matches the scene's extra dims: empty for 3D, a unit view
    direction for 6D, and normalized time followed by a unit view
    direction for 7D.
    """

    dims: np.ndarray

    def __post_init__(self):
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(-1)
        c = self.dims.shape[0]
        if c not in (0, 3, 4):
            raise ValueError(f"query must have 0, 3, or 4 dims, got {c}")
        if c >= 3:
            d = self.dims[c - 3:]
            if abs(np.linalg.norm(d) - 1.0) > 1e-6:
                raise ValueError("view direction must be unit length")
        if c == 4 and not 0.0 <= self.dims[0] <= 1.0:
            raise ValueError("time must lie in [0, 1]")

    @classmethod
    def static(cls) -> "Query":
        return cls(np.zeros(0))

    @classmethod
    def view(cls, direction) -> "Query":
        d = np.asarray(direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n == 0.0:
            raise ValueError("zero view direction")
        return cls(d / n)

    @classmethod
    def view_time(cls, t: float, direction) -> "Query":
        d = np.asarray(direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n == 0.0:
            raise ValueError("zero view direction")
        return cls(np.concatenate([[float(t)], d / n]))


@dataclass
class ConditionedSplat:
    """A 3D splat produced by conditioning: what the rasterizer consumes."""

    mean3: np.ndarray
    cov3: np.ndarray
    beta_x: float
    gated_opacity: float
    color: np.ndarray


def conditional_mean(blocks: CovBlocks, mu_x, mu_q, beta_q, query: Query) -> np.ndarray:
    """Shape-weighted conditional mean ``mu_x + sigma_xq sigma_q^-1 diag(beta_q) (q - mu_q)``."""
    m = _inverse_or_raise(blocks.sigma_q)
    delta = query.dims - np.asarray(mu_q, dtype=np.float64)
    return np.asarray(mu_x, dtype=np.float64) + blocks.sigma_xq @ (m @ (np.asarray(beta_q) * delta))


def conditional_cov(blocks: CovBlocks, beta_q, apply_floor: bool = True,
                    settings: RenderSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Shape-weighted conditional covariance, symmetrized and optionally floored.

    Raw value is ``sigma_x - sigma_xq sigma_q^-1 diag(beta_q) sigma_qx``;
    shape weights above 1 can over-subtract, so the symmetrized result is
    eigenvalue-floored at ``psd_floor_scale * trace(sigma_x) / 3`` unless
    ``apply_floor`` is off (the equivalence tests compare pre-floor).
    """
    m = _inverse_or_raise(blocks.sigma_q)
    raw = blocks.sigma_x - blocks.sigma_xq @ m @ (np.asarray(beta_q)[:, None] * blocks.sigma_xq.T)
    sym = 0.5 * (raw + raw.T)
    if not apply_floor:
        return sym
    eps = settings.psd_floor_scale * np.trace(blocks.sigma_x) / 3.0
    w, v = np.linalg.eigh(sym)
    if w[0] >= eps:
        return sym
    log.debug("conditional covariance floored: min eigenvalue %.3e < %.3e", w[0], eps)
    return (v * np.maximum(w, eps)) @ v.T


def opacity_gate(sigma_q, mu_q, beta_q, base_o: float, query: Query,
                 symmetric: bool = False) -> float:
    """Product-form opacity attenuation; equals ``base_o`` at ``q = mu_q``.

    The clamp is one-sided: components with negative raw offset contribute
    no attenuation.  ``symmetric=True`` swaps in ``|tanh(d/2)|`` (ablation).
    """
    m = _inverse_or_raise(np.asarray(sigma_q, dtype=np.float64))
    delta = query.dims - np.asarray(mu_q, dtype=np.float64)
    d_raw = m @ delta
    s = np.tanh(0.5 * d_raw)
    d = np.abs(s) if symmetric else np.maximum(s, 0.0)
    return float(base_o * np.exp(np.sum(4.0 * np.asarray(beta_q) * np.log1p(-d))))


def slice_primitive(prim: Primitive, query: Query,
                    settings: RenderSettings = DEFAULT_SETTINGS) -> ConditionedSplat:
    """Condition a single primitive on a query.

    For a 3D primitive (empty query) the spatial parts pass through
    untouched and the gate is the empty product.
    """
    if prim.n_query_dims != query.dims.shape[0]:
        raise ValueError("query length does not match primitive dimensionality")
    cache = slice_scene(Scene.from_primitives(prim.n_query_dims + 3, [prim]), query, settings)
    if not cache.valid[0]:
        raise DegeneratePrimitiveError("query covariance block is singular")
    return ConditionedSplat(mean3=cache.mean3[0], cov3=cache.cov3[0],
                            beta_x=float(cache.beta_x[0]),
                            gated_opacity=float(cache.gated_opacity[0]),
                            color=cache.color[0].copy())


@dataclass
class SliceCache:
    """Batched conditioning of a whole scene, with everything backward needs."""

    valid: np.ndarray          # (n,) False where the query block was singular
    mean3: np.ndarray          # (n, 3)
    cov3: np.ndarray           # (n, 3, 3) floored
    beta_x: np.ndarray         # (n,)
    gated_opacity: np.ndarray  # (n,)
    color: np.ndarray          # (n, 3)
    # intermediates (None for C = 0 where noted)
    opacity: np.ndarray        # (n,) base opacity after logistic
    gate: np.ndarray           # (n,) product gate
    beta_q: np.ndarray         # (n, C)
    delta: np.ndarray          # (n, C)
    m_inv: np.ndarray          # (n, C, C) inverse query block
    u: np.ndarray              # (n, C) beta_q * delta
    v: np.ndarray              # (n, C) m_inv @ u
    sigma_xq: np.ndarray       # (n, 3, C)
    d_raw: np.ndarray          # (n, C)
    s_tanh: np.ndarray         # (n, C)
    d_gate: np.ndarray         # (n, C)
    cov3_eigval: np.ndarray    # (n, 3)
    cov3_eigvec: np.ndarray    # (n, 3, 3)
    floor_eps: np.ndarray      # (n,)
    floored: np.ndarray        # (n,) bool
    l_x: np.ndarray            # (n, 3, 3)
    rotation: np.ndarray       # (n, 3, 3)
    s_x: np.ndarray            # (n, 3)
    s_q: np.ndarray            # (n, C)


def slice_scene(scene: Scene, query: Query,
                settings: RenderSettings = DEFAULT_SETTINGS) -> SliceCache:
    """Vectorized conditioning of every primitive in the scene."""
    c = scene.n_query_dims
    if query.dims.shape[0] != c:
        raise ValueError(f"query has {query.dims.shape[0]} dims, scene expects {c}")
    n = scene.n_primitives
    s_x = np.exp(scene.s_x_raw)
    s_q = np.exp(scene.s_q_raw)
    sigma_x, sigma_xq, sigma_q, l_x = batched_blocks(scene.rot, s_x, scene.l_qx, s_q)
    rotation = rotation_first_order(scene.rot)
    m_inv, degenerate = invert_query_block(sigma_q)
    valid = ~degenerate
    if degenerate.any():
        log.warning("%d degenerate primitives skipped during slicing", int(degenerate.sum()))

    beta_x = spatial_exponent(scene.b_x)
    beta_q = query_exponent(scene.b_q)
    opacity = sigmoid(scene.opacity_raw)

    delta = query.dims[None, :] - scene.mu_q
    u = beta_q * delta
    v = np.einsum("nij,nj->ni", m_inv, u)
    mean3 = scene.mu_x + np.einsum("nij,nj->ni", sigma_xq, v)

    weighted = beta_q[:, :, None] * np.swapaxes(sigma_xq, -1, -2)  # diag(beta_q) @ sigma_qx
    raw = sigma_x - sigma_xq @ m_inv @ weighted
    sym = 0.5 * (raw + np.swapaxes(raw, -1, -2))
    floor_eps = settings.psd_floor_scale * np.trace(sigma_x, axis1=-2, axis2=-1) / 3.0
    eigval, eigvec = np.linalg.eigh(sym)
    floored = eigval[:, 0] < floor_eps
    if floored.any():
        log.debug("conditioned covariance floored for %d primitives", int(floored.sum()))
        clamped = np.maximum(eigval, floor_eps[:, None])
        cov3 = np.where(floored[:, None, None],
                        np.einsum("nij,nj,nkj->nik", eigvec, clamped, eigvec), sym)
    else:
        cov3 = sym

    d_raw = np.einsum("nij,nj->ni", m_inv, delta)
    s_tanh = np.tanh(0.5 * d_raw)
    d_gate = np.abs(s_tanh) if settings.gate_symmetric else np.maximum(s_tanh, 0.0)
    gate = np.exp(np.sum(4.0 * beta_q * np.log1p(-d_gate), axis=1)) if c else np.ones(n)
    gated = opacity * gate

    return SliceCache(valid=valid, mean3=mean3, cov3=cov3, beta_x=beta_x,
                      gated_opacity=gated, color=scene.color, opacity=opacity,
                      gate=gate, beta_q=beta_q, delta=delta, m_inv=m_inv, u=u, v=v,
                      sigma_xq=sigma_xq, d_raw=d_raw, s_tanh=s_tanh, d_gate=d_gate,
                      cov3_eigval=eigval, cov3_eigvec=eigvec, floor_eps=floor_eps,
                      floored=floored, l_x=l_x, rotation=rotation, s_x=s_x, s_q=s_q)


def _inverse_or_raise(sigma_q: np.ndarray, jitter: float = 1e-8) -> np.ndarray:
    m, degenerate = invert_query_block(sigma_q[None])
    if degenerate[0]:
        raise DegeneratePrimitiveError("query covariance block is singular")
    return m[0]
