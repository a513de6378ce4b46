"""Hand-written reverse-mode gradients for the render-to-loss pipeline.

Each forward stage (conditioning, projection, footprint, compositing, loss)
has a matching adjoint written against its cached intermediates; there is
no generic tape.  Clamps, floors, and culls are treated as piecewise
definitions: zero gradient past a boundary, the exact eigenvalue-clamp
adjoint where a floor is engaged.  ``fd_check`` verifies every scalar
parameter against central finite differences and detects and excludes
parameters whose perturbation flips a discrete branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._tiles import tile_backward
from .config import DEFAULT_SETTINGS, RenderSettings
from .metrics import ssim_and_grad
from .raster import FrameCache, _map_tiles, _pixel_xy, render_with_cache
from .scene import PARAM_FIELDS, Scene, sigmoid


class GradientError(RuntimeError):
    """A backward pass produced a non-finite gradient."""


@dataclass
class LossConfig:
    """Weights of the composite training objective.

    total = loss_scale * ((1 - lambda_ssim) * L1 + lambda_ssim * (1 - SSIM)
            + lambda_o * sum |o_i| + lambda_sigma * sum ||scales_i||_1)
    """

    lambda_ssim: float = 0.2
    lambda_o: float = 0.01
    lambda_sigma: float = 0.01
    loss_scale: float = 1.0


@dataclass
class SceneGrads:
    """One gradient slot per primitive parameter field."""

    mu_x: np.ndarray
    mu_q: np.ndarray
    rot: np.ndarray
    s_x_raw: np.ndarray
    l_qx: np.ndarray
    s_q_raw: np.ndarray
    b_x: np.ndarray
    b_q: np.ndarray
    opacity_raw: np.ndarray
    color: np.ndarray

    @classmethod
    def zeros_like(cls, scene: Scene) -> "SceneGrads":
        return cls(**{name: np.zeros_like(getattr(scene, name)) for name, _ in PARAM_FIELDS})

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name, _ in PARAM_FIELDS}

    def check_finite(self):
        for name, arr in self.arrays().items():
            bad = ~np.isfinite(arr)
            if bad.any():
                prim = int(np.nonzero(bad.reshape(arr.shape[0], -1).any(axis=1))[0][0])
                raise GradientError(f"non-finite gradient in {name!r} of primitive {prim}")


def loss_value(scene: Scene, frames, cfg: LossConfig = LossConfig(),
               settings: RenderSettings = DEFAULT_SETTINGS,
               with_signature: bool = False):
    """Forward-only objective over a batch of (camera, query, target) frames."""
    rec = 0.0
    signature = []
    for cam, query, target in frames:
        cache = render_with_cache(scene, cam, query, settings)
        diff = cache.image - target
        l1 = np.abs(diff).mean()
        s = ssim_and_grad(cache.image, target, want_grad=False)[0]
        rec += (1.0 - cfg.lambda_ssim) * l1 + cfg.lambda_ssim * (1.0 - s)
        if with_signature:
            signature.append(cache.trace_signature())
            signature.append(np.sign(diff).tobytes())
    rec /= len(frames)
    total = cfg.loss_scale * (rec + _regularizers(scene, cfg))
    if with_signature:
        return total, tuple(signature)
    return total


def _regularizers(scene: Scene, cfg: LossConfig) -> float:
    opacity = sigmoid(scene.opacity_raw)
    scales = np.exp(scene.s_x_raw).sum() + np.exp(scene.s_q_raw).sum()
    return cfg.lambda_o * opacity.sum() + cfg.lambda_sigma * scales


def backward(scene: Scene, frames, cfg: LossConfig = LossConfig(),
             settings: RenderSettings = DEFAULT_SETTINGS):
    """Loss over the batch plus exact gradients for every primitive field."""
    if not frames:
        raise ValueError("empty batch")
    grads = SceneGrads.zeros_like(scene)
    rec = 0.0
    for cam, query, target in frames:
        cache = render_with_cache(scene, cam, query, settings)
        diff = cache.image - target
        l1 = np.abs(diff).mean()
        s, g_ssim = ssim_and_grad(cache.image, target)
        rec += (1.0 - cfg.lambda_ssim) * l1 + cfg.lambda_ssim * (1.0 - s)
        g_image = cfg.loss_scale / len(frames) * (
            (1.0 - cfg.lambda_ssim) * np.sign(diff) / diff.size
            - cfg.lambda_ssim * g_ssim)
        _frame_backward(cache, g_image, grads)
    rec /= len(frames)

    opacity = sigmoid(scene.opacity_raw)
    grads.opacity_raw += cfg.loss_scale * cfg.lambda_o * opacity * (1.0 - opacity)
    grads.s_x_raw += cfg.loss_scale * cfg.lambda_sigma * np.exp(scene.s_x_raw)
    grads.s_q_raw += cfg.loss_scale * cfg.lambda_sigma * np.exp(scene.s_q_raw)

    grads.check_finite()
    total = cfg.loss_scale * (rec + _regularizers(scene, cfg))
    return total, grads


def _frame_backward(cache: FrameCache, g_image: np.ndarray, out: SceneGrads):
    scene, settings = cache.scene, cache.settings
    slices, proj = cache.slices, cache.proj
    n = scene.n_primitives
    g_mean2 = np.zeros((n, 2))
    g_cov2 = np.zeros((n, 2, 2))
    g_ogate = np.zeros(n)
    g_betax = np.zeros(n)
    g_color = np.zeros((n, 3))

    bg = scene.background

    def run_tile(tile):
        y0, y1, x0, x1, idx = tile
        if idx.size == 0:
            return None
        px, py = _pixel_xy(y0, y1, x0, x1)
        k = idx.size
        p2 = proj.p2[idx]
        pg_mean2 = np.zeros((k, 2))
        pg_p2 = np.zeros((k, 2, 2))
        pg_og = np.zeros(k)
        pg_bx = np.zeros(k)
        pg_color = np.zeros((k, 3))
        g_out = np.ascontiguousarray(g_image[y0:y1, x0:x1].reshape(-1, 3))
        tile_backward(px, py, proj.mean2[idx], p2,
                      slices.gated_opacity[idx], slices.beta_x[idx], scene.color[idx],
                      bg, settings.tau_sq, settings.alpha_clamp,
                      settings.transmittance_min, g_out,
                      pg_mean2, pg_p2, pg_og, pg_bx, pg_color,
                      np.empty(k), np.empty(k), np.empty(k))
        pg_cov2 = -p2 @ pg_p2 @ p2
        return idx, pg_mean2, pg_cov2, pg_og, pg_bx, pg_color

    results = _map_tiles(run_tile, cache.tiles, settings.threads)
    for res in results:
        if res is None:
            continue
        idx, pg_mean2, pg_cov2, pg_og, pg_bx, pg_color = res
        np.add.at(g_mean2, idx, pg_mean2)
        np.add.at(g_cov2, idx, pg_cov2)
        np.add.at(g_ogate, idx, pg_og)
        np.add.at(g_betax, idx, pg_bx)
        np.add.at(g_color, idx, pg_color)

    g_mean3, g_cov3 = _projection_backward(cache, g_mean2, g_cov2)
    _slice_backward(cache, g_mean3, g_cov3, g_ogate, g_betax, g_color, out)


def _projection_backward(cache: FrameCache, g_mean2, g_cov2):
    proj, cam, settings = cache.proj, cache.camera, cache.settings
    slices = cache.slices
    g_pre = _clamp_eig_adjoint(proj.cov2_eigval, proj.cov2_eigvec,
                               settings.screen_cov_floor, proj.floored, g_cov2)
    g_raw = 0.5 * (g_pre + np.swapaxes(g_pre, -1, -2))
    vmat = proj.vmat
    g_cov3 = np.swapaxes(vmat, -1, -2) @ g_raw @ vmat
    g_vmat = (g_raw + np.swapaxes(g_raw, -1, -2)) @ vmat @ slices.cov3
    g_jac = g_vmat @ cam.rotation.T

    t = proj.t_cam
    visible = proj.visible
    z = np.where(proj.depth > settings.near_plane, proj.depth, 1.0)
    x, y = t[:, 0], t[:, 1]
    fx, fy = cam.fx, cam.fy
    g_x = g_mean2[:, 0] * fx / z
    g_y = g_mean2[:, 1] * fy / z
    g_z = -g_mean2[:, 0] * fx * x / z ** 2 - g_mean2[:, 1] * fy * y / z ** 2
    g_z += g_jac[:, 0, 0] * (-fx / z ** 2) + g_jac[:, 1, 1] * (-fy / z ** 2)
    g_x += g_jac[:, 0, 2] * (-fx / z ** 2)
    g_y += g_jac[:, 1, 2] * (-fy / z ** 2)
    g_z += g_jac[:, 0, 2] * (2.0 * fx * x / z ** 3) + g_jac[:, 1, 2] * (2.0 * fy * y / z ** 3)
    g_tcam = np.stack([g_x, g_y, g_z], axis=1) * visible[:, None]
    g_mean3 = g_tcam @ cam.rotation
    return g_mean3, g_cov3 * visible[:, None, None]


def _slice_backward(cache: FrameCache, g_mean3, g_cov3, g_ogate, g_betax, g_color,
                    out: SceneGrads):
    scene, settings = cache.scene, cache.settings
    s = cache.slices
    c = scene.n_query_dims

    out.color += g_color
    out.b_x += g_betax * s.beta_x

    # opacity gate
    g_o = g_ogate * s.gate
    g_gate = g_ogate * s.opacity
    out.opacity_raw += g_o * s.opacity * (1.0 - s.opacity)

    g_m_inv = np.zeros_like(s.m_inv)
    g_delta = np.zeros_like(s.delta)
    g_beta_q = np.zeros_like(s.beta_q)
    if c:
        gg = (g_gate * s.gate)[:, None]
        g_d = gg * (-4.0 * s.beta_q / (1.0 - s.d_gate))
        g_beta_q += gg * 4.0 * np.log1p(-s.d_gate)
        if settings.gate_symmetric:
            g_s = g_d * np.sign(s.s_tanh)
        else:
            g_s = g_d * (s.s_tanh > 0.0)
        g_w = g_s * 0.5 * (1.0 - s.s_tanh ** 2)
        g_m_inv += np.einsum("ni,nj->nij", g_w, s.delta)
        g_delta += np.einsum("nij,ni->nj", s.m_inv, g_w)

    # conditional mean
    out.mu_x += g_mean3
    g_sigma_xq = np.einsum("ni,nj->nij", g_mean3, s.v)
    g_v = np.einsum("nij,ni->nj", s.sigma_xq, g_mean3)
    g_m_inv += np.einsum("ni,nj->nij", g_v, s.u)
    g_u = np.einsum("nij,ni->nj", s.m_inv, g_v)
    g_beta_q += g_u * s.delta
    g_delta += g_u * s.beta_q

    # conditional covariance (through the floor and the symmetrization)
    g_sym = _clamp_eig_adjoint(s.cov3_eigval, s.cov3_eigvec, s.floor_eps, s.floored, g_cov3)
    g_raw = 0.5 * (g_sym + np.swapaxes(g_sym, -1, -2))
    g_sigma_x = g_raw.copy()
    if c:
        h = s.sigma_xq
        q_mat = s.m_inv * s.beta_q[:, None, :]          # M @ diag(beta_q)
        g_neg = -g_raw                                   # adjoint of the subtracted term
        g_sigma_xq += g_neg @ h @ np.swapaxes(q_mat, -1, -2) \
            + np.swapaxes(g_neg, -1, -2) @ h @ q_mat
        g_q = np.swapaxes(h, -1, -2) @ g_neg @ h
        g_m_inv += g_q * s.beta_q[:, None, :]
        g_beta_q += np.einsum("njk,nkj->nj", s.m_inv, g_q)

    # inverse of the query block, then the blocks themselves
    g_sigma_q = -s.m_inv @ g_m_inv @ s.m_inv if c else np.zeros((scene.n_primitives, 0, 0))
    out.mu_q += -g_delta

    l_x = s.l_x
    g_l_x = (g_sigma_x + np.swapaxes(g_sigma_x, -1, -2)) @ l_x
    if c:
        l_qx = scene.l_qx
        g_l_x += g_sigma_xq @ l_qx
        g_l_qx = np.swapaxes(g_sigma_xq, -1, -2) @ l_x \
            + (g_sigma_q + np.swapaxes(g_sigma_q, -1, -2)) @ l_qx
        out.l_qx += g_l_qx
        g_s_q = 2.0 * s.s_q * np.einsum("nii->ni", g_sigma_q)
        out.s_q_raw += g_s_q * s.s_q
        out.b_q += g_beta_q * s.beta_q

    g_rot_mat = g_l_x * s.s_x[:, None, :]
    g_s_x = np.einsum("njk,njk->nk", g_l_x, s.rotation)
    out.s_x_raw += g_s_x * s.s_x
    out.rot[:, 0] += g_rot_mat[:, 2, 1] - g_rot_mat[:, 1, 2]
    out.rot[:, 1] += g_rot_mat[:, 0, 2] - g_rot_mat[:, 2, 0]
    out.rot[:, 2] += g_rot_mat[:, 1, 0] - g_rot_mat[:, 0, 1]


def _clamp_eig_adjoint(eigval, eigvec, floor, engaged, g):
    """Adjoint of ``X -> V max(L, floor) V^T`` for symmetric X (exact a.e.).

    Rows where the floor never engaged pass the gradient through untouched.
    """
    if not engaged.any():
        return g
    floor = np.broadcast_to(np.asarray(floor, dtype=np.float64), eigval.shape[:1])
    f = np.maximum(eigval, floor[:, None])
    fprime = (eigval > floor[:, None]).astype(np.float64)
    dl = eigval[:, :, None] - eigval[:, None, :]
    df = f[:, :, None] - f[:, None, :]
    avg = 0.5 * (fprime[:, :, None] + fprime[:, None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(np.abs(dl) > 1e-12, df / dl, avg)
    gt = np.swapaxes(eigvec, -1, -2) @ g @ eigvec
    proj = eigvec @ (k * gt) @ np.swapaxes(eigvec, -1, -2)
    return np.where(engaged[:, None, None], proj, g)


@dataclass
class FDEntry:
    prim: int
    field: str
    index: tuple
    analytic: float
    fd: float
    error: float


@dataclass
class FDReport:
    """Outcome of a finite-difference sweep over every scalar parameter."""

    total: int = 0
    checked: int = 0
    passed: int = 0
    excluded_boundary: int = 0
    failures: list = field(default_factory=list)

    @property
    def pass_fraction(self) -> float:
        return 1.0 if self.checked == 0 else self.passed / self.checked

    def to_dict(self) -> dict:
        return {
            "total_parameters": self.total,
            "checked": self.checked,
            "passed": self.passed,
            "excluded_boundary": self.excluded_boundary,
            "pass_fraction": self.pass_fraction,
            "failures": [vars(f) | {"index": list(f.index)} for f in self.failures],
        }


def fd_check(scene: Scene, frames, cfg: LossConfig = LossConfig(),
             settings: RenderSettings = DEFAULT_SETTINGS,
             eps: float = 1e-4, tol_rel: float = 1e-3) -> FDReport:
    """Compare analytic gradients against central differences, per scalar.

    A parameter whose +/- eps evaluations land in a different discrete
    branch than the center (cull set, floor engagement, gate sign, alpha
    clamp, depth order, early-out extent, or L1 sign pattern) is excluded
    from the pass statistics and counted as a boundary crossing.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    _, grads = backward(scene, frames, cfg, settings)
    _, sig0 = loss_value(scene, frames, cfg, settings, with_signature=True)
    report = FDReport()
    work = scene.copy()
    for name, _ in PARAM_FIELDS:
        arr = getattr(work, name)
        ana = getattr(grads, name)
        for flat in range(arr.size):
            idx = np.unravel_index(flat, arr.shape) if arr.ndim > 1 else (flat,)
            report.total += 1
            orig = arr[idx]
            arr[idx] = orig + eps
            lp, sp = loss_value(work, frames, cfg, settings, with_signature=True)
            arr[idx] = orig - eps
            lm, sm = loss_value(work, frames, cfg, settings, with_signature=True)
            arr[idx] = orig
            if sp != sig0 or sm != sig0:
                report.excluded_boundary += 1
                continue
            fd = (lp - lm) / (2.0 * eps)
            a = float(ana[idx])
            report.checked += 1
            err = abs(a - fd)
            rel = err / max(abs(a), abs(fd), 1e-300)
            if rel <= tol_rel or err <= tol_rel * (1.0 + abs(fd)):
                report.passed += 1
            else:
                report.failures.append(FDEntry(prim=int(idx[0]), field=name,
                                               index=tuple(int(i) for i in idx[1:]),
                                               analytic=a, fd=fd, error=rel))
    return report
