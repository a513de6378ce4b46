"""Screen-space projection and tile-parallel alpha compositing.

The pipeline per frame: condition every primitive on the query, project the
surviving 3D splats through the pinhole model with a first-order Jacobian,
bin them into tiles by the conservative bounding box of their footprint,
then composite each tile front to back.  Tiles own disjoint pixel ranges
and are reduced in a fixed order, so output is bit-identical for any
thread count.

``reference_render`` is the independent per-pixel evaluation (no tiles, no
early-out) that the test suite holds the tiled path against.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._tiles import tile_forward
from .camera import Camera
from .config import DEFAULT_SETTINGS, RenderSettings
from .scene import Scene
from .slicing import ConditionedSplat, Query, SliceCache, slice_scene


class CompositeOrderError(ValueError):
    """Composite input was not sorted front-to-back."""


@dataclass
class Splat2D:
    """A projected splat: everything one pixel needs."""

    mean2: np.ndarray
    cov2: np.ndarray
    depth: float
    beta_x: float
    gated_opacity: float
    color: np.ndarray
    prim_id: int = 0


@dataclass
class ProjectionCache:
    """Batched projection of one sliced scene."""

    t_cam: np.ndarray    # (n, 3) camera-space means
    depth: np.ndarray    # (n,)
    mean2: np.ndarray    # (n, 2)
    vmat: np.ndarray     # (n, 2, 3) jacobian @ rotation
    cov2_eigval: np.ndarray
    cov2_eigvec: np.ndarray
    floored: np.ndarray  # (n,) screen floor engaged
    cov2: np.ndarray     # (n, 2, 2)
    p2: np.ndarray       # (n, 2, 2) inverse of cov2
    radii: np.ndarray    # (n, 2) axis-aligned half extents of the footprint
    visible: np.ndarray  # (n,) survived near-plane + margin culling


@dataclass
class FrameCache:
    """Forward state kept for the hand-written backward pass."""

    scene: Scene
    camera: Camera
    query: Query
    settings: RenderSettings
    slices: SliceCache
    proj: ProjectionCache
    order: np.ndarray        # visible primitive ids, front to back
    tiles: list              # (y0, y1, x0, x1, ordered ids) per tile
    image: np.ndarray
    alpha_sum: np.ndarray    # (H, W) accumulated alpha
    t_stop: np.ndarray       # (H, W) transmittance left for the background
    alpha_clamped: np.ndarray  # (n,) alpha hit the clamp somewhere
    processed_pixels: int    # total splat-pixel pairs composited (early-out state)

    def trace_signature(self) -> tuple:
        """Discrete branch state; a change between perturbed evaluations
        flags the parameter as sitting on a clamp/cull/sort boundary."""
        return (
            self.proj.visible.tobytes(),
            self.slices.floored.tobytes(),
            self.proj.floored.tobytes(),
            (self.slices.s_tanh > 0.0).tobytes(),
            self.alpha_clamped.tobytes(),
            self.order.tobytes(),
            self.processed_pixels,
        )


def project_scene(slices: SliceCache, cam: Camera,
                  settings: RenderSettings = DEFAULT_SETTINGS) -> ProjectionCache:
    """Project every sliced splat; cull behind the near plane or off screen."""
    n = slices.mean3.shape[0]
    r = cam.rotation
    t_cam = slices.mean3 @ r.T + cam.translation
    depth = t_cam[:, 2]
    in_front = depth > settings.near_plane
    z = np.where(in_front, depth, 1.0)
    x, y = t_cam[:, 0], t_cam[:, 1]
    mean2 = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / z ** 2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / z ** 2
    vmat = jac @ r
    raw = vmat @ slices.cov3 @ np.swapaxes(vmat, -1, -2)
    raw = 0.5 * (raw + np.swapaxes(raw, -1, -2))
    eigval, eigvec = np.linalg.eigh(raw)
    floored = eigval[:, 0] < settings.screen_cov_floor
    if floored.any():
        clamped = np.maximum(eigval, settings.screen_cov_floor)
        cov2 = np.where(floored[:, None, None],
                        np.einsum("nij,nj,nkj->nik", eigvec, clamped, eigvec), raw)
    else:
        cov2 = raw
    p2 = _inv2x2(cov2)
    radii = np.sqrt(settings.tau_sq * np.stack([cov2[:, 0, 0], cov2[:, 1, 1]], axis=1))

    lo = mean2 - radii
    hi = mean2 + radii
    m = settings.cull_margin
    on_screen = ((hi[:, 0] >= -m) & (lo[:, 0] <= cam.width + m)
                 & (hi[:, 1] >= -m) & (lo[:, 1] <= cam.height + m))
    visible = in_front & on_screen & slices.valid
    return ProjectionCache(t_cam=t_cam, depth=depth, mean2=mean2, vmat=vmat,
                           cov2_eigval=eigval, cov2_eigvec=eigvec, floored=floored,
                           cov2=cov2, p2=p2, radii=radii, visible=visible)


def project(splat: ConditionedSplat, cam: Camera,
            settings: RenderSettings = DEFAULT_SETTINGS, prim_id: int = 0):
    """Project one conditioned splat.  Returns ``None`` when culled."""
    scene_like = slice_from_splat(splat)
    proj = project_scene(scene_like, cam, settings)
    if not proj.visible[0]:
        return None
    return Splat2D(mean2=proj.mean2[0], cov2=proj.cov2[0], depth=float(proj.depth[0]),
                   beta_x=splat.beta_x, gated_opacity=splat.gated_opacity,
                   color=np.asarray(splat.color, dtype=np.float64), prim_id=prim_id)


def slice_from_splat(splat: ConditionedSplat) -> SliceCache:
    """Wrap a single conditioned splat in the batched container."""
    z0 = np.zeros((1, 0))
    return SliceCache(valid=np.ones(1, bool), mean3=np.asarray(splat.mean3, dtype=np.float64)[None],
                      cov3=np.asarray(splat.cov3, dtype=np.float64)[None],
                      beta_x=np.array([splat.beta_x]), gated_opacity=np.array([splat.gated_opacity]),
                      color=np.asarray(splat.color, dtype=np.float64)[None],
                      opacity=np.array([splat.gated_opacity]), gate=np.ones(1),
                      beta_q=z0, delta=z0, m_inv=np.zeros((1, 0, 0)), u=z0, v=z0,
                      sigma_xq=np.zeros((1, 3, 0)), d_raw=z0, s_tanh=z0, d_gate=z0,
                      cov3_eigval=np.zeros((1, 3)), cov3_eigvec=np.tile(np.eye(3), (1, 1, 1)),
                      floor_eps=np.zeros(1), floored=np.zeros(1, bool),
                      l_x=np.tile(np.eye(3), (1, 1, 1)), rotation=np.tile(np.eye(3), (1, 1, 1)),
                      s_x=np.ones((1, 3)), s_q=np.zeros((1, 0)))


def kernel2d(pixel, splat: Splat2D, settings: RenderSettings = DEFAULT_SETTINGS) -> float:
    """Footprint value at a pixel: ``(1 - m / tau^2) ** beta_x`` inside support."""
    delta = np.asarray(pixel, dtype=np.float64) - splat.mean2
    m = float(delta @ np.linalg.inv(splat.cov2) @ delta)
    if m >= settings.tau_sq:
        return 0.0
    return float(np.exp(splat.beta_x * np.log1p(-m / settings.tau_sq)))


def composite(splats, pixels, background, settings: RenderSettings = DEFAULT_SETTINGS,
              debug: bool = __debug__) -> np.ndarray:
    """Front-to-back compositing of sorted splats at arbitrary pixel positions.

    ``pixels`` is (2,) or (p, 2); returns matching (3,) or (p, 3).  In debug
    mode an input not sorted by (depth, prim_id) raises CompositeOrderError.
    """
    splats = list(splats)
    if debug:
        keys = [(s.depth, s.prim_id) for s in splats]
        if keys != sorted(keys):
            raise CompositeOrderError("splats must be sorted front-to-back")
    pix = np.asarray(pixels, dtype=np.float64)
    single = pix.ndim == 1
    pix = pix.reshape(-1, 2)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    if not splats:
        out = np.tile(bg, (pix.shape[0], 1))
        return out[0] if single else out
    mean2 = np.stack([s.mean2 for s in splats])
    p2 = np.stack([np.linalg.inv(s.cov2) for s in splats])
    og = np.array([s.gated_opacity for s in splats])
    bx = np.array([s.beta_x for s in splats])
    colors = np.stack([np.asarray(s.color, dtype=np.float64) for s in splats])
    alpha = _alphas(pix, mean2, p2, og, bx, settings)[3]
    out, _, t_stop, _ = _composite_alphas(alpha, colors, bg, settings.transmittance_min)
    return out[0] if single else out


def _alphas(pix, mean2, p2, og, bx, settings):
    """Per splat x pixel: footprint distance, kernel value, raw and clamped alpha."""
    delta = pix[None, :, :] - mean2[:, None, :]
    m = (delta[..., 0] ** 2 * p2[:, None, 0, 0]
         + 2.0 * delta[..., 0] * delta[..., 1] * p2[:, None, 0, 1]
         + delta[..., 1] ** 2 * p2[:, None, 1, 1])
    inside = m < settings.tau_sq
    xs = np.where(inside, m / settings.tau_sq, 0.0)
    kval = np.where(inside, np.exp(bx[:, None] * np.log1p(-xs)), 0.0)
    alpha_raw = og[:, None] * kval
    alpha = np.minimum(alpha_raw, settings.alpha_clamp)
    return delta, m, kval, alpha, alpha_raw


def _composite_alphas(alpha, colors, bg, t_min):
    """Front-to-back blend given per-splat-per-pixel alphas (k, p).

    Returns (rgb (p, 3), weights (k, p), t_stop (p,), processed mask (k, p)).
    A pixel stops taking contributions once its transmittance falls below
    ``t_min``; the telescoping sum keeps alpha_sum + t_stop = 1 exactly.
    """
    k, p = alpha.shape
    t_after = np.cumprod(1.0 - alpha, axis=0)
    t_before = np.vstack([np.ones((1, p)), t_after[:-1]])
    if t_min > 0.0:
        processed = t_before >= t_min
        weights = alpha * t_before * processed
        any_stop = ~processed[-1]
        first_stop = np.argmax(~processed, axis=0)
        t_stop = np.where(any_stop, t_before[first_stop, np.arange(p)], t_after[-1])
    else:
        processed = np.ones_like(alpha, dtype=bool)
        weights = alpha * t_before
        t_stop = t_after[-1]
    rgb = weights.T @ colors + t_stop[:, None] * bg
    return rgb, weights, t_stop, processed


def _pixel_grid(y0, y1, x0, x1):
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)


def _pixel_xy(y0, y1, x0, x1):
    """Pixel-center coordinates of a tile as two flat contiguous arrays."""
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return np.ascontiguousarray(xs.ravel() + 0.5), np.ascontiguousarray(ys.ravel() + 0.5)


def build_tiles(proj: ProjectionCache, order: np.ndarray, cam: Camera,
                settings: RenderSettings) -> list:
    """Assign depth-ordered splats to the tiles their bounding boxes touch."""
    ts = settings.tile_size
    lo = proj.mean2[order] - proj.radii[order]
    hi = proj.mean2[order] + proj.radii[order]
    tiles = []
    for ty in range(math.ceil(cam.height / ts)):
        y0, y1 = ty * ts, min((ty + 1) * ts, cam.height)
        row_mask = (hi[:, 1] >= y0) & (lo[:, 1] <= y1)
        for tx in range(math.ceil(cam.width / ts)):
            x0, x1 = tx * ts, min((tx + 1) * ts, cam.width)
            mask = row_mask & (hi[:, 0] >= x0) & (lo[:, 0] <= x1)
            tiles.append((y0, y1, x0, x1, order[mask]))
    return tiles


def render_with_cache(scene: Scene, cam: Camera, query: Query,
                      settings: RenderSettings = DEFAULT_SETTINGS) -> FrameCache:
    """Full forward pass returning the image plus per-frame state."""
    slices = slice_scene(scene, query, settings)
    proj = project_scene(slices, cam, settings)
    ids = np.nonzero(proj.visible)[0]
    order = ids[np.lexsort((ids, proj.depth[ids]))]
    tiles = build_tiles(proj, order, cam, settings)

    image = np.empty((cam.height, cam.width, 3))
    alpha_sum = np.empty((cam.height, cam.width))
    t_stop_img = np.empty((cam.height, cam.width))
    clamped = np.zeros(scene.n_primitives, dtype=bool)
    bg = scene.background

    def run_tile(tile):
        y0, y1, x0, x1, idx = tile
        p = (y1 - y0) * (x1 - x0)
        if idx.size == 0:
            return (np.tile(bg, (p, 1)), np.zeros(p), np.ones(p),
                    np.zeros(0, dtype=bool), 0)
        px, py = _pixel_xy(y0, y1, x0, x1)
        rgb = np.empty((p, 3))
        asum = np.empty(p)
        t_stop = np.empty(p)
        hit_clamp = np.zeros(idx.size, dtype=bool)
        visits = tile_forward(px, py, proj.mean2[idx], proj.p2[idx],
                              slices.gated_opacity[idx], slices.beta_x[idx],
                              scene.color[idx], bg, settings.tau_sq,
                              settings.alpha_clamp, settings.transmittance_min,
                              rgb, asum, t_stop, hit_clamp)
        return rgb, asum, t_stop, hit_clamp, int(visits)

    results = _map_tiles(run_tile, tiles, settings.threads)
    processed_total = 0
    for (y0, y1, x0, x1, idx), (rgb, asum, t_stop, hit_clamp, nproc) in zip(tiles, results):
        shape = (y1 - y0, x1 - x0)
        image[y0:y1, x0:x1] = rgb.reshape(shape + (3,))
        alpha_sum[y0:y1, x0:x1] = asum.reshape(shape)
        t_stop_img[y0:y1, x0:x1] = t_stop.reshape(shape)
        if idx.size:
            clamped[idx] |= hit_clamp
        processed_total += nproc

    return FrameCache(scene=scene, camera=cam, query=query, settings=settings,
                      slices=slices, proj=proj, order=order, tiles=tiles, image=image,
                      alpha_sum=alpha_sum, t_stop=t_stop_img, alpha_clamped=clamped,
                      processed_pixels=processed_total)


def render(scene: Scene, cam: Camera, query: Query,
           settings: RenderSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Render to an (H, W, 3) float image in [0, 1]-ish range (not clipped)."""
    return render_with_cache(scene, cam, query, settings).image


def reference_render(scene: Scene, cam: Camera, query: Query,
                     settings: RenderSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Per-pixel evaluation of the compositing sum over all visible splats.

    No tiling and no transmittance early-out; one explicit Python loop over
    splats in depth order.  Kept as the oracle the tiled renderer is tested
    against.
    """
    slices = slice_scene(scene, query, settings)
    proj = project_scene(slices, cam, settings)
    ids = np.nonzero(proj.visible)[0]
    order = ids[np.lexsort((ids, proj.depth[ids]))]
    pix = _pixel_grid(0, cam.height, 0, cam.width)
    out = np.zeros((pix.shape[0], 3))
    transmittance = np.ones(pix.shape[0])
    for i in order:
        delta = pix - proj.mean2[i]
        p2 = proj.p2[i]
        m = (delta[:, 0] ** 2 * p2[0, 0] + 2.0 * delta[:, 0] * delta[:, 1] * p2[0, 1]
             + delta[:, 1] ** 2 * p2[1, 1])
        inside = m < settings.tau_sq
        kval = np.where(inside, np.exp(slices.beta_x[i] * np.log1p(
            -np.where(inside, m, 0.0) / settings.tau_sq)), 0.0)
        alpha = np.minimum(slices.gated_opacity[i] * kval, settings.alpha_clamp)
        out += (transmittance * alpha)[:, None] * scene.color[i]
        transmittance = transmittance * (1.0 - alpha)
    out += transmittance[:, None] * scene.background
    return out.reshape(cam.height, cam.width, 3)


DECOMPOSITION_CHANNELS = ("b_x", "b_d", "b_t", "opacity")


def render_decomposition(scene: Scene, cam: Camera, query: Query, channel: str,
                         settings: RenderSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Heatmap of a per-primitive scalar using the render's own weights.

    Compositing weights are identical to ``render``; the composited quantity
    is the chosen scalar mapped through a fixed diverging colormap and the
    result is renormalized per pixel by the accumulated alpha.
    """
    values = _channel_values(scene, channel)
    cmap_colors = _diverging_colormap(values)
    cache = render_with_cache(scene, cam, query, settings)
    out = np.empty_like(cache.image)
    bg = scene.background
    proj, slices = cache.proj, cache.slices

    zero_bg = np.zeros(3)

    def run_tile(tile):
        y0, y1, x0, x1, idx = tile
        p = (y1 - y0) * (x1 - x0)
        if idx.size == 0:
            return np.tile(bg, (p, 1))
        px, py = _pixel_xy(y0, y1, x0, x1)
        num = np.empty((p, 3))
        den = np.empty(p)
        t_stop = np.empty(p)
        hit = np.zeros(idx.size, dtype=bool)
        tile_forward(px, py, proj.mean2[idx], proj.p2[idx],
                     slices.gated_opacity[idx], slices.beta_x[idx],
                     cmap_colors[idx], zero_bg, settings.tau_sq,
                     settings.alpha_clamp, settings.transmittance_min,
                     num, den, t_stop, hit)
        return np.where(den[:, None] > 0.0, num / np.maximum(den, 1e-300)[:, None], bg)

    results = _map_tiles(run_tile, cache.tiles, settings.threads)
    for (y0, y1, x0, x1, _), rgb in zip(cache.tiles, results):
        out[y0:y1, x0:x1] = rgb.reshape(y1 - y0, x1 - x0, 3)
    return out


def _channel_values(scene: Scene, channel: str) -> np.ndarray:
    c = scene.n_query_dims
    if channel == "b_x":
        return (scene.b_x + 5.0) / 10.0
    if channel == "opacity":
        return scene.opacity
    if channel == "b_d":
        if c < 3:
            raise ValueError("b_d channel needs direction dimensions (6D or 7D scene)")
        return (scene.b_q[:, c - 3:].mean(axis=1) + 5.0) / 10.0
    if channel == "b_t":
        if scene.n_dims != 7:
            raise ValueError("b_t channel is only available for 7D scenes")
        return (scene.b_q[:, 0] + 5.0) / 10.0
    raise ValueError(f"unknown channel {channel!r}; expected one of {DECOMPOSITION_CHANNELS}")


def _diverging_colormap(t: np.ndarray) -> np.ndarray:
    """Blue -> white -> red over t in [0, 1]."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    lo = np.array([0.15, 0.25, 0.85])
    mid = np.array([0.95, 0.95, 0.95])
    hi = np.array([0.85, 0.20, 0.15])
    u = np.clip(t * 2.0, 0.0, 1.0)[:, None]
    v = np.clip(t * 2.0 - 1.0, 0.0, 1.0)[:, None]
    return np.where(t[:, None] < 0.5, lo + u * (mid - lo), mid + v * (hi - mid))


def _map_tiles(fn, tiles, threads: int):
    if threads == 0:
        import os
        threads = os.cpu_count() or 1
    if threads == 1 or len(tiles) <= 1:
        return [fn(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tiles))


def _inv2x2(mats: np.ndarray) -> np.ndarray:
    a = mats[:, 0, 0]
    b = mats[:, 0, 1]
    d = mats[:, 1, 1]
    det = a * d - b * b
    out = np.empty_like(mats)
    out[:, 0, 0] = d / det
    out[:, 1, 1] = a / det
    out[:, 0, 1] = -b / det
    out[:, 1, 0] = -b / det
    return out
