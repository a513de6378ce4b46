"""Randomized scenes and frames for gradient checks and stress tests."""

from __future__ import annotations

import numpy as np

from .camera import Camera
from .scene import Scene, logit
from .slicing import Query


def random_scene(n_dims: int, count: int, seed: int, cross_scale: float = 0.3) -> Scene:
    """A well-conditioned random scene near the camera orbit used below.

    Shape parameters stay within [-1, 1] so the 2D footprint keeps a
    continuous first derivative at its support edge, and scales are kept
    moderate so query blocks stay comfortably positive definite.
    """
    rng = np.random.default_rng(seed)
    c = n_dims - 3
    return Scene(
        n_dims=n_dims,
        mu_x=rng.uniform(-0.8, 0.8, (count, 3)),
        mu_q=rng.uniform(0.0, 1.0, (count, c)),
        rot=rng.uniform(-0.3, 0.3, (count, 3)),
        s_x_raw=rng.uniform(np.log(0.15), np.log(0.45), (count, 3)),
        l_qx=rng.uniform(-cross_scale, cross_scale, (count, c, 3)),
        s_q_raw=rng.uniform(np.log(0.7), np.log(1.5), (count, c)),
        b_x=rng.uniform(-1.0, 1.0, count),
        b_q=rng.uniform(-1.0, 1.0, (count, c)),
        opacity_raw=logit(rng.uniform(0.2, 0.9, count)),
        color=rng.uniform(0.05, 0.95, (count, 3)),
        background=rng.uniform(0.0, 0.3, 3),
    )


def random_camera(size: int, seed: int, radius: float = 3.0) -> Camera:
    rng = np.random.default_rng(seed)
    az = rng.uniform(0.0, 2.0 * np.pi)
    el = rng.uniform(-0.5, 0.7)
    eye = radius * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
    return Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 0.9, size, size)


def random_query(n_dims: int, seed: int) -> Query:
    rng = np.random.default_rng(seed)
    if n_dims == 3:
        return Query.static()
    direction = rng.standard_normal(3)
    if n_dims == 6:
        return Query.view(direction)
    return Query.view_time(rng.uniform(0.0, 1.0), direction)


def random_frames(scene: Scene, size: int, seed: int, count: int = 1,
                  target_seed_offset: int = 977) -> list:
    """(camera, query, target) triples; targets are renders of a second
    random scene so image residuals are generic and rarely cross zero."""
    from .raster import render

    frames = []
    for k in range(count):
        cam = random_camera(size, seed + 11 * k)
        query = random_query(scene.n_dims, seed + 13 * k)
        other = random_scene(scene.n_dims, max(2, scene.n_primitives // 2),
                             seed + target_seed_offset + k)
        target = np.clip(render(other, cam, query), 0.0, 1.0)
        frames.append((cam, query, target))
    return frames
