"""Synthetic ground-truth scenes and rendered target datasets.

Three regimes:

* ``static``   view-independent colored blobs (6D scene whose query dims
               are fully decoupled: zero cross block, huge query scales,
               flat query shapes).
* ``viewdep``  the static backdrop plus bright highlight primitives with
               sharp directional shapes, narrow directional support, and a
               direction-coupled cross block that slides the highlight as
               the viewpoint moves.
* ``dynamic``  a 7D scene: static backdrop plus a bright transient blob
               whose temporal gate switches it off partway through the
               sequence (the gate clamp is one-sided, so support is
               "on until mu_t, then decays").

Cameras orbit the origin; the per-frame query is the camera's forward
axis (plus normalized time for dynamic).  Targets are rendered from the
ground truth, so a perfect fit exists by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera
from .config import DEFAULT_SETTINGS, RenderSettings
from .raster import render
from .scene import Scene, logit
from .sceneio import save_f32, save_png, save_scene
from .slicing import Query

KINDS = ("static", "viewdep", "dynamic")

ORBIT_RADIUS = 3.2
FOV_X = 0.9  # radians
WORLD_BOUNDS = ((-1.4, -1.4, -1.4), (1.4, 1.4, 1.4))
N_TRAIN_VIEWS = 20
N_TEST_VIEWS = 5
N_TIMESTAMPS = 8
TRANSIENT_CENTER = np.array([0.0, 0.0, 0.0])
TRANSIENT_MU_T = 0.3

# query scales large enough that background gates deviate from 1 by < 1e-7
_DECOUPLED_SQ_RAW = float(np.log(1000.0))
_FLAT_B = -5.0


@dataclass
class SynthFrame:
    camera: Camera
    query: Query
    time: float | None
    split: str
    image: np.ndarray


def make_synthetic(kind: str, seed: int, size: int = 64,
                   settings: RenderSettings = DEFAULT_SETTINGS):
    """Build the ground-truth scene and render its target frames."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    rng = np.random.default_rng(seed)
    if kind == "static":
        scene = _background_scene(rng, n_dims=6, count=8)
    elif kind == "viewdep":
        scene = _background_scene(rng, n_dims=6, count=6)
        _add_highlights(scene, rng)
    else:
        scene = _background_scene(rng, n_dims=7, count=6, keep_center_clear=True)
        _add_transient(scene)

    cameras = _orbit_cameras(N_TRAIN_VIEWS + N_TEST_VIEWS, size)
    test_idx = set(range(2, N_TRAIN_VIEWS + N_TEST_VIEWS, 5))
    frames = []
    for i, cam in enumerate(cameras):
        split = "test" if i in test_idx else "train"
        if kind == "dynamic":
            for t in np.linspace(0.0, 1.0, N_TIMESTAMPS):
                query = Query.view_time(float(t), cam.forward)
                frames.append(SynthFrame(cam, query, float(t), split,
                                         render(scene, cam, query, settings)))
        else:
            query = Query.view(cam.forward)
            frames.append(SynthFrame(cam, query, None, split,
                                     render(scene, cam, query, settings)))
    return scene, frames


def write_dataset(out_dir, scene: Scene, frames, size: int) -> Path:
    """Write manifest + f32/png targets + the ground-truth scene file."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    manifest = {
        "width": size,
        "height": size,
        "camera_angle_x": FOV_X,
        "background": scene.background.tolist(),
        "bounds": [list(WORLD_BOUNDS[0]), list(WORLD_BOUNDS[1])],
        "frames": [],
    }
    for i, fr in enumerate(frames):
        name = f"frames/{fr.split}_{i:04d}.f32"
        save_f32(fr.image, out / name)
        save_png(fr.image, out / (name[:-4] + ".png"))
        c2w = np.linalg.inv(fr.camera.world_to_cam)
        entry = {"file_path": name, "transform_matrix": c2w.tolist(), "split": fr.split}
        if fr.time is not None:
            entry["time"] = fr.time
        manifest["frames"].append(entry)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    save_scene(scene, out / "gt_scene.ubs")
    return out / "manifest.json"


def _orbit_cameras(count: int, size: int):
    cams = []
    for k in range(count):
        az = 2.0 * np.pi * k / count
        el = 0.35 + 0.25 * np.sin(3.0 * az)
        eye = ORBIT_RADIUS * np.array([np.cos(az) * np.cos(el),
                                       np.sin(az) * np.cos(el),
                                       np.sin(el)])
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0),
                                   FOV_X, size, size))
    return cams


def _background_scene(rng, n_dims: int, count: int, keep_center_clear: bool = False) -> Scene:
    c = n_dims - 3
    # blobs on a loose ring so they stay visible from the whole orbit
    az = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False) + rng.uniform(0, 0.5)
    radius = rng.uniform(0.75, 1.05, count) if keep_center_clear else rng.uniform(0.3, 1.0, count)
    mu_x = np.stack([radius * np.cos(az), radius * np.sin(az),
                     rng.uniform(-0.6, 0.6, count)], axis=1)
    scales = rng.uniform(0.22, 0.42, count)
    scene = Scene(
        n_dims=n_dims,
        mu_x=mu_x,
        mu_q=rng.uniform(0.0, 1.0, (count, c)),
        rot=rng.uniform(-0.2, 0.2, (count, 3)),
        s_x_raw=np.log(scales)[:, None] + rng.uniform(-0.3, 0.3, (count, 3)),
        l_qx=np.zeros((count, c, 3)),
        s_q_raw=np.full((count, c), _DECOUPLED_SQ_RAW),
        b_x=rng.uniform(-1.0, 1.0, count),
        b_q=np.full((count, c), _FLAT_B),
        opacity_raw=logit(rng.uniform(0.75, 0.92, count)),
        color=rng.uniform(0.15, 0.95, (count, 3)),
        background=np.array([0.02, 0.02, 0.04]),
    )
    return scene


def _add_highlights(scene: Scene, rng) -> None:
    """Two bright splats visible only from a narrow cone of directions."""
    anchors = [_orbit_forward(0.15), _orbit_forward(0.55)]
    for k, mu_d in enumerate(anchors):
        pos = np.array([0.35 - 0.7 * k, 0.25 * k, 0.3 - 0.2 * k])
        l_qx = np.zeros((3, 3))
        l_qx[0, 0] = 0.18   # direction offset slides the highlight in x
        l_qx[1, 1] = -0.12
        _append(scene,
                mu_x=pos, mu_q=mu_d, rot=np.zeros(3),
                s_x_raw=np.log([0.16, 0.16, 0.16]),
                l_qx=l_qx, s_q_raw=np.log([0.8, 0.8, 0.8]),
                b_x=0.5, b_q=np.array([2.0, 2.0, 2.0]),
                opacity_raw=logit(0.95), color=np.array([1.0, 0.97, 0.75]))


def _add_transient(scene: Scene) -> None:
    """Bright blob that is on until TRANSIENT_MU_T and off shortly after."""
    s_q_raw = np.array([np.log(0.35)] + [_DECOUPLED_SQ_RAW] * 3)
    _append(scene,
            mu_x=TRANSIENT_CENTER.copy(),
            mu_q=np.array([TRANSIENT_MU_T, 0.5, 0.5, 0.5]),
            rot=np.zeros(3),
            s_x_raw=np.log([0.3, 0.3, 0.3]),
            l_qx=np.zeros((4, 3)),
            s_q_raw=s_q_raw,
            b_x=0.0, b_q=np.array([2.0, _FLAT_B, _FLAT_B, _FLAT_B]),
            opacity_raw=logit(0.97), color=np.array([1.0, 1.0, 0.9]))


def _orbit_forward(frac: float) -> np.ndarray:
    az = 2.0 * np.pi * frac
    el = 0.35 + 0.25 * np.sin(3.0 * az)
    eye = ORBIT_RADIUS * np.array([np.cos(az) * np.cos(el),
                                   np.sin(az) * np.cos(el),
                                   np.sin(el)])
    f = -eye
    return f / np.linalg.norm(f)


def _append(scene: Scene, **fields) -> None:
    for name, value in fields.items():
        arr = getattr(scene, name)
        setattr(scene, name, np.concatenate([arr, np.asarray(value, dtype=np.float64)[None]]))


def dataset_frames(entries, n_dims: int, image_loader):
    """Turn dataset entries into (camera, query, target) triples.

    The per-frame query is the camera's forward axis in world space, with
    the normalized timestamp prepended for 7D scenes.
    """
    frames = []
    for e in entries:
        if n_dims == 3:
            q = Query.static()
        elif n_dims == 6:
            q = Query.view(e.camera.forward)
        else:
            if e.time is None:
                raise ValueError("7D rendering needs per-frame times in the dataset")
            q = Query.view_time(e.time, e.camera.forward)
        frames.append((e.camera, q, image_loader(e.image_path)))
    return frames
