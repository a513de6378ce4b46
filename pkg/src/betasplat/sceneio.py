"""Scene files, camera manifests, and image IO.

Scene file (little-endian):
    bytes 0-3   magic ``UBS1``
    uint32      n_dims (3, 6, or 7)
    uint32      primitive count
    3 x f32     background RGB
    per primitive, f32 each, in this order:
        mu_x[3], mu_q[C], rot[3], s_x_raw[3], l_qx[C*3 row-major],
        s_q_raw[C], b_x, b_q[C], opacity_raw, color[3]
    (C = n_dims - 3; 14 + 6C floats per primitive)

Float image file (``.f32``): magic ``UBF1``, uint32 height, width,
channels, then one row-major f32 plane per channel (R, G, B).

Camera manifest: JSON with global ``width``, ``height``,
``camera_angle_x`` (radians), optional ``background`` / ``bounds``, and a
``frames`` list of ``{file_path, transform_matrix, split, time?}`` where
``transform_matrix`` is the 4x4 camera-to-world transform (camera looks
down +z, x right, y down).  ``time`` must be present on every frame or on
none; times are normalized to [0, 1] by min-max within each split.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera, focal_from_fov
from .scene import PARAM_FIELDS, Scene

SCENE_MAGIC = b"UBS1"
IMAGE_MAGIC = b"UBF1"


class SceneFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def save_scene(scene: Scene, path) -> None:
    c = scene.n_query_dims
    n = scene.n_primitives
    parts = [getattr(scene, name).reshape(n, -1) for name, _ in PARAM_FIELDS]
    record = np.concatenate(parts, axis=1).astype("<f4") if n else np.zeros((0, 14 + 6 * c), "<f4")
    with open(path, "wb") as fh:
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<II", scene.n_dims, n))
        fh.write(np.asarray(scene.background, dtype="<f4").tobytes())
        fh.write(record.tobytes())


def load_scene(path) -> Scene:
    blob = Path(path).read_bytes()
    if blob[:4] != SCENE_MAGIC:
        raise SceneFormatError("bad magic")
    if len(blob) < 24:
        raise SceneFormatError("truncated header")
    n_dims, count = struct.unpack("<II", blob[4:12])
    if n_dims not in (3, 6, 7):
        raise SceneFormatError(f"unsupported n_dims {n_dims}")
    c = n_dims - 3
    background = np.frombuffer(blob[12:24], dtype="<f4").astype(np.float64)
    width = 14 + 6 * c
    body = blob[24:]
    expected = count * width * 4
    if len(body) != expected:
        raise SceneFormatError(f"expected {expected} payload bytes, found {len(body)}")
    record = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(count, width)
    kw = {}
    offset = 0
    for name, shape_fn in PARAM_FIELDS:
        shape = shape_fn(c)
        size = int(np.prod(shape)) if shape else 1
        kw[name] = record[:, offset:offset + size].reshape((count,) + shape)
        offset += size
    return Scene(n_dims=n_dims, background=background, **kw)


def scene_to_json(scene: Scene) -> dict:
    """Inspection-friendly export (lossless float64 via repr lists)."""
    out = {"n_dims": scene.n_dims, "background": scene.background.tolist(),
           "primitives": []}
    for i in range(scene.n_primitives):
        out["primitives"].append(
            {name: getattr(scene, name)[i].tolist() for name, _ in PARAM_FIELDS})
    return out


def save_png(img: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_f32(img: np.ndarray, path) -> None:
    arr = np.asarray(img, dtype="<f4")
    h, w, ch = arr.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<III", h, w, ch))
        fh.write(np.ascontiguousarray(arr.transpose(2, 0, 1)).tobytes())


def load_f32(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != IMAGE_MAGIC:
        raise SceneFormatError("bad magic")
    h, w, ch = struct.unpack("<III", blob[4:16])
    data = np.frombuffer(blob[16:], dtype="<f4")
    if data.size != h * w * ch:
        raise SceneFormatError("truncated image payload")
    return data.reshape(ch, h, w).transpose(1, 2, 0).astype(np.float64)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".f32":
        return load_f32(path)
    return load_png(path)


@dataclass
class DatasetEntry:
    camera: Camera
    image_path: str
    time: float | None
    split: str


@dataclass
class Manifest:
    width: int
    height: int
    camera_angle_x: float
    background: np.ndarray
    bounds: tuple | None
    entries: list

    @property
    def dynamic(self) -> bool:
        return any(e.time is not None for e in self.entries)


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed manifest JSON: {exc}") from exc
    for key in ("width", "height", "camera_angle_x", "frames"):
        if key not in raw:
            raise ManifestError(f"manifest missing required key {key!r}")
    width = int(raw["width"])
    height = int(raw["height"])
    fov = float(raw["camera_angle_x"])
    background = np.asarray(raw.get("background", [0.0, 0.0, 0.0]), dtype=np.float64)
    bounds = None
    if "bounds" in raw:
        bounds = (tuple(raw["bounds"][0]), tuple(raw["bounds"][1]))
    fx = focal_from_fov(fov, width)

    entries = []
    times = []
    for i, frame in enumerate(raw["frames"]):
        try:
            c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        except KeyError:
            raise ManifestError(f"frame {i}: missing transform_matrix")
        if c2w.shape != (4, 4):
            raise ManifestError(f"frame {i}: transform_matrix must be 4x4")
        r = c2w[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ManifestError(f"frame {i}: transform is not a rigid rotation")
        w2c = np.eye(4)
        w2c[:3, :3] = r.T
        w2c[:3, 3] = -r.T @ c2w[:3, 3]
        cam = Camera(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                     width=width, height=height, world_to_cam=w2c)
        if "file_path" not in frame:
            raise ManifestError(f"frame {i}: missing file_path")
        split = frame.get("split", "train")
        if split not in ("train", "test"):
            raise ManifestError(f"frame {i}: split must be 'train' or 'test'")
        t = frame.get("time")
        entries.append(DatasetEntry(camera=cam,
                                    image_path=str((path.parent / frame["file_path"]).resolve()),
                                    time=None if t is None else float(t), split=split))
        times.append(t)

    has_time = [t is not None for t in times]
    if any(has_time) and not all(has_time):
        bad = has_time.index(False)
        raise ManifestError(f"frame {bad}: missing time on a dynamic dataset")
    if all(has_time) and entries:
        for split in ("train", "test"):
            sel = [e for e in entries if e.split == split]
            if not sel:
                continue
            ts = np.array([e.time for e in sel])
            span = ts.max() - ts.min()
            for e in sel:
                e.time = float((e.time - ts.min()) / span) if span > 0 else 0.0
    return Manifest(width=width, height=height, camera_angle_x=fov,
                    background=background, bounds=bounds, entries=entries)


def load_dataset(manifest_path) -> list:
    """Parse a manifest into dataset entries (cameras, image paths, times)."""
    return load_manifest(manifest_path).entries
