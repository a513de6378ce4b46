"""Pinhole camera: intrinsics plus a rigid world-to-camera transform.

Convention: camera looks down +z, x right, y down; a world point maps to
camera space as ``R @ p + t`` and to the image plane as
``(fx * x / z + cx, fy * y / z + cy)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray  # (4, 4) rigid

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        r = self.world_to_cam[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("world_to_cam rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """Unit viewing direction (+z axis) in world coordinates."""
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])

    @classmethod
    def look_at(cls, eye, target, up, fov_x: float, width: int, height: int) -> "Camera":
        """Camera at ``eye`` looking toward ``target``; ``fov_x`` in radians."""
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        z = target - eye
        zn = np.linalg.norm(z)
        if zn == 0.0:
            raise ValueError("eye and target coincide")
        z = z / zn
        x = np.cross(z, up) if abs(np.dot(z, up / np.linalg.norm(up))) < 0.999 \
            else np.cross(z, np.array([1.0, 0.0, 0.0]))
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        r = np.stack([x, y, z])  # rows: camera axes in world coords
        w2c = np.eye(4)
        w2c[:3, :3] = r
        w2c[:3, 3] = -r @ eye
        fx = focal_from_fov(fov_x, width)
        return cls(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height, world_to_cam=w2c)


def focal_from_fov(fov: float, pixels: int) -> float:
    """Focal length in pixels from a full field-of-view angle in radians."""
    return pixels / (2.0 * np.tan(fov / 2.0))
