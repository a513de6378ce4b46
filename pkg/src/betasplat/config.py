"""Engine-wide tunables shared by the slicer, rasterizer, and gradients."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict


@dataclass(frozen=True)
class RenderSettings:
    """Knobs for the forward/backward render pipeline.

    Defaults are the production values; tests override individual fields
    (e.g. ``transmittance_min=0.0`` to disable the early-out when comparing
    against the exact per-pixel reference).
    """

    tile_size: int = 16
    # 2D kernel support: squared Mahalanobis radius where the footprint hits 0.
    # 8.0 makes the b_x = 0 footprint match a unit-variance bell to first order.
    tau_sq: float = 8.0
    alpha_clamp: float = 0.999
    # stop compositing a pixel once transmittance drops below this
    transmittance_min: float = 1e-4
    near_plane: float = 0.01
    cull_margin: float = 3.0
    # screen-space covariance eigenvalue floor, px^2
    screen_cov_floor: float = 1e-6
    # conditioned 3D covariance floor = psd_floor_scale * trace(sigma_x) / 3
    psd_floor_scale: float = 1e-8
    # ablation: use |tanh(d/2)| instead of max(tanh(d/2), 0) in the opacity gate
    gate_symmetric: bool = False
    threads: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_SETTINGS = RenderSettings()
