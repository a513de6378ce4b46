"""Training loop: Adam over grouped learning rates, opacity-preserving
relocation of dead primitives, and covariance-shaped exploration noise.

Relocation teleports primitives whose opacity fell below a threshold onto
donors sampled proportionally to opacity; the donor and its recipients all
take the split opacity ``1 - (1 - o)^(1/n)`` so the composited density is
unchanged.  Exploration noise perturbs only spatial means, shaped by each
primitive's spatial factor and gated almost entirely off except near-dead
primitives.
"""

from __future__ import annotations

import json
import logging
import time as _time
from dataclasses import dataclass, field, asdict

import numpy as np

from .config import DEFAULT_SETTINGS, RenderSettings
from .covariance import rotation_first_order
from .gradients import GradientError, LossConfig, SceneGrads, backward
from .kernels import clamp_shapes
from .metrics import psnr
from .raster import render
from .scene import PARAM_FIELDS, Scene, logit, sigmoid

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

DEAD_OPACITY = 0.005
NOISE_GATE_SHARPNESS = 2000.0
GROWTH_FRACTION = 0.05


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr_position: float = 1.6e-4
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_other: float = 1e-3
    lambda_ssim: float = 0.2
    lambda_o: float = 0.01
    lambda_sigma: float = 0.01
    lambda_eps: float = 1.0
    batch_size: int = 1
    target_primitive_count: int = 256
    relocation_period: int = 100
    seed: int = 0
    freeze_shapes: bool = False
    checkpoint_every: int = 500
    log_every: int = 100

    def __post_init__(self):
        if min(self.lambda_o, self.lambda_sigma, self.lambda_eps) < 0:
            raise ValueError("regularizer weights must be non-negative")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ValueError("lambda_ssim must lie in [0, 1]")
        if min(self.iterations, self.batch_size, self.relocation_period,
               self.target_primitive_count) < 0:
            raise ValueError("counts must be non-negative")

    def loss_config(self) -> LossConfig:
        return LossConfig(lambda_ssim=self.lambda_ssim, lambda_o=self.lambda_o,
                          lambda_sigma=self.lambda_sigma)

    def to_dict(self) -> dict:
        return asdict(self)


# learning-rate group per parameter field
_LR_GROUP = {
    "mu_x": "lr_position",
    "s_x_raw": "lr_scale",
    "s_q_raw": "lr_scale",
    "opacity_raw": "lr_opacity",
    "mu_q": "lr_other",
    "rot": "lr_other",
    "l_qx": "lr_other",
    "b_x": "lr_other",
    "b_q": "lr_other",
    "color": "lr_other",
}
_SHAPE_FIELDS = ("b_x", "b_q")


class AdamState:
    """First/second moment buffers per parameter field plus the step count."""

    def __init__(self, scene: Scene):
        self.step = 0
        self.m = {name: np.zeros_like(getattr(scene, name)) for name, _ in PARAM_FIELDS}
        self.v = {name: np.zeros_like(getattr(scene, name)) for name, _ in PARAM_FIELDS}

    def reset_rows(self, idx) -> None:
        for name in self.m:
            self.m[name][idx] = 0.0
            self.v[name][idx] = 0.0

    def grow(self, scene: Scene) -> None:
        for name in self.m:
            target = getattr(scene, name)
            extra = target.shape[0] - self.m[name].shape[0]
            if extra > 0:
                pad = np.zeros((extra,) + target.shape[1:])
                self.m[name] = np.concatenate([self.m[name], pad])
                self.v[name] = np.concatenate([self.v[name], pad])


def adam_step(scene: Scene, grads: SceneGrads, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update in place; shapes re-clamped after."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, _ in PARAM_FIELDS:
        if cfg.freeze_shapes and name in _SHAPE_FIELDS:
            continue
        g = getattr(grads, name)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        lr = getattr(cfg, _LR_GROUP[name])
        param = getattr(scene, name)
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    scene.b_x = clamp_shapes(scene.b_x)
    scene.b_q = clamp_shapes(scene.b_q)


def clone_opacity(o, n_clones: int):
    """Opacity for each of ``n_clones`` coincident copies so that the
    composited result of the copies equals the original: 1 - (1-o)^(1/n)."""
    if n_clones < 1:
        raise ValueError("n_clones must be >= 1")
    return -np.expm1(np.log1p(-np.asarray(o, dtype=np.float64)) / n_clones)


def mcmc_relocate(scene: Scene, rng, cfg: TrainConfig):
    """Teleport dead primitives onto opacity-sampled donors; grow toward budget.

    Returns (scene, touched_indices).  The scene is mutated in place except
    for growth, which extends the arrays.  ``touched_indices`` lists every
    row whose parameters were rewritten (donors, recipients, new rows) so
    the caller can reset optimizer state.
    """
    opacity = scene.opacity
    dead = np.nonzero(opacity < DEAD_OPACITY)[0]
    alive = np.nonzero(opacity >= DEAD_OPACITY)[0]
    if alive.size == 0:
        log.warning("relocation skipped: no donor primitive with opacity >= %g", DEAD_OPACITY)
        return scene, np.zeros(0, dtype=int)

    n = scene.n_primitives
    grow = 0
    if n < cfg.target_primitive_count:
        grow = min(cfg.target_primitive_count - n, max(1, int(GROWTH_FRACTION * n)))
    total_recipients = dead.size + grow
    if total_recipients == 0:
        return scene, np.zeros(0, dtype=int)

    probs = opacity[alive] / opacity[alive].sum()
    donors = rng.choice(alive, size=total_recipients, replace=True, p=probs)
    if grow:
        for name, _ in PARAM_FIELDS:
            arr = getattr(scene, name)
            setattr(scene, name, np.concatenate([arr, np.zeros((grow,) + arr.shape[1:])]))
        recipients = np.concatenate([dead, np.arange(n, n + grow)])
    else:
        recipients = dead

    by_donor: dict = {}
    for donor, recipient in zip(donors, recipients):
        by_donor.setdefault(int(donor), []).append(int(recipient))
    touched = []
    for donor, recs in by_donor.items():
        new_o = float(clone_opacity(opacity[donor], len(recs) + 1))
        rows = [donor] + recs
        for name, _ in PARAM_FIELDS:
            arr = getattr(scene, name)
            arr[recs] = arr[donor]
        scene.opacity_raw[rows] = logit(new_o)
        touched.extend(rows)
    return scene, np.asarray(sorted(set(touched)), dtype=int)


def noise_inject(scene: Scene, rng, cfg: TrainConfig, lr_position: float) -> Scene:
    """Perturb spatial means with covariance-shaped noise, gated to near-dead
    primitives: mu_x += lambda_eps * lr * g(o) * (L_x xi), xi ~ N(0, I)."""
    if cfg.lambda_eps == 0.0 or scene.n_primitives == 0:
        return scene
    xi = rng.standard_normal((scene.n_primitives, 3))
    gate = sigmoid(-NOISE_GATE_SHARPNESS * (scene.opacity - DEAD_OPACITY))
    l_x = rotation_first_order(scene.rot) * np.exp(scene.s_x_raw)[:, None, :]
    scene.mu_x += cfg.lambda_eps * lr_position * gate[:, None] * np.einsum("nij,nj->ni", l_x, xi)
    return scene


def train(scene: Scene, frames, cfg: TrainConfig,
          settings: RenderSettings = DEFAULT_SETTINGS,
          metrics_path=None, checkpoint_dir=None, relocate: bool = True):
    """Optimize ``scene`` against (camera, query, target) frames.

    Returns (scene, metrics) where metrics is a list of dicts; when
    ``metrics_path`` is given each entry is also appended there as one JSON
    line.  A non-finite gradient aborts with a checkpoint dump.
    """
    if not frames:
        raise ValueError("empty dataset")
    ss = np.random.SeedSequence(cfg.seed)
    rng_batch, rng_reloc, rng_noise = (np.random.default_rng(s) for s in ss.spawn(3))
    state = AdamState(scene)
    loss_cfg = cfg.loss_config()
    metrics = []
    sink = open(metrics_path, "w") if metrics_path else None
    start = _time.perf_counter()
    try:
        for it in range(1, cfg.iterations + 1):
            replace = cfg.batch_size > len(frames)
            idx = rng_batch.choice(len(frames), size=min(cfg.batch_size, len(frames)),
                                   replace=replace)
            batch = [frames[int(i)] for i in idx]
            try:
                loss, grads = backward(scene, batch, loss_cfg, settings)
            except GradientError:
                if checkpoint_dir is not None:
                    from .sceneio import save_scene
                    save_scene(scene, f"{checkpoint_dir}/crash_{it:06d}.ubs")
                raise
            adam_step(scene, grads, state, cfg)

            if relocate and cfg.relocation_period > 0 and it % cfg.relocation_period == 0:
                scene, touched = mcmc_relocate(scene, rng_reloc, cfg)
                state.grow(scene)
                if touched.size:
                    state.reset_rows(touched)
                noise_inject(scene, rng_noise, cfg, cfg.lr_position)

            if it % cfg.log_every == 0 or it == cfg.iterations:
                cam, query, target = batch[0]
                entry = {
                    "iteration": it,
                    "loss": float(loss),
                    "psnr": psnr(np.clip(render(scene, cam, query, settings), 0.0, 1.0),
                                 target),
                    "primitive_count": scene.n_primitives,
                    "wall_ms": (_time.perf_counter() - start) * 1000.0,
                }
                metrics.append(entry)
                if sink:
                    sink.write(json.dumps(entry) + "\n")
                    sink.flush()
            if checkpoint_dir is not None and cfg.checkpoint_every > 0 \
                    and it % cfg.checkpoint_every == 0:
                from .sceneio import save_scene
                save_scene(scene, f"{checkpoint_dir}/checkpoint_{it:06d}.ubs")
    finally:
        if sink:
            sink.close()
    return scene, metrics


def evaluate(scene: Scene, frames, settings: RenderSettings = DEFAULT_SETTINGS):
    """Mean and per-frame PSNR/SSIM of the scene against target frames."""
    from .metrics import ssim
    per_frame = []
    for cam, query, target in frames:
        img = np.clip(render(scene, cam, query, settings), 0.0, 1.0)
        per_frame.append({"psnr": psnr(img, target), "ssim": ssim(img, target)})
    return {
        "mean_psnr": float(np.mean([f["psnr"] for f in per_frame])) if per_frame else 0.0,
        "mean_ssim": float(np.mean([f["ssim"] for f in per_frame])) if per_frame else 0.0,
        "frames": per_frame,
    }
