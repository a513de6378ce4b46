"""Scene container (structure-of-arrays) and per-primitive record types.

Scales and opacity are stored unconstrained: scales as logs (activated with
``exp``), opacity as a logit (activated with the logistic).  Shape
parameters are stored raw and clamped to [-5, 5] by the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .covariance import CovFactors, parameter_count

# (name, per-primitive shape as a function of C)
PARAM_FIELDS = (
    ("mu_x", lambda c: (3,)),
    ("mu_q", lambda c: (c,)),
    ("rot", lambda c: (3,)),
    ("s_x_raw", lambda c: (3,)),
    ("l_qx", lambda c: (c, 3)),
    ("s_q_raw", lambda c: (c,)),
    ("b_x", lambda c: ()),
    ("b_q", lambda c: (c,)),
    ("opacity_raw", lambda c: ()),
    ("color", lambda c: (3,)),
)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class ShapeParams:
    """Raw kernel-shape parameters: one shared spatial, one per extra dim."""

    b_x: float
    b_q: np.ndarray

    def __post_init__(self):
        self.b_x = float(self.b_x)
        self.b_q = np.asarray(self.b_q, dtype=np.float64).reshape(-1)


@dataclass
class Primitive:
    """One splat in AoS form; used by tests, file IO, and the single-slice API."""

    mu_x: np.ndarray
    mu_q: np.ndarray
    rot: np.ndarray
    s_x_raw: np.ndarray
    l_qx: np.ndarray
    s_q_raw: np.ndarray
    b_x: float
    b_q: np.ndarray
    opacity_raw: float
    color: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.mu_q).size
        self.mu_x = np.asarray(self.mu_x, dtype=np.float64).reshape(3)
        self.mu_q = np.asarray(self.mu_q, dtype=np.float64).reshape(c)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(3)
        self.s_x_raw = np.asarray(self.s_x_raw, dtype=np.float64).reshape(3)
        self.l_qx = np.asarray(self.l_qx, dtype=np.float64).reshape(c, 3)
        self.s_q_raw = np.asarray(self.s_q_raw, dtype=np.float64).reshape(c)
        self.b_x = float(self.b_x)
        self.b_q = np.asarray(self.b_q, dtype=np.float64).reshape(c)
        self.opacity_raw = float(self.opacity_raw)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)

    @property
    def n_query_dims(self) -> int:
        return self.mu_q.shape[0]

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_raw))

    def cov_factors(self) -> CovFactors:
        return CovFactors(self.rot, np.exp(self.s_x_raw), self.l_qx, np.exp(self.s_q_raw))

    def shapes(self) -> ShapeParams:
        return ShapeParams(self.b_x, self.b_q)


@dataclass
class Scene:
    """All primitives of one model as flat arrays, plus dimensionality and background."""

    n_dims: int
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
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.n_dims not in (3, 6, 7):
            raise ValueError(f"n_dims must be 3, 6, or 7, got {self.n_dims}")
        c = self.n_query_dims
        n = np.asarray(self.mu_x).reshape(-1, 3).shape[0]
        for name, shape_fn in PARAM_FIELDS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr.reshape((n,) + shape_fn(c)))
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    @property
    def n_query_dims(self) -> int:
        return self.n_dims - 3

    @property
    def n_primitives(self) -> int:
        return self.mu_x.shape[0]

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_raw)

    def primitive(self, i: int) -> Primitive:
        return Primitive(self.mu_x[i], self.mu_q[i], self.rot[i], self.s_x_raw[i],
                         self.l_qx[i], self.s_q_raw[i], self.b_x[i], self.b_q[i],
                         self.opacity_raw[i], self.color[i])

    def copy(self) -> "Scene":
        return Scene(self.n_dims,
                     *(getattr(self, name).copy() for name, _ in PARAM_FIELDS),
                     background=self.background.copy())

    def take(self, idx) -> "Scene":
        """Sub-scene with the given primitive indices (copies)."""
        return Scene(self.n_dims,
                     *(getattr(self, name)[idx].copy() for name, _ in PARAM_FIELDS),
                     background=self.background.copy())

    def param_arrays(self) -> dict:
        return {name: getattr(self, name) for name, _ in PARAM_FIELDS}

    def parameter_count(self) -> dict:
        return parameter_count(self.n_dims)

    @classmethod
    def empty(cls, n_dims: int, background=(0.0, 0.0, 0.0)) -> "Scene":
        c = n_dims - 3
        kw = {name: np.zeros((0,) + shape_fn(c)) for name, shape_fn in PARAM_FIELDS}
        return cls(n_dims=n_dims, background=np.asarray(background, dtype=np.float64), **kw)

    @classmethod
    def from_primitives(cls, n_dims: int, prims, background=(0.0, 0.0, 0.0)) -> "Scene":
        prims = list(prims)
        if not prims:
            return cls.empty(n_dims, background)
        c = n_dims - 3
        if any(p.n_query_dims != c for p in prims):
            raise ValueError("primitive query dimensionality does not match scene n_dims")
        kw = {name: np.stack([np.asarray(getattr(p, name), dtype=np.float64) for p in prims])
              for name, _ in PARAM_FIELDS}
        return cls(n_dims=n_dims, background=np.asarray(background, dtype=np.float64), **kw)


def init_scene(n_dims: int, count: int, seed: int, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
               normalize_dirs: bool = False, background=(0.0, 0.0, 0.0)) -> Scene:
    """Random starting scene at the bell-like operating point.

    Spatial means are uniform in ``bounds``; non-spatial means (time, then
    direction components) are uniform in [0, 1] componentwise.  All shape
    parameters start at exactly 0, rotations at identity, cross
    correlations at 0, opacity at 0.5, spatial scales isotropic at
    extent / count^(1/3).  Draws are quantized to float32 so a fresh scene
    survives the 32-bit scene file bit-exactly.

    ``normalize_dirs=True`` rescales the direction sub-vector of each mean
    onto the unit sphere (off by default; the raw [0, 1] draw is the
    documented behavior).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if n_dims not in (3, 6, 7):
        raise ValueError(f"n_dims must be 3, 6, or 7, got {n_dims}")
    rng = np.random.default_rng(seed)
    c = n_dims - 3
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    mu_x = rng.uniform(lo, hi, size=(count, 3))
    mu_q = rng.uniform(0.0, 1.0, size=(count, c))
    if normalize_dirs and c >= 3:
        d = mu_q[:, c - 3:]
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        mu_q[:, c - 3:] = d / norms
    extent = float(np.mean(hi - lo))
    s0 = extent / count ** (1.0 / 3.0)
    scene = Scene(
        n_dims=n_dims,
        mu_x=_f32(mu_x),
        mu_q=_f32(mu_q),
        rot=np.zeros((count, 3)),
        s_x_raw=np.full((count, 3), _f32(np.log(s0))),
        l_qx=np.zeros((count, c, 3)),
        s_q_raw=np.zeros((count, c)),
        b_x=np.zeros(count),
        b_q=np.zeros((count, c)),
        opacity_raw=np.zeros(count),  # logistic(0) = 0.5
        color=_f32(rng.uniform(0.0, 1.0, size=(count, 3))),
        background=np.asarray(background, dtype=np.float64),
    )
    return scene


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)
