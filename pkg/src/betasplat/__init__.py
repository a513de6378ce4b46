"""N-dimensional anisotropic Beta-kernel splatting on the CPU."""

from .camera import Camera
from .config import DEFAULT_SETTINGS, RenderSettings
from .covariance import CovBlocks, CovFactors, parameter_count
from .gradients import LossConfig, SceneGrads, backward, fd_check
from .kernels import beta1d, clamp_shapes, gaussian_limit_gap, query_exponent, spatial_exponent
from .metrics import psnr, ssim
from .optim import TrainConfig, adam_step, clone_opacity, evaluate, mcmc_relocate, noise_inject, train
from .raster import (Splat2D, composite, kernel2d, project, reference_render, render,
                     render_decomposition, render_with_cache)
from .scene import Primitive, Scene, ShapeParams, init_scene
from .sceneio import load_dataset, load_manifest, load_scene, save_scene
from .slicing import (ConditionedSplat, DegeneratePrimitiveError, Query, conditional_cov,
                      conditional_mean, opacity_gate, slice_primitive, slice_scene)
from .synthetic import dataset_frames, make_synthetic, write_dataset

__version__ = "0.1.0"
