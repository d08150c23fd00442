"""Render-and-compare 6D object pose refinement.

A differentiable soft rasterizer, the visual/geometric self-supervision
loss stack, pose evaluation metrics, a deterministic synthetic scene
factory, and a gradient-descent refinement loop, wired together by the
``renderfit`` command-line tool.
"""

from . import errors
from .features import FeaturePyramid
from .geometry import (
    Camera,
    Pose,
    SymmetrySet,
    TriMesh,
    axis_angle_matrix,
    backproject,
    load_obj,
    load_symmetries,
    pos_neg_split,
    project,
    rot6_from_matrix,
    rot6_to_matrix,
    transform_points,
)
from .losses import (
    LossReport,
    LossWeights,
    PseudoLabels,
    SensorFrame,
    chamfer_loss,
    farthest_point_sample,
    geom_loss,
    lab_loss,
    mask_loss,
    ms_ssim_loss,
    perceptual_loss,
    pm_loss,
    rwce,
    self_loss,
    visual_loss,
)
from .metrics import (
    PoseEstimate,
    add_recall,
    auc,
    auc_sweep,
    e_add,
    e_add_s,
    miou,
    rotation_angle_error,
    translation_error,
)
from .optim import Adam, OptimConfig, Trace, ema_update, refine
from .render import RenderConfig, RenderOutput, grad_render, render
from .scenes import SceneSpec, build_mesh, icosphere, perturb_pose, synthesize, unit_cube

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "Camera",
    "FeaturePyramid",
    "LossReport",
    "LossWeights",
    "OptimConfig",
    "Pose",
    "PoseEstimate",
    "PseudoLabels",
    "RenderConfig",
    "RenderOutput",
    "SceneSpec",
    "SensorFrame",
    "SymmetrySet",
    "Trace",
    "TriMesh",
    "add_recall",
    "auc",
    "auc_sweep",
    "axis_angle_matrix",
    "backproject",
    "build_mesh",
    "chamfer_loss",
    "e_add",
    "e_add_s",
    "ema_update",
    "errors",
    "farthest_point_sample",
    "geom_loss",
    "grad_render",
    "icosphere",
    "lab_loss",
    "load_obj",
    "load_symmetries",
    "mask_loss",
    "miou",
    "ms_ssim_loss",
    "perceptual_loss",
    "perturb_pose",
    "pm_loss",
    "pos_neg_split",
    "project",
    "refine",
    "render",
    "rot6_from_matrix",
    "rot6_to_matrix",
    "rotation_angle_error",
    "rwce",
    "self_loss",
    "synthesize",
    "transform_points",
    "translation_error",
    "unit_cube",
    "visual_loss",
]
