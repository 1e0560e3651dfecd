"""Continuous-time SE(3) motion bases: cumulative B-splines on rigid motions,
adaptive control-point management, dual-quaternion point deformation, and
joint base/camera optimization."""

from .lie import (
    BranchAmbiguityError,
    DualQuat,
    InvalidArgumentError,
    Pose,
    Rotation,
    Twist,
    dqb,
    dualquat_to_pose,
    pose_compose,
    pose_inverse,
    pose_to_dualquat,
    se3_exp,
    se3_log,
    so3_exp,
    so3_log,
)
from .spline import (
    MotionBase,
    Tracklet2D,
    Tracklet3D,
    cumulative_basis,
    evaluate,
    evaluate_translations,
    fill_invisible,
    frame_times,
    init_base,
    lift_tracklet,
)
from .cameras import CameraRig
from .adaptive import (
    AdaptiveConfig,
    CannotPruneError,
    MaskFrame,
    densify_step,
    prune_step,
    select_prune,
)
from .deform import DeformConfig, DynamicPoint, deform_point, deform_set, soft_opacity
from .optimize import FitConfig, FitDivergedError, FitResult, NonFiniteLossError, fit
from .scene import Metrics, Scene, SynthConfig, evaluate_metrics, generate_synthetic
from .estimator import SE3SplineRegressor

__version__ = "0.1.0"

__all__ = [
    "AdaptiveConfig", "BranchAmbiguityError", "CameraRig", "CannotPruneError",
    "DeformConfig", "DualQuat", "DynamicPoint", "FitConfig", "FitDivergedError",
    "FitResult", "InvalidArgumentError", "MaskFrame", "Metrics", "MotionBase",
    "NonFiniteLossError", "Pose", "Rotation", "SE3SplineRegressor", "Scene",
    "SynthConfig", "Tracklet2D", "Tracklet3D", "Twist", "cumulative_basis",
    "densify_step", "deform_point", "deform_set", "dqb", "dualquat_to_pose",
    "evaluate", "evaluate_metrics", "evaluate_translations", "fill_invisible",
    "fit", "frame_times", "generate_synthetic", "init_base", "lift_tracklet",
    "pose_compose", "pose_inverse", "pose_to_dualquat", "prune_step",
    "se3_exp", "se3_log", "select_prune", "so3_exp", "so3_log", "soft_opacity",
]
