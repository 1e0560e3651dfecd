"""Warping dynamic points between timestamps via dual-quaternion blending.

Each point follows the K motion bases nearest to its anchor base at its
reference time.  Per-neighbor relative transforms (world frame, reference ->
observation) are blended with Gaussian RBF weights whose bandwidth is the
distance to the k-th neighbor, and the blend is applied to the point's
position and orientation.  Opacity is down-weighted with the soft-segment
sigmoid as the observation time moves away from the reference time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lie import (
    InvalidArgumentError,
    Pose,
    Rotation,
    dqb,
    dualquat_to_pose,
    pose_compose,
    pose_inverse,
    pose_to_dualquat,
)
from .spline import evaluate

SIGMA_FLOOR = 1e-9


@dataclass(frozen=True)
class DynamicPoint:
    position: np.ndarray
    orientation: Rotation
    opacity: float
    t_ref: float

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float)
        if p.shape != (3,):
            raise InvalidArgumentError("position must be a 3-vector")
        if not 0.0 <= self.opacity <= 1.0:
            raise InvalidArgumentError("opacity must lie in [0, 1]")
        if not 0.0 <= self.t_ref <= 1.0:
            raise InvalidArgumentError("t_ref must lie in [0, 1]")
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "position", p)


@dataclass(frozen=True)
class DeformConfig:
    k: int = 8
    soft_scale: float = 5.0

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgumentError("k must be at least 1")
        if self.soft_scale <= 0:
            raise InvalidArgumentError("soft_scale must be positive")


def base_positions(bases, t: float) -> np.ndarray:
    return np.array([evaluate(b, t).translation for b in bases])


def assign_base(point: DynamicPoint, bases) -> int:
    """Id of the base nearest to the point at its reference time; ties -> smallest id."""
    bases = list(bases)
    if not bases:
        raise InvalidArgumentError("need at least one base")
    d = np.linalg.norm(base_positions(bases, point.t_ref) - point.position, axis=1)
    return int(np.argmin(d))


def knn_bases(anchor: int, bases, k: int, t_ref: float) -> list[int]:
    """Ids of the k bases nearest to the anchor base's position at t_ref,
    anchor included, ascending distance with ties broken by id."""
    bases = list(bases)
    if k > len(bases):
        raise InvalidArgumentError(f"k={k} exceeds base count {len(bases)}")
    pos = base_positions(bases, t_ref)
    d = np.linalg.norm(pos - pos[anchor], axis=1)
    order = sorted(range(len(bases)), key=lambda i: (d[i], i))
    return order[:k]


def relative_transform(base, t_ref: float, t_obs: float) -> Pose:
    """World-frame relative transform of a base from t_ref to t_obs."""
    for t in (t_ref, t_obs):
        if not 0.0 <= t <= 1.0:
            raise InvalidArgumentError("times must lie in [0, 1]")
    return pose_compose(evaluate(base, t_obs), pose_inverse(evaluate(base, t_ref)))


def _blend_transform(point: DynamicPoint, bases, t_obs: float, cfg: DeformConfig) -> Pose:
    anchor = assign_base(point, bases)
    neighbors = knn_bases(anchor, bases, cfg.k, point.t_ref)
    pos = base_positions(bases, point.t_ref)
    d = np.array([np.linalg.norm(pos[i] - point.position) for i in neighbors])
    sigma = max(float(d[-1]), SIGMA_FLOOR)
    w = np.exp(-(d * d) / (2.0 * sigma * sigma))
    entries = [
        (w[j], pose_to_dualquat(relative_transform(bases[i], point.t_ref, t_obs)))
        for j, i in enumerate(neighbors)
    ]
    return dualquat_to_pose(dqb(entries))


def deform_point(point: DynamicPoint, bases, t_obs: float, cfg: DeformConfig):
    """(position, orientation) of the point warped from t_ref to t_obs."""
    delta = _blend_transform(point, bases, t_obs, cfg)
    return delta.apply(point.position), delta.rotation.compose(point.orientation)


def soft_opacity(o: float, t_ref: float, t_obs: float, soft_scale: float = 5.0) -> float:
    """sigmoid(scale * (1 - |t_ref - t_obs|)) * o."""
    x = soft_scale * (1.0 - abs(t_ref - t_obs))
    return o / (1.0 + math.exp(-x))


def deform_set(points, bases, t_obs: float, cfg: DeformConfig) -> list[DynamicPoint]:
    """Element-wise deform + soft opacity, input order preserved."""
    out = []
    for p in points:
        mu, rot = deform_point(p, bases, t_obs, cfg)
        out.append(DynamicPoint(mu, rot, soft_opacity(p.opacity, p.t_ref, t_obs, cfg.soft_scale), p.t_ref))
    return out
