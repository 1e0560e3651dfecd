"""Pinhole camera rig with per-frame world-to-camera extrinsics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lie import InvalidArgumentError, Pose, pose_inverse

# Camera-frame depths at or below this are treated as behind the camera.
MIN_DEPTH = 1e-9


@dataclass(frozen=True)
class CameraRig:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: tuple  # per-frame world-to-camera Pose

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")
        object.__setattr__(self, "extrinsics", tuple(self.extrinsics))
        if not self.extrinsics:
            raise InvalidArgumentError("rig needs at least one frame")

    @property
    def n_frames(self) -> int:
        return len(self.extrinsics)

    def frame_of_time(self, t: float) -> int:
        """Nearest frame index for a normalized time in [0, 1]."""
        k = int(round(float(t) * (self.n_frames - 1)))
        return min(max(k, 0), self.n_frames - 1)

    def project(self, world_point, frame: int):
        """Pixel coordinates, or None when the point is behind the camera."""
        pc = self.extrinsics[frame].apply(world_point)
        if pc[2] <= MIN_DEPTH:
            return None
        return np.array([
            self.fx * pc[0] / pc[2] + self.cx,
            self.fy * pc[1] / pc[2] + self.cy,
        ])

    def backproject(self, pixel, depth: float, frame: int) -> np.ndarray:
        """World point of a pixel at a given camera-frame depth."""
        ray = np.array([
            (pixel[0] - self.cx) / self.fx,
            (pixel[1] - self.cy) / self.fy,
            1.0,
        ])
        return pose_inverse(self.extrinsics[frame]).apply(depth * ray)

    def in_bounds(self, pixel) -> bool:
        return bool(0.0 <= pixel[0] < self.width and 0.0 <= pixel[1] < self.height)

    def with_extrinsics(self, extrinsics) -> "CameraRig":
        return CameraRig(self.fx, self.fy, self.cx, self.cy, self.width, self.height, tuple(extrinsics))
