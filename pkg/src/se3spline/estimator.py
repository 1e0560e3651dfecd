"""Scikit-learn style facade over the fitting pipeline.

SE3SplineRegressor.fit accepts either a Scene or a raw (P, F, 3) array of
tracked positions (a default static camera rig is synthesized in the latter
case, so only the 3D anchoring losses are active).  After fitting, transform
warps query points between two timestamps and predict samples the fitted base
trajectories.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cameras import CameraRig
from .deform import DeformConfig, DynamicPoint, deform_point
from .lie import InvalidArgumentError, Pose, Rotation
from .optimize import AdaptiveConfig, FitConfig, fit
from .scene import Scene
from .spline import Tracklet3D, evaluate_translations


def _default_rig(n_frames: int) -> CameraRig:
    extr = tuple(Pose(Rotation.identity(), np.array([0.0, 0.0, 10.0])) for _ in range(n_frames))
    return CameraRig(500.0, 500.0, 320.0, 240.0, 640, 480, extr)


class SE3SplineRegressor(BaseEstimator):
    """Fits one rigid-motion spline per tracked point and deforms by blending.

    Parameters mirror FitConfig; see that class for semantics.
    """

    def __init__(self, n_control=None, iterations=2000, lr_bases=1.6e-4,
                 lr_cameras=3e-4, deform_k=8, optimize_cameras=True,
                 enable_prune=True, enable_densify=True, rng_seed=0):
        self.n_control = n_control
        self.iterations = iterations
        self.lr_bases = lr_bases
        self.lr_cameras = lr_cameras
        self.deform_k = deform_k
        self.optimize_cameras = optimize_cameras
        self.enable_prune = enable_prune
        self.enable_densify = enable_densify
        self.rng_seed = rng_seed

    def _config(self) -> FitConfig:
        return FitConfig(
            iterations=self.iterations,
            lr_bases=self.lr_bases,
            lr_cameras=self.lr_cameras,
            deform_k=self.deform_k,
            n_control=self.n_control,
            optimize_cameras=self.optimize_cameras,
            enable_prune=self.enable_prune,
            enable_densify=self.enable_densify,
            adaptive=AdaptiveConfig(rng_seed=self.rng_seed),
            rng_seed=self.rng_seed,
        )

    def fit(self, X, y=None):
        if isinstance(X, Scene):
            scene = X
        else:
            X = np.asarray(X, dtype=float)
            if X.ndim != 3 or X.shape[2] != 3 or X.shape[1] < 4:
                raise InvalidArgumentError(
                    "X must be a Scene or an array of shape (n_tracks, n_frames>=4, 3)")
            tracklets = [Tracklet3D.from_positions(X[i]) for i in range(X.shape[0])]
            scene = Scene(tracklets, _default_rig(X.shape[1]))
        result = fit(scene, self._config())
        self.bases_ = result.bases
        self.rig_ = result.rig
        self.base_tracklet_ = result.base_tracklet
        self.trace_ = result.trace
        self.diagnostics_ = result.diagnostics
        return self

    def transform(self, X, t_ref: float = 0.0, t_obs: float = 1.0) -> np.ndarray:
        """Warp (N, 3) points from t_ref to t_obs along the fitted motion."""
        check_is_fitted(self, "bases_")
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 3:
            raise InvalidArgumentError("X must have shape (n_points, 3)")
        cfg = DeformConfig(k=min(self.deform_k, len(self.bases_)))
        out = np.empty_like(X)
        for i, mu in enumerate(X):
            p = DynamicPoint(mu, Rotation.identity(), 1.0, float(t_ref))
            out[i], _ = deform_point(p, self.bases_, float(t_obs), cfg)
        return out

    def predict(self, times) -> np.ndarray:
        """Fitted base translations, shape (n_bases, len(times), 3)."""
        check_is_fitted(self, "bases_")
        return np.array([evaluate_translations(b, times) for b in self.bases_])
