"""Cumulative cubic B-spline evaluation on SE(3) and motion-base construction.

A motion base stores N_c control poses Q_i on a uniform knot grid over [0, 1]
together with the cached relative twists xi_i = log(Q_i^-1 Q_{i+1}).  The
spline is evaluated in the cumulative form

    T(t) = Q_0 * exp(c_0(t) xi_0) * ... * exp(c_{N_c-2}(t) xi_{N_c-2}),

where the per-twist coefficient c_i ramps smoothly from 0 to 1 over the three
segments around knot i using the standard uniform cumulative basis matrix.
End segments fold the out-of-range basis weight into the boundary twist
(equivalent to phantom end control points extrapolated along the end twists),
which makes the spline interpolate Q_0 at t=0 and Q_{N_c-1} at t=1 exactly and
reproduce constant screws sampled on the uniform grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import (
    InvalidArgumentError,
    Pose,
    Rotation,
    Twist,
    pose_compose,
    pose_inverse,
    se3_exp,
    se3_log,
)

DEFAULT_CONTROL_POINTS = 100


def segment_local_coeffs(u: float) -> np.ndarray:
    """Cumulative cubic basis-matrix values (1, B1, B2, B3) at local u in [0, 1]."""
    u2 = u * u
    u3 = u2 * u
    return np.array([
        1.0,
        (5.0 + 3.0 * u - 3.0 * u2 + u3) / 6.0,
        (1.0 + 3.0 * u + 3.0 * u2 - 2.0 * u3) / 6.0,
        u3 / 6.0,
    ])


def relative_twists(control_poses) -> list[Twist]:
    """Adjacent relative twists xi_i = log(Q_i^-1 Q_{i+1})."""
    poses = list(control_poses)
    if len(poses) < 2:
        raise InvalidArgumentError("need at least two control poses")
    return [
        se3_log(pose_compose(pose_inverse(poses[i]), poses[i + 1]))
        for i in range(len(poses) - 1)
    ]


@dataclass(frozen=True)
class MotionBase:
    """One SE(3) B-spline: control poses, uniform knots, cached twists."""

    control_poses: tuple
    knot_times: np.ndarray
    twists: tuple = field(default=None)

    def __post_init__(self):
        poses = tuple(self.control_poses)
        if len(poses) < 4:
            raise InvalidArgumentError("a cubic motion base needs at least 4 control poses")
        knots = np.asarray(self.knot_times, dtype=float)
        if knots.shape != (len(poses),):
            raise InvalidArgumentError("knot_times length must match control_poses")
        if not (np.all(np.diff(knots) > 0) and knots[0] == 0.0 and knots[-1] == 1.0):
            raise InvalidArgumentError("knot_times must be strictly increasing from 0 to 1")
        knots = knots.copy()
        knots.flags.writeable = False
        object.__setattr__(self, "control_poses", poses)
        object.__setattr__(self, "knot_times", knots)
        object.__setattr__(self, "twists", tuple(relative_twists(poses)))

    @staticmethod
    def create(control_poses, knot_times=None) -> "MotionBase":
        poses = tuple(control_poses)
        if knot_times is None:
            knot_times = np.linspace(0.0, 1.0, len(poses))
        return MotionBase(poses, knot_times, None)

    @property
    def n_control(self) -> int:
        return len(self.control_poses)

    def with_control_pose(self, index: int, pose: Pose) -> "MotionBase":
        """New base with one control pose replaced (twists recomputed)."""
        poses = list(self.control_poses)
        poses[index] = pose
        return MotionBase(tuple(poses), self.knot_times, None)

    def without_control_pose(self, index: int) -> "MotionBase":
        """New base with one control pose removed and knots re-uniformized."""
        if self.n_control <= 4:
            raise InvalidArgumentError("cannot remove below the cubic minimum of 4")
        poses = list(self.control_poses)
        del poses[index]
        return MotionBase.create(tuple(poses))


def _segment_of(base: MotionBase, t: float):
    knots = base.knot_times
    s = int(np.searchsorted(knots, t, side="right")) - 1
    s = min(max(s, 0), base.n_control - 2)
    u = (t - knots[s]) / (knots[s + 1] - knots[s])
    return s, float(u)


def twist_coefficients(base: MotionBase, t: float) -> np.ndarray:
    """Per-twist blending coefficients c_i(t), length N_c - 1.

    Saturated twists (wholly before the active window) have coefficient 1,
    twists wholly after have 0; at most three coefficients lie strictly
    inside (0, 1).
    """
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError("t must lie in [0, 1]")
    n = base.n_control
    s, u = _segment_of(base, t)
    _, b1, b2, b3 = segment_local_coeffs(u)
    c = np.zeros(n - 1)
    if s >= 1:
        c[: s - 1] = 1.0
        c[s - 1] += b1
    else:
        c[0] += b1 - 1.0  # phantom start twist coincides with the first twist
    c[s] += b2
    if s + 1 <= n - 2:
        c[s + 1] += b3
    else:
        c[s] += b3  # phantom end twist coincides with the last twist
    return c


def cumulative_basis(t: float, base: MotionBase) -> np.ndarray:
    """Per-control-point cumulative coefficients Omega_i(t), length N_c.

    Omega_0 is identically 1; Omega_{i+1} is the blending coefficient of
    twist i, non-increasing in i, saturating at 1 before the active segment
    and 0 after it.
    """
    c = twist_coefficients(base, t)
    return np.concatenate([[1.0], c])


def evaluate(base: MotionBase, t: float) -> Pose:
    """Spline pose at normalized time t (clamped to [0, 1])."""
    if not np.isfinite(t):
        raise InvalidArgumentError("t must be finite")
    t = min(max(float(t), 0.0), 1.0)
    c = twist_coefficients(base, t)
    # All twists before the first non-saturated one telescope into a prefix
    # control pose: Q_0 * exp(xi_0) * ... * exp(xi_{j-1}) = Q_j.
    active = np.nonzero(c < 1.0)[0]
    j0 = int(active[0]) if active.size else len(c)
    pose = base.control_poses[j0]
    for i in range(j0, len(c)):
        if c[i] == 0.0:
            break
        pose = pose_compose(pose, se3_exp(base.twists[i].scaled(c[i])))
    return pose


def evaluate_bruteforce(base: MotionBase, t: float) -> Pose:
    """Full product over all N_c - 1 factors; oracle for evaluate()."""
    c = twist_coefficients(base, min(max(float(t), 0.0), 1.0))
    pose = base.control_poses[0]
    for i, ci in enumerate(c):
        pose = pose_compose(pose, se3_exp(base.twists[i].scaled(float(ci))))
    return pose


def evaluate_translations(base: MotionBase, times) -> np.ndarray:
    """Translations of the spline at many times, shape (len(times), 3)."""
    return np.array([evaluate(base, float(t)).translation for t in times])


@dataclass(frozen=True)
class Tracklet3D:
    """One 3D point tracked across frames with per-frame visibility."""

    positions: np.ndarray       # (N, 3)
    orientations: tuple         # N Rotations
    visibility: np.ndarray      # (N,) bool
    times: np.ndarray           # (N,) normalized, strictly increasing

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        vis = np.asarray(self.visibility, dtype=bool)
        times = np.asarray(self.times, dtype=float)
        n = pos.shape[0]
        orientations = tuple(self.orientations)
        if pos.shape != (n, 3) or vis.shape != (n,) or times.shape != (n,) or len(orientations) != n:
            raise InvalidArgumentError("per-frame arrays must share one length")
        if not vis.any():
            raise InvalidArgumentError("tracklet needs at least one visible frame")
        for a in (pos, times):
            a.flags.writeable = False
        vis.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "orientations", orientations)
        object.__setattr__(self, "visibility", vis)
        object.__setattr__(self, "times", times)

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @staticmethod
    def from_positions(positions, visibility=None, times=None) -> "Tracklet3D":
        positions = np.asarray(positions, dtype=float)
        n = positions.shape[0]
        if visibility is None:
            visibility = np.ones(n, dtype=bool)
        if times is None:
            times = frame_times(n)
        return Tracklet3D(positions, tuple(Rotation.identity() for _ in range(n)), visibility, times)


@dataclass(frozen=True)
class Tracklet2D:
    """One pixel-space track with per-frame visibility."""

    pixels: np.ndarray          # (N, 2)
    visibility: np.ndarray      # (N,) bool

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        vis = np.asarray(self.visibility, dtype=bool)
        if px.ndim != 2 or px.shape[1] != 2 or vis.shape != (px.shape[0],):
            raise InvalidArgumentError("pixels must be (N, 2) with matching visibility")
        px.flags.writeable = False
        vis.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "visibility", vis)

    @property
    def n_frames(self) -> int:
        return self.pixels.shape[0]


def frame_times(n_frames: int) -> np.ndarray:
    """Normalized time of each frame: k -> k / (N_T - 1)."""
    if n_frames < 2:
        raise InvalidArgumentError("need at least two frames")
    return np.linspace(0.0, 1.0, n_frames)


def lift_tracklet(track: Tracklet2D, depths, camera) -> Tracklet3D:
    """Back-project a 2D track to world space using per-frame depths.

    Invisible frames keep zero placeholder positions (fill_invisible
    overwrites them); orientations start at identity.
    """
    depths = np.asarray(depths, dtype=float)
    n = track.n_frames
    if depths.shape != (n,):
        raise InvalidArgumentError("depths length must match track")
    positions = np.zeros((n, 3))
    for k in range(n):
        if not track.visibility[k]:
            continue
        if depths[k] <= 0.0:
            raise InvalidArgumentError(f"non-positive depth {depths[k]} at visible frame {k}")
        positions[k] = camera.backproject(track.pixels[k], depths[k], k)
    return Tracklet3D(
        positions,
        tuple(Rotation.identity() for _ in range(n)),
        track.visibility,
        frame_times(n),
    )


def fill_invisible(track: Tracklet3D) -> Tracklet3D:
    """Replace invisible positions by linear interpolation between the nearest
    visible frames; runs before the first / after the last visible frame are
    held constant. Visibility flags are preserved."""
    vis_idx = np.nonzero(track.visibility)[0]
    if vis_idx.size == 0:
        raise InvalidArgumentError("tracklet has no visible frame")
    t = track.times
    positions = np.column_stack([
        np.interp(t, t[vis_idx], track.positions[vis_idx, d]) for d in range(3)
    ])
    return Tracklet3D(positions, track.orientations, track.visibility, track.times)


def init_base(track: Tracklet3D, n_c: int = DEFAULT_CONTROL_POINTS) -> MotionBase:
    """Motion base from a tracklet: identity orientations and positions
    linearly interpolated at n_c uniformly spaced timestamps."""
    if n_c < 4:
        raise InvalidArgumentError("n_c must be at least 4")
    if track.n_frames < n_c:
        raise InvalidArgumentError(f"track has {track.n_frames} frames, fewer than n_c={n_c}")
    filled = fill_invisible(track)
    sample_times = np.linspace(filled.times[0], filled.times[-1], n_c)
    positions = np.column_stack([
        np.interp(sample_times, filled.times, filled.positions[:, d]) for d in range(3)
    ])
    poses = tuple(Pose(Rotation.identity(), p) for p in positions)
    return MotionBase.create(poses)
