"""Scene container, synthetic-scene generation, and evaluation metrics.

A scene bundles everything the fitter consumes: 3D tracklets, an (optional)
set of 2D tracks, a camera rig, optional complex-motion masks, and optional
pre-built motion bases.  The synthetic generator produces ground-truth motion
from one of four families (constant screw, piecewise screw, random smooth,
articulated chain) observed by an orbiting camera, with optional position
noise and visibility dropout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cameras import CameraRig
from .deform import DeformConfig, DynamicPoint, deform_point
from .lie import InvalidArgumentError, Pose, Rotation, Twist, rotation_from_matrix, se3_exp
from .spline import Tracklet2D, Tracklet3D, frame_times

MOTION_FAMILIES = ("constant-screw", "piecewise-screw", "random-smooth", "articulated-chain")


@dataclass
class Scene:
    tracklets3d: list
    camera: CameraRig
    tracklets2d: list | None = None
    mask_seq: list | None = None
    bases: list | None = None
    points: list | None = None                # DynamicPoints, if instantiated
    ground_truth: np.ndarray | None = None   # (P, F, 3) clean positions, if known

    def __post_init__(self):
        n = self.camera.n_frames
        for tr in self.tracklets3d:
            if tr.n_frames != n:
                raise InvalidArgumentError("tracklet frame count must match the camera rig")
        if self.tracklets2d is not None:
            for tr in self.tracklets2d:
                if tr.n_frames != n:
                    raise InvalidArgumentError("2D track frame count must match the camera rig")

    @property
    def n_frames(self) -> int:
        return self.camera.n_frames

    @property
    def times(self) -> np.ndarray:
        return frame_times(self.n_frames)


@dataclass(frozen=True)
class SynthConfig:
    family: str = "random-smooth"
    n_tracklets: int = 6
    n_frames: int = 30
    noise_sigma: float = 0.0        # world-space position noise
    dropout: float = 0.0            # per-frame invisibility probability
    perturb_px: float = 0.0         # uniform 2D-track noise range, +/- pixels
    rng_seed: int = 0
    width: int = 640
    height: int = 480
    focal: float = 2000.0
    orbit_radius: float = 8.0
    spread: float = 0.4             # spatial extent of the initial point cloud

    def __post_init__(self):
        if self.family not in MOTION_FAMILIES:
            raise InvalidArgumentError(f"unknown motion family {self.family!r}")
        if self.n_tracklets < 1 or self.n_frames < 2:
            raise InvalidArgumentError("need >= 1 tracklet and >= 2 frames")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgumentError("dropout must lie in [0, 1)")


def _look_at(center: np.ndarray, target: np.ndarray) -> Pose:
    """World-to-camera pose for a camera at `center` looking at `target` (+z forward)."""
    z = target - center
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(up, z)) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    r_wc = np.stack([x, y, z])          # rows: camera axes in world coordinates
    rot = rotation_from_matrix(r_wc)
    return Pose(rot, -rot.apply(center))


def orbit_rig(cfg: SynthConfig) -> CameraRig:
    """Camera circling the origin at fixed height, one pose per frame."""
    extr = []
    for k in range(cfg.n_frames):
        ang = 2.0 * np.pi * k / cfg.n_frames * 0.25   # quarter orbit over the clip
        center = np.array([
            cfg.orbit_radius * np.cos(ang),
            cfg.orbit_radius * np.sin(ang),
            0.5 * cfg.orbit_radius,
        ])
        extr.append(_look_at(center, np.zeros(3)))
    return CameraRig(cfg.focal, cfg.focal, cfg.width / 2.0, cfg.height / 2.0,
                     cfg.width, cfg.height, tuple(extr))


def _screw_positions(p0: np.ndarray, xi: np.ndarray, times) -> np.ndarray:
    return np.array([se3_exp(Twist(t * xi[:3], t * xi[3:])).apply(p0) for t in times])


def _family_positions(cfg: SynthConfig, rng) -> np.ndarray:
    """Clean positions, (n_tracklets, n_frames, 3)."""
    times = frame_times(cfg.n_frames)
    starts = rng.normal(0.0, cfg.spread, (cfg.n_tracklets, 3))
    if cfg.family == "constant-screw":
        xi = np.concatenate([rng.normal(0, 0.4, 3), rng.normal(0, 0.8, 3)])
        return np.array([_screw_positions(p0, xi, times) for p0 in starts])
    if cfg.family == "piecewise-screw":
        xi1 = np.concatenate([rng.normal(0, 0.4, 3), rng.normal(0, 0.8, 3)])
        xi2 = np.concatenate([rng.normal(0, 0.4, 3), rng.normal(0, 0.8, 3)])
        out = np.zeros((cfg.n_tracklets, cfg.n_frames, 3))
        half = se3_exp(Twist(0.5 * xi1[:3], 0.5 * xi1[3:]))
        for i, p0 in enumerate(starts):
            for k, t in enumerate(times):
                if t <= 0.5:
                    out[i, k] = se3_exp(Twist(t * xi1[:3], t * xi1[3:])).apply(p0)
                else:
                    s = t - 0.5
                    out[i, k] = se3_exp(Twist(s * xi2[:3], s * xi2[3:])).apply(half.apply(p0))
        return out
    if cfg.family == "random-smooth":
        # one shared rigid motion along a low-frequency Fourier twist: the
        # cloud stays rigid (ARAP-consistent) while the trajectory is smooth
        # and random
        drift = np.concatenate([rng.normal(0, 0.01, 3), rng.normal(0, 0.12, 3)])
        amp = np.concatenate([rng.normal(0, 0.005, (2, 3)),
                              rng.normal(0, 0.06, (2, 3))], axis=1)
        phase = rng.uniform(0, 2 * np.pi, 2)
        out = np.zeros((cfg.n_tracklets, cfg.n_frames, 3))
        for k, t in enumerate(times):
            xi = drift * t
            for j in (0, 1):
                xi = xi + amp[j] * (np.sin(2 * np.pi * (j + 1) * t + phase[j])
                                    - np.sin(phase[j]))
            motion = se3_exp(Twist(xi[:3], xi[3:]))
            for i, p0 in enumerate(starts):
                out[i, k] = motion.apply(p0)
        return out
    # articulated-chain: rigid links hinged in sequence, joint angles oscillate
    n_links = max(2, min(4, cfg.n_tracklets))
    link_len = cfg.spread / 2.0
    amps = rng.uniform(0.3, 0.9, n_links)
    phases = rng.uniform(0, 2 * np.pi, n_links)
    out = np.zeros((cfg.n_tracklets, cfg.n_frames, 3))
    for k, t in enumerate(times):
        joint = np.zeros(3)
        heading = 0.0
        ends = []
        for j in range(n_links):
            heading += amps[j] * np.sin(2 * np.pi * t + phases[j])
            joint = joint + link_len * np.array([np.cos(heading), np.sin(heading), 0.0])
            ends.append(joint.copy())
        for i in range(cfg.n_tracklets):
            out[i, k] = ends[i % n_links] + starts[i] * 0.1
    return out


def generate_synthetic(cfg: SynthConfig) -> Scene:
    """Ground-truth motion + orbiting camera + projected 2D tracks."""
    rng = np.random.default_rng(cfg.rng_seed)
    rig = orbit_rig(cfg)
    clean = _family_positions(cfg, rng)
    noisy = clean + rng.normal(0.0, cfg.noise_sigma, clean.shape) if cfg.noise_sigma > 0 else clean.copy()

    tracklets3d, tracklets2d = [], []
    for i in range(cfg.n_tracklets):
        vis = rng.random(cfg.n_frames) >= cfg.dropout
        vis[0] = True   # the reference frame is always observed
        pixels = np.zeros((cfg.n_frames, 2))
        vis2d = np.zeros(cfg.n_frames, dtype=bool)
        for k in range(cfg.n_frames):
            px = rig.project(noisy[i, k], k)
            if px is not None and rig.in_bounds(px):
                pixels[k] = px
                vis2d[k] = vis[k]
        tracklets3d.append(Tracklet3D.from_positions(noisy[i], vis))
        tracklets2d.append(Tracklet2D(pixels, vis2d))
    if cfg.perturb_px > 0:
        tracklets2d = perturb_tracks(tracklets2d, cfg.perturb_px, cfg.rng_seed + 1)
    return Scene(tracklets3d, rig, tracklets2d, ground_truth=clean)


def perturb_tracks(tracks2d, range_px: float, rng_seed: int) -> list:
    """Uniform per-frame pixel noise in [-range_px, range_px], visibility kept."""
    rng = np.random.default_rng(rng_seed)
    out = []
    for tr in tracks2d:
        noise = rng.uniform(-range_px, range_px, tr.pixels.shape)
        out.append(Tracklet2D(tr.pixels + noise, tr.visibility))
    return out


@dataclass
class Metrics:
    rmse: float
    pck_t: float
    n_bases: int
    n_control_total: int
    per_frame: np.ndarray | None = None   # per-frame position RMSE

    def as_rows(self):
        return [
            ("rmse", self.rmse),
            ("pck_t", self.pck_t),
            ("n_bases", float(self.n_bases)),
            ("n_control_total", float(self.n_control_total)),
        ]


def trajectory_rmse(bases, base_tracklet, scene: Scene):
    """(scalar, per-frame) root mean squared distance between base translations
    and the (ground truth if available, else observed) tracklet positions."""
    from .spline import evaluate_translations

    ref = scene.ground_truth
    times = scene.times
    sq = np.zeros((len(bases), len(times)))
    for b, base in enumerate(bases):
        tr = base_tracklet[b]
        target = ref[tr] if ref is not None else scene.tracklets3d[tr].positions
        pred = evaluate_translations(base, times)
        sq[b] = ((pred - target) ** 2).sum(axis=1)
    return float(np.sqrt(sq.mean())), np.sqrt(sq.mean(axis=0))


def pck_t(bases, scene: Scene, n_pairs: int = 20, k: int = 8,
          threshold_fraction: float = 0.05, rng_seed: int = 0) -> float:
    """Point-transfer accuracy: deform ground-truth points between random frame
    pairs, reproject, and report the fraction landing within a pixel threshold
    of the ground-truth projection."""
    if scene.ground_truth is None:
        raise InvalidArgumentError("pck_t needs ground-truth positions")
    rng = np.random.default_rng(rng_seed)
    rig = scene.camera
    thresh = threshold_fraction * max(rig.width, rig.height)
    cfg = DeformConfig(k=min(k, len(bases)))
    times = scene.times
    hits, total = 0, 0
    for _ in range(n_pairs):
        a, b = rng.choice(scene.n_frames, size=2, replace=False)
        for p in range(scene.ground_truth.shape[0]):
            src = scene.ground_truth[p, a]
            dst = scene.ground_truth[p, b]
            px_true = rig.project(dst, int(b))
            if px_true is None:
                continue
            point = DynamicPoint(src, Rotation.identity(), 1.0, float(times[a]))
            moved, _ = deform_point(point, bases, float(times[b]), cfg)
            px_pred = rig.project(moved, int(b))
            total += 1
            if px_pred is not None and np.linalg.norm(px_pred - px_true) <= thresh:
                hits += 1
    return hits / total if total else 0.0


def evaluate_metrics(bases, base_tracklet, scene: Scene,
                     pck_threshold_fraction: float = 0.05, rng_seed: int = 0) -> Metrics:
    rmse, per_frame = trajectory_rmse(bases, base_tracklet, scene)
    return Metrics(
        rmse=rmse,
        pck_t=pck_t(bases, scene, threshold_fraction=pck_threshold_fraction,
                    rng_seed=rng_seed),
        n_bases=len(bases),
        n_control_total=sum(b.n_control for b in bases),
        per_frame=per_frame,
    )
