"""Adaptive control of motion bases: control-point pruning and densification.

Pruning removes, per base and per step, the control point whose removal
changes the trajectory least (squared relative-twist norm summed over the
frame times), provided that error stays below a threshold.  Densification
clones bases whose projected trajectory spends more than a configured
fraction of frames inside a complex-motion mask, perturbing the clone's
first control pose.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cameras import CameraRig
from .lie import (
    InvalidArgumentError,
    Pose,
    Twist,
    pose_compose,
    pose_inverse,
    se3_exp,
    se3_log,
)
from .spline import MotionBase, evaluate

PRUNE_STRATEGIES = ("argmin", "random", "all")


class CannotPruneError(ValueError):
    """Base is already at the cubic minimum of 4 control points."""


@dataclass(frozen=True)
class MaskFrame:
    """Binary mask, row-major bits of size width * height."""

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool).reshape(-1)
        if bits.size != self.width * self.height:
            raise InvalidArgumentError("bits length must equal width * height")
        bits = bits.copy()
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    def grid(self) -> np.ndarray:
        return self.bits.reshape(self.height, self.width)

    def at(self, px: float, py: float) -> bool:
        ix, iy = int(px), int(py)
        return bool(self.grid()[iy, ix])


@dataclass(frozen=True)
class AdaptiveConfig:
    eps_prune: float = 5.0
    eps_error: float = 0.5
    n_prune: int = 500
    n_densify: int = 500
    in_mask_fraction: float = 0.5
    perturb_trans_sigma: float = 0.01
    perturb_rot_sigma: float = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        if self.eps_prune <= 0 or not 0.0 <= self.eps_error <= 1.0:
            raise InvalidArgumentError("thresholds out of range")
        if not 0.0 < self.in_mask_fraction <= 1.0:
            raise InvalidArgumentError("in_mask_fraction must lie in (0, 1]")


@dataclass
class PruneRecord:
    base_id: int
    removed_index: int
    error: float


@dataclass
class PruneReport:
    removals: list = field(default_factory=list)
    skipped: list = field(default_factory=list)   # base ids at minimum size


@dataclass
class DensifyRecord:
    source_id: int
    clone_id: int
    perturbation: np.ndarray   # drawn 6-vector twist (omega, v)
    in_mask_fraction: float


def prune_error(base: MotionBase, index: int, eval_times) -> float:
    """Trajectory change from removing one control point.

    Sum over eval_times of the squared relative-twist norm between the
    original spline and the spline rebuilt without control pose `index`
    (knots re-uniformized, twists re-derived).
    """
    if base.n_control <= 4:
        raise CannotPruneError("cannot prune a base with only 4 control points")
    if not 0 <= index < base.n_control:
        raise InvalidArgumentError("control-point index out of range")
    reduced = base.without_control_pose(index)
    err = 0.0
    for t in eval_times:
        a = evaluate(base, float(t))
        b = evaluate(reduced, float(t))
        err += se3_log(pose_compose(pose_inverse(a), b)).norm() ** 2
    return err


def select_prune(base: MotionBase, eval_times):
    """(index, error) of the lowest-error removal; ties toward smaller index."""
    best_idx, best_err = None, np.inf
    for i in range(base.n_control):
        e = prune_error(base, i, eval_times)
        if e < best_err:
            best_idx, best_err = i, e
    return best_idx, best_err


def prune_step(bases, cfg: AdaptiveConfig, eval_times, strategy: str = "argmin"):
    """One pruning pass over all bases; at most one removal per base for the
    'argmin' and 'random' strategies, every below-threshold candidate for
    'all' (ablation hooks). Returns (new bases, PruneReport)."""
    if strategy not in PRUNE_STRATEGIES:
        raise InvalidArgumentError(f"unknown strategy {strategy!r}")
    rng = np.random.default_rng(cfg.rng_seed)
    report = PruneReport()
    out = []
    for bid, base in enumerate(bases):
        if base.n_control <= 4:
            report.skipped.append(bid)
            out.append(base)
            continue
        if strategy == "argmin":
            idx, err = select_prune(base, eval_times)
            if err < cfg.eps_prune:
                base = base.without_control_pose(idx)
                report.removals.append(PruneRecord(bid, idx, err))
        elif strategy == "random":
            errors = [prune_error(base, i, eval_times) for i in range(base.n_control)]
            candidates = [i for i, e in enumerate(errors) if e < cfg.eps_prune]
            if candidates:
                idx = int(rng.choice(candidates))
                base = base.without_control_pose(idx)
                report.removals.append(PruneRecord(bid, idx, errors[idx]))
        else:  # all
            errors = [prune_error(base, i, eval_times) for i in range(base.n_control)]
            candidates = sorted(
                (i for i, e in enumerate(errors) if e < cfg.eps_prune),
                key=lambda i: errors[i],
            )
            budget = base.n_control - 4
            # Remove from highest original index first so indices stay valid.
            chosen = sorted(candidates[:budget], reverse=True)
            for idx in chosen:
                report.removals.append(PruneRecord(bid, idx, errors[idx]))
                base = base.without_control_pose(idx)
        out.append(base)
    return out, report


def error_mask(rendered_residual, eps_error: float) -> MaskFrame:
    """Bit true where a per-pixel residual in [0, 1] strictly exceeds eps_error."""
    res = np.asarray(rendered_residual, dtype=float)
    if res.ndim != 2:
        raise InvalidArgumentError("residual must be a 2D frame")
    if res.min() < 0.0 or res.max() > 1.0:
        raise InvalidArgumentError("residual values must lie in [0, 1]")
    return MaskFrame(res.shape[1], res.shape[0], res > eps_error)


def complex_motion_mask(err: MaskFrame, dyn: MaskFrame) -> MaskFrame:
    if (err.width, err.height) != (dyn.width, dyn.height):
        raise InvalidArgumentError("mask dimensions must match")
    return MaskFrame(err.width, err.height, err.bits & dyn.bits)


def project_base(base: MotionBase, rig: CameraRig, t: float):
    """Pixel of the base position at time t, or None when behind the camera."""
    world = evaluate(base, float(t)).translation
    return rig.project(world, rig.frame_of_time(t))


def in_mask_fraction(base: MotionBase, mask_seq, rig: CameraRig, times) -> float:
    """Fraction of frames whose projection lands in-bounds and in-mask."""
    hits = 0
    for k, t in enumerate(times):
        px = project_base(base, rig, float(t))
        if px is None or not rig.in_bounds(px):
            continue
        if mask_seq[k].at(px[0], px[1]):
            hits += 1
    return hits / len(times)


def densify_step(bases, mask_seq, rig: CameraRig, cfg: AdaptiveConfig):
    """Clone bases tracking complex-motion regions; pre-existing bases are
    returned unchanged, clones appended with a perturbed first control pose."""
    bases = list(bases)
    times = np.linspace(0.0, 1.0, len(mask_seq))
    if len(mask_seq) != rig.n_frames:
        raise InvalidArgumentError("mask sequence length must match rig frames")
    for m in mask_seq:
        if (m.width, m.height) != (rig.width, rig.height):
            raise InvalidArgumentError("mask dimensions must match the rig")
    rng = np.random.default_rng(cfg.rng_seed)
    report = []
    clones = []
    for bid, base in enumerate(bases):
        frac = in_mask_fraction(base, mask_seq, rig, times)
        if frac > cfg.in_mask_fraction:
            draw = np.concatenate([
                rng.normal(0.0, cfg.perturb_rot_sigma, 3),
                rng.normal(0.0, cfg.perturb_trans_sigma, 3),
            ])
            delta = se3_exp(Twist(draw[:3], draw[3:]))
            perturbed = pose_compose(delta, base.control_poses[0])
            clone = base.with_control_pose(0, perturbed)
            report.append(DensifyRecord(bid, len(bases) + len(clones), draw, frac))
            clones.append(clone)
    return bases + clones, report
