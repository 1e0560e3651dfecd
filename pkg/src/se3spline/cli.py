"""Command-line surface: synth, fit, prune, densify, deform, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error (missing/malformed files,
invalid arguments), 3 numerical failure (divergence, gradient mismatch).
The SE3SPLINE_THREADS environment variable caps worker parallelism
(0 or unset = all cores).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import io
from .adaptive import AdaptiveConfig, prune_step, densify_step
from .deform import DeformConfig, deform_set
from .lie import BranchAmbiguityError, InvalidArgumentError
from .optimize import (
    FitConfig,
    FitDivergedError,
    FitState,
    LossSamples,
    NonFiniteLossError,
    fit,
    gradient,
)
from .scene import MOTION_FAMILIES, SynthConfig, evaluate_metrics, generate_synthetic
from .spline import frame_times, init_base

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the CLI contract reserves 2
    # for data errors, so route usage problems through exit code 1 instead.
    def error(self, message):
        raise _UsageError(message)


def _apply_threads():
    import torch

    val = os.environ.get("SE3SPLINE_THREADS", "0")
    try:
        n = int(val)
    except ValueError:
        raise InvalidArgumentError(f"SE3SPLINE_THREADS must be an integer, got {val!r}")
    if n > 0:
        torch.set_num_threads(n)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise io.FormatError(f"{path}: invalid JSON at offset {e.pos}: {e.msg}")
    if not isinstance(doc, dict):
        raise io.FormatError(f"{path}: config must be a JSON object")
    return doc


def _section(cfg_doc: dict, name: str, base):
    fields = cfg_doc.get(name, {})
    try:
        return replace(base, **fields)
    except TypeError as e:
        raise io.FormatError(f"config section {name!r}: {e}")


def _say(args, msg: str):
    if not args.quiet:
        print(msg)


def _outpath(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg_doc):
    cfg = _section(cfg_doc, "synth", SynthConfig(
        family=args.family, n_tracklets=args.tracklets, n_frames=args.frames,
        noise_sigma=args.noise, dropout=args.dropout, perturb_px=args.perturb_px,
        rng_seed=args.seed))
    scene = generate_synthetic(cfg)
    path = _outpath(args, "scene.json")
    io.save_scene(scene, path)
    _say(args, f"wrote {path} ({cfg.n_tracklets} tracklets, {cfg.n_frames} frames)")
    return EXIT_OK


def cmd_fit(args, cfg_doc):
    scene = io.load_scene(args.scene)
    adaptive = _section(cfg_doc, "adaptive", AdaptiveConfig(rng_seed=args.seed))
    fcfg = _section(cfg_doc, "fit", FitConfig(
        iterations=args.iterations, n_control=args.n_control,
        optimize_cameras=not args.no_cameras, enable_prune=not args.no_prune,
        enable_densify=not args.no_densify, adaptive=adaptive, rng_seed=args.seed))
    result = fit(scene, fcfg)
    io.save_bases(result.bases, _outpath(args, "bases.json"))
    io.save_loss_trace(result.trace, _outpath(args, "loss_trace.csv"))
    fitted = replace(scene, camera=result.rig, bases=result.bases)
    io.save_scene(fitted, _outpath(args, "fitted_scene.json"))
    if scene.ground_truth is not None:
        m = evaluate_metrics(result.bases, result.base_tracklet, fitted, rng_seed=args.seed)
        io.save_metrics(m, _outpath(args, "metrics.csv"))
        _say(args, f"rmse={m.rmse:.6g} pck_t={m.pck_t:.4f}")
    _say(args, f"fit done: {len(result.bases)} bases, final loss {result.trace[-1][1]:.6g}")
    return EXIT_OK


def cmd_prune(args, cfg_doc):
    bases = io.load_bases(args.bases)
    scene = io.load_scene(args.scene)
    cfg = _section(cfg_doc, "adaptive", AdaptiveConfig(rng_seed=args.seed))
    new_bases, report = prune_step(bases, cfg, frame_times(scene.n_frames), args.strategy)
    io.save_bases(new_bases, _outpath(args, "pruned_bases.json"))
    for r in report.removals:
        _say(args, f"base {r.base_id}: removed control point {r.removed_index} "
                   f"(error {r.error:.3g})")
    _say(args, f"{len(report.removals)} removals, {len(report.skipped)} bases at minimum size")
    return EXIT_OK


def cmd_densify(args, cfg_doc):
    bases = io.load_bases(args.bases)
    scene = io.load_scene(args.scene)
    if not scene.mask_seq:
        raise InvalidArgumentError("scene has no mask_files; densify needs per-frame masks")
    cfg = _section(cfg_doc, "adaptive", AdaptiveConfig(rng_seed=args.seed))
    new_bases, records = densify_step(bases, scene.mask_seq, scene.camera, cfg)
    io.save_bases(new_bases, _outpath(args, "densified_bases.json"))
    for r in records:
        _say(args, f"base {r.source_id} cloned -> {r.clone_id} "
                   f"(in-mask fraction {r.in_mask_fraction:.2f})")
    _say(args, f"{len(records)} clones added")
    return EXIT_OK


def cmd_deform(args, cfg_doc):
    bases = io.load_bases(args.bases)
    points = io.load_points(args.points)
    cfg = _section(cfg_doc, "deform", DeformConfig(k=min(args.k, len(bases))))
    moved = deform_set(points, bases, args.t_obs, cfg)
    path = _outpath(args, "deformed_points.json")
    io.save_points(moved, path)
    _say(args, f"wrote {path} ({len(moved)} points at t={args.t_obs})")
    return EXIT_OK


def cmd_eval(args, cfg_doc):
    bases = io.load_bases(args.bases)
    scene = io.load_scene(args.scene)
    if len(bases) < len(scene.tracklets3d):
        raise InvalidArgumentError(
            f"{len(bases)} bases cannot cover {len(scene.tracklets3d)} tracklets")
    base_tracklet = [min(i, len(scene.tracklets3d) - 1) for i in range(len(bases))]
    m = evaluate_metrics(bases, base_tracklet, scene, rng_seed=args.seed)
    io.save_metrics(m, _outpath(args, "metrics.csv"))
    _say(args, f"rmse={m.rmse:.6g} pck_t={m.pck_t:.4f} "
               f"bases={m.n_bases} control={m.n_control_total}")
    return EXIT_OK


def cmd_gradcheck(args, cfg_doc):
    from .scene import SynthConfig, generate_synthetic

    tol = args.tolerance
    worst = 0.0
    rng = np.random.default_rng(args.seed)
    for trial in range(args.states):
        scfg = SynthConfig(family="random-smooth", n_tracklets=3, n_frames=8,
                           noise_sigma=0.01, rng_seed=int(rng.integers(1 << 31)))
        scene = generate_synthetic(scfg)
        bases = [init_base(tr, 5) for tr in scene.tracklets3d]
        state = FitState(bases, scene.camera, scene.tracklets3d,
                         list(range(3)), tracks2d=scene.tracklets2d, deform_k=3, arap_knn=2)
        fcfg = FitConfig(iterations=1)
        pair = rng.choice(scene.n_frames, size=2, replace=False)
        samples = LossSamples(int(pair[0]), int(pair[1]),
                              (int(rng.integers(0, scene.n_frames)),))
        ga = gradient(state, fcfg, samples, "autograd")
        gf = gradient(state, fcfg, samples, "fd")
        rel = float(np.linalg.norm(ga - gf) / max(np.linalg.norm(ga), np.linalg.norm(gf), 1e-12))
        worst = max(worst, rel)
        _say(args, f"state {trial}: rel error {rel:.3e}")
    _say(args, f"worst relative error {worst:.3e} (tolerance {tol:g})")
    if not np.isfinite(worst):
        raise NonFiniteLossError("gradcheck", worst)
    if worst >= tol:
        raise FitDivergedError(f"gradient mismatch {worst:.3e} >= {tol:g}", {"worst": worst})
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="se3spline", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None, help="JSON config overrides")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    s.add_argument("--family", choices=MOTION_FAMILIES, default="random-smooth")
    s.add_argument("--tracklets", type=int, default=6)
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--dropout", type=float, default=0.0)
    s.add_argument("--perturb-px", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit", parents=[common], help="fit motion bases to a scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--iterations", type=int, default=2000)
    s.add_argument("--n-control", type=int, default=None)
    s.add_argument("--no-cameras", action="store_true")
    s.add_argument("--no-prune", action="store_true")
    s.add_argument("--no-densify", action="store_true")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("prune", parents=[common], help="prune control points")
    s.add_argument("--bases", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--strategy", choices=("argmin", "random", "all"), default="argmin")
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("densify", parents=[common], help="clone bases in masked regions")
    s.add_argument("--bases", required=True)
    s.add_argument("--scene", required=True)
    s.set_defaults(func=cmd_densify)

    s = sub.add_parser("deform", parents=[common], help="warp a point set to a timestamp")
    s.add_argument("--bases", required=True)
    s.add_argument("--points", required=True)
    s.add_argument("--t-obs", type=float, required=True)
    s.add_argument("--k", type=int, default=8)
    s.set_defaults(func=cmd_deform)

    s = sub.add_parser("eval", parents=[common], help="trajectory and transfer metrics")
    s.add_argument("--bases", required=True)
    s.add_argument("--scene", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common],
                       help="compare autograd against central differences")
    s.add_argument("--states", type=int, default=20)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_threads()
        cfg_doc = _load_config(args.config)
        return args.func(args, cfg_doc)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (io.FormatError, InvalidArgumentError, FileNotFoundError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FitDivergedError, NonFiniteLossError, BranchAmbiguityError,
            ArithmeticError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
