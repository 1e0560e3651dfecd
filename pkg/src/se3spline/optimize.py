"""Joint first-order optimization of motion bases and camera extrinsics.

Control poses and camera poses are optimized in their tangent spaces: each
carries a delta twist, the losses are evaluated at exp(delta) * pose, and
after every Adam step the deltas are retracted into the poses by
left-multiplication and reset to zero.  Loss terms:

  * fit3d  - anchors each base's translation to its initializing 3D tracklet
  * track  - deforms points between a sampled frame pair and penalizes the
             reprojected pixel error against the observed 2D tracks
  * arap   - as-rigid-as-possible: preserves pairwise base distances and
             local coordinates over sampled time offsets
  * smo    - squared relative-twist norm between consecutive camera poses
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import autodiff as ad
from .adaptive import AdaptiveConfig, densify_step, prune_step
from .cameras import CameraRig, MIN_DEPTH
from .lie import InvalidArgumentError, Pose, Rotation
from .spline import MotionBase, fill_invisible, frame_times, init_base


class NonFiniteLossError(ArithmeticError):
    """A loss term evaluated to a non-finite value."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is non-finite ({value})")
        self.term = term


class FitDivergedError(ArithmeticError):
    """Optimization diverged; carries a diagnostic state dump."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 8000
    lr_bases: float = 1.6e-4
    lr_cameras: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_track: float = 1.0
    lambda_arap: float = 1.0
    lambda_smo: float = 0.01
    lambda_fit3d: float = 1.0
    arap_deltas: tuple = (1, 4, 16)
    arap_knn: int = 8
    deform_k: int = 8
    n_control: int | None = None   # None: min(100, N_T)
    optimize_cameras: bool = True
    enable_prune: bool = True
    enable_densify: bool = True
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    rng_seed: int = 0
    divergence_limit: float = 1e12

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidArgumentError("iterations must be >= 1")
        if self.lr_bases < 0 or self.lr_cameras < 0:
            raise InvalidArgumentError("learning rates must be non-negative")


@dataclass
class LossSamples:
    """Per-evaluation stochastic choices, passed explicitly for determinism."""

    track_query: int
    track_target: int
    arap_times: tuple


def _pose_to_qt(p: Pose):
    r = p.rotation
    return [r.w, r.x, r.y, r.z], list(p.translation)


def _qt_to_pose(q, t) -> Pose:
    q = np.asarray(q, dtype=float)
    return Pose(Rotation(q[0], q[1], q[2], q[3]), np.asarray(t, dtype=float))


class FitState:
    """Torch-side snapshot of bases, cameras, and observations."""

    def __init__(self, bases, rig: CameraRig, tracklets, base_tracklet, tracks2d=None,
                 deform_k: int = 8, arap_knn: int = 8):
        self.times = frame_times(rig.n_frames)
        self.rig_intr = (rig.fx, rig.fy, rig.cx, rig.cy, rig.width, rig.height)
        self.base_tracklet = list(base_tracklet)
        self.deform_k = deform_k
        self.arap_knn = arap_knn
        self.track_warning = False

        filled = [fill_invisible(tr) for tr in tracklets]
        self.track_pos = torch.tensor(np.array([tr.positions for tr in filled]))
        self.track_vis = np.array([tr.visibility for tr in tracklets])
        if tracks2d is not None:
            self.t2d_px = torch.tensor(np.array([tr.pixels for tr in tracks2d]))
            self.t2d_vis = np.array([tr.visibility for tr in tracks2d])
        else:
            self.t2d_px = None
            self.t2d_vis = None

        self._load_bases(bases)
        self._load_cameras(rig)

    # -- construction -------------------------------------------------------

    def _load_bases(self, bases):
        self.bases_q, self.bases_t, self.dbase, self.knots, self.plans = [], [], [], [], []
        for b in bases:
            q = torch.tensor(np.array([p.rotation.as_array() for p in b.control_poses]))
            t = torch.tensor(np.array([p.translation for p in b.control_poses]))
            self.bases_q.append(q)
            self.bases_t.append(t)
            self.dbase.append(torch.zeros(b.n_control, 6, requires_grad=True))
            self.knots.append(np.array(b.knot_times))
            self.plans.append(ad.SplinePlan(b.n_control, b.knot_times, self.times))
        # one shared plan lets eval_bases run batched over the base axis
        self.shared_plan = None
        if bases and all(
            b.n_control == bases[0].n_control
            and np.array_equal(b.knot_times, bases[0].knot_times)
            for b in bases
        ):
            self.shared_plan = self.plans[0]
        self._refresh_arap_neighbors()

    def _load_cameras(self, rig: CameraRig):
        self.cam_q = torch.tensor(np.array([p.rotation.as_array() for p in rig.extrinsics]))
        self.cam_t = torch.tensor(np.array([p.translation for p in rig.extrinsics]))
        self.dcam = torch.zeros(rig.n_frames, 6, requires_grad=True)

    def _refresh_arap_neighbors(self):
        nb = len(self.bases_q)
        pos = self.base_positions_at_start()
        k = min(self.arap_knn, nb - 1)
        self.arap_neighbors = []
        for m in range(nb):
            d = np.linalg.norm(pos - pos[m], axis=1)
            order = sorted((i for i in range(nb) if i != m), key=lambda i: (d[i], i))
            self.arap_neighbors.append(order[:k])

    def base_positions_at_start(self) -> np.ndarray:
        with torch.no_grad():
            return np.array([
                ad.spline_eval(q, t, p)[1][0].numpy()
                for q, t, p in zip(self.bases_q, self.bases_t, self.plans)
            ])

    # -- parameter access ----------------------------------------------------

    @property
    def n_bases(self) -> int:
        return len(self.bases_q)

    @property
    def n_frames(self) -> int:
        return len(self.times)

    def deltas(self):
        return self.dbase + [self.dcam]

    def n_params(self) -> int:
        return sum(d.numel() for d in self.deltas())

    def effective_base(self, i: int):
        dq, dt = ad.se3_exp(self.dbase[i])
        return ad.pose_compose(dq, dt, self.bases_q[i], self.bases_t[i])

    def effective_cameras(self):
        dq, dt = ad.se3_exp(self.dcam)
        return ad.pose_compose(dq, dt, self.cam_q, self.cam_t)

    def eval_bases(self):
        """Spline poses of every base at every frame time: list of (q (F,4), t (F,3))."""
        if self.shared_plan is not None and self.n_bases > 1:
            dq, dt = ad.se3_exp(torch.stack(self.dbase))
            q, t = ad.pose_compose(dq, dt,
                                   torch.stack(self.bases_q),
                                   torch.stack(self.bases_t))
            oq, ot = ad.spline_eval_batch(q, t, self.shared_plan)
            return [(oq[i], ot[i]) for i in range(self.n_bases)]
        out = []
        for i in range(self.n_bases):
            q, t = self.effective_base(i)
            out.append(ad.spline_eval(q, t, self.plans[i]))
        return out

    def zero_grad(self):
        for d in self.deltas():
            if d.grad is not None:
                d.grad.zero_()

    # -- retraction and export ------------------------------------------------

    def retract(self, base_steps, cam_step):
        """Left-multiply exp(step) into the stored poses; deltas stay zero."""
        with torch.no_grad():
            for i, step in enumerate(base_steps):
                dq, dt = ad.se3_exp(step)
                self.bases_q[i], self.bases_t[i] = ad.pose_compose(
                    dq, dt, self.bases_q[i], self.bases_t[i])
                n = torch.linalg.vector_norm(self.bases_q[i], dim=-1, keepdim=True)
                self.bases_q[i] = self.bases_q[i] / n
            dq, dt = ad.se3_exp(cam_step)
            self.cam_q, self.cam_t = ad.pose_compose(dq, dt, self.cam_q, self.cam_t)
            self.cam_q = self.cam_q / torch.linalg.vector_norm(self.cam_q, dim=-1, keepdim=True)

    def export_bases(self) -> list:
        out = []
        for q, t, knots in zip(self.bases_q, self.bases_t, self.knots):
            poses = tuple(
                _qt_to_pose(q[i].numpy(), t[i].numpy()) for i in range(q.shape[0])
            )
            out.append(MotionBase(poses, knots, None))
        return out

    def export_rig(self, rig_like: CameraRig) -> CameraRig:
        poses = tuple(
            _qt_to_pose(self.cam_q[i].numpy(), self.cam_t[i].numpy())
            for i in range(self.cam_q.shape[0])
        )
        return rig_like.with_extrinsics(poses)


# ---------------------------------------------------------------------------
# loss terms


def fit3d_loss(state: FitState, base_poses=None) -> torch.Tensor:
    """Mean squared distance between base translations and their tracklets
    over visible frames."""
    if base_poses is None:
        base_poses = state.eval_bases()
    total = None
    count = 0
    for b, (bq, bt) in enumerate(base_poses):
        tr = state.base_tracklet[b]
        vis = state.track_vis[tr]
        if not vis.any():
            continue
        idx = torch.from_numpy(np.nonzero(vis)[0])
        diff = bt[idx] - state.track_pos[tr][idx]
        term = (diff * diff).sum()
        total = term if total is None else total + term
        count += int(vis.sum())
    if total is None:
        return torch.zeros((), dtype=torch.float64)
    return total / count


def camera_smooth_loss(state: FitState, cams=None) -> torch.Tensor:
    """Sum of squared relative-twist norms between consecutive camera poses."""
    if cams is None:
        cams = state.effective_cameras()
    cq, ct = cams
    xi = ad.relative_log(cq[:-1], ct[:-1], cq[1:], ct[1:])
    return (xi * xi).sum()


def arap_loss(state: FitState, t_indices, deltas=(1, 4, 16), base_poses=None) -> torch.Tensor:
    """Multi-scale as-rigid-as-possible loss over base neighborhoods.

    For each frame offset in `deltas`, the mean over (base, neighbor, time)
    tuples of a distance-preservation term plus a local-coordinate term; the
    offsets are summed.  Offsets are clipped to the last frame; tuples whose
    clipped pair collapses to one frame are skipped.
    """
    if state.n_bases < 2:
        return torch.zeros(())
    if base_poses is None:
        base_poses = state.eval_bases()
    allq = torch.stack([q for q, _ in base_poses])   # (B, F, 4)
    allt = torch.stack([t for _, t in base_poses])   # (B, F, 3)
    nbr = torch.tensor(np.asarray(state.arap_neighbors), dtype=torch.long)  # (B, K)
    F = state.n_frames
    total = torch.zeros(())
    for delta in deltas:
        pairs = [(t0, min(t0 + delta, F - 1)) for t0 in t_indices]
        pairs = [(a, b) for a, b in pairs if a != b]
        if not pairs:
            continue
        terms = []
        for t0, t1 in pairs:
            dm0 = allt[:, t0].unsqueeze(1) - allt[nbr, t0]        # (B, K, 3)
            dm1 = allt[:, t1].unsqueeze(1) - allt[nbr, t1]
            d0 = _safe_norm(dm0)
            d1 = _safe_norm(dm1)
            local0 = ad.quat_rotate(ad.quat_conj(allq[nbr, t0]), dm0)
            local1 = ad.quat_rotate(ad.quat_conj(allq[nbr, t1]), dm1)
            terms.append(torch.abs(d0 - d1) + _safe_norm(local0 - local1))
        total = total + torch.stack(terms).mean()
    return total


def _safe_norm(v: torch.Tensor) -> torch.Tensor:
    # clamp keeps the gradient finite at exactly-rigid configurations
    return torch.sqrt((v * v).sum(-1).clamp(min=1e-30))


def track_loss(state: FitState, query: int, target: int, base_poses=None, cams=None):
    """Deform each tracklet point from `query` to `target` and penalize the
    squared reprojected pixel error against the observed 2D track.

    Returns (loss, diagnostics); diagnostics counts behind-camera skips.
    """
    diag = {"behind_camera": 0, "points": 0}
    if state.t2d_px is None:
        return torch.zeros(()), diag
    if base_poses is None:
        base_poses = state.eval_bases()
    if cams is None:
        cams = state.effective_cameras()
    cq, ct = cams[0][target], cams[1][target]
    fx, fy, cx, cy = state.rig_intr[:4]

    # world-frame relative transform of every base, query -> target
    rel_dq = []
    pos_q = []
    for bq, bt in base_poses:
        iq, it = ad.pose_inverse(bq[query], bt[query])
        rq, rt = ad.pose_compose(bq[target], bt[target], iq, it)
        rel_dq.append(ad.pose_to_dq(rq, rt))
        pos_q.append(bt[query])
    rel_dq = torch.stack(rel_dq)          # (B, 8)
    pos_q = torch.stack(pos_q)            # (B, 3)

    k = min(state.deform_k, state.n_bases)
    valid = np.nonzero(state.track_vis[:, query] & state.t2d_vis[:, target])[0]
    if valid.size == 0:
        state.track_warning = True
        return torch.zeros(()), diag
    mu = state.track_pos[valid, query]                           # (V, 3)
    d_all = torch.linalg.vector_norm(
        mu.unsqueeze(1) - pos_q.unsqueeze(0), dim=-1)            # (V, B)
    # k nearest by (distance, id); stable argsort breaks ties by index
    nn = np.argsort(d_all.detach().numpy(), axis=1, kind="stable")[:, :k]
    d = torch.gather(d_all, 1, torch.tensor(nn))                 # (V, k)
    sigma = torch.clamp(d[:, -1:], min=1e-9)
    w = torch.exp(-(d * d) / (2.0 * sigma * sigma))
    blended = ad.dqb(w, rel_dq[torch.tensor(nn)])                # (V, 8)
    dq_q, dq_t = ad.dq_to_pose(blended)
    mu2 = ad.pose_apply(dq_q, dq_t, mu)
    pc = ad.pose_apply(cq, ct, mu2)                              # (V, 3)
    front = pc[:, 2].detach().numpy() > MIN_DEPTH
    diag["behind_camera"] = int((~front).sum())
    diag["points"] = int(front.sum())
    if diag["points"] == 0:
        state.track_warning = True
        return torch.zeros(()), diag
    keep = torch.tensor(np.nonzero(front)[0])
    pc = pc[keep]
    px = torch.stack([fx * pc[:, 0] / pc[:, 2] + cx,
                      fy * pc[:, 1] / pc[:, 2] + cy], dim=-1)
    r = px - state.t2d_px[torch.tensor(valid)[keep], target]
    return (r * r).sum(-1).mean(), diag


def ad_knn_order(distances: np.ndarray, anchor: int) -> list:
    """Neighbor ids ascending (distance to anchor position ~ distance array), ties by id."""
    return sorted(range(len(distances)), key=lambda i: (distances[i], i))


def total_loss(state: FitState, cfg: FitConfig, samples: LossSamples):
    """Weighted sum of all loss terms; returns (tensor, parts dict)."""
    base_poses = state.eval_bases()
    cams = state.effective_cameras()
    parts = {}
    zero = torch.zeros(())
    f3 = fit3d_loss(state, base_poses) if cfg.lambda_fit3d != 0 else zero
    tr, diag = (track_loss(state, samples.track_query, samples.track_target, base_poses, cams)
                if cfg.lambda_track != 0 else (zero, {}))
    ar = (arap_loss(state, samples.arap_times, cfg.arap_deltas, base_poses)
          if cfg.lambda_arap != 0 else zero)
    sm = camera_smooth_loss(state, cams) if cfg.lambda_smo != 0 else zero
    parts = {
        "fit3d": float(f3.detach()),
        "track": float(tr.detach()),
        "arap": float(ar.detach()),
        "smo": float(sm.detach()),
        "track_diag": diag,
    }
    for name in ("fit3d", "track", "arap", "smo"):
        if not math.isfinite(parts[name]):
            raise NonFiniteLossError(name, parts[name])
    total = (cfg.lambda_fit3d * f3 + cfg.lambda_track * tr
             + cfg.lambda_arap * ar + cfg.lambda_smo * sm)
    parts["total"] = float(total.detach())
    return total, parts


# ---------------------------------------------------------------------------
# gradients


def gradient(state: FitState, cfg: FitConfig, samples: LossSamples,
             method: str = "autograd", fd_step: float = 1e-5) -> np.ndarray:
    """Flat gradient of total_loss over all delta twists (bases, then cameras).

    method 'autograd' uses reverse-mode differentiation; 'fd' is the
    independent central-difference oracle over the same loss.
    """
    if method == "autograd":
        state.zero_grad()
        loss, _ = total_loss(state, cfg, samples)
        loss.backward()
        grads = []
        for d in state.deltas():
            grads.append((d.grad if d.grad is not None else torch.zeros_like(d)).reshape(-1).numpy().copy())
        return np.concatenate(grads)
    if method != "fd":
        raise InvalidArgumentError(f"unknown gradient method {method!r}")
    grads = []
    with torch.no_grad():
        for d in state.deltas():
            flat = d.reshape(-1)
            g = np.zeros(flat.numel())
            for j in range(flat.numel()):
                orig = float(flat[j])
                h = fd_step * max(1.0, abs(orig))
                flat[j] = orig + h
                lp, _ = total_loss(state, cfg, samples)
                flat[j] = orig - h
                lm, _ = total_loss(state, cfg, samples)
                flat[j] = orig
                g[j] = (float(lp) - float(lm)) / (2.0 * h)
            grads.append(g)
    return np.concatenate(grads)


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitResult:
    bases: list
    rig: CameraRig
    trace: list            # rows (iteration, total, fit3d, track, arap, smo)
    base_tracklet: list
    diagnostics: dict


class _Adam:
    def __init__(self, shape, beta1, beta2, eps):
        self.m = torch.zeros(shape)
        self.v = torch.zeros(shape)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, grad: torch.Tensor, lr: float) -> torch.Tensor:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return -lr * mhat / (torch.sqrt(vhat) + self.eps)


def fit(scene, cfg: FitConfig) -> FitResult:
    """Fit motion bases (and optionally cameras) to a scene's tracklets."""
    torch.set_default_dtype(torch.float64)
    rng = np.random.default_rng(cfg.rng_seed)
    n_frames = scene.n_frames
    times = frame_times(n_frames)

    if scene.bases:
        bases = list(scene.bases)
        base_tracklet = list(range(len(bases))) if len(bases) == len(scene.tracklets3d) \
            else [min(i, len(scene.tracklets3d) - 1) for i in range(len(bases))]
    else:
        n_c = cfg.n_control if cfg.n_control is not None else min(100, n_frames)
        bases = [init_base(tr, n_c) for tr in scene.tracklets3d]
        base_tracklet = list(range(len(bases)))

    state = FitState(bases, scene.camera, scene.tracklets3d, base_tracklet,
                     tracks2d=scene.tracklets2d, deform_k=cfg.deform_k,
                     arap_knn=cfg.arap_knn)

    adams = [_Adam(d.shape, cfg.beta1, cfg.beta2, cfg.adam_eps) for d in state.dbase]
    adam_cam = _Adam(state.dcam.shape, cfg.beta1, cfg.beta2, cfg.adam_eps)
    trace = []
    diagnostics = {"behind_camera": 0, "pruned": 0, "densified": 0}

    for it in range(1, cfg.iterations + 1):
        pair = rng.choice(n_frames, size=2, replace=False)
        samples = LossSamples(int(pair[0]), int(pair[1]),
                              (int(rng.integers(0, n_frames)),))
        state.zero_grad()
        try:
            loss, parts = total_loss(state, cfg, samples)
        except NonFiniteLossError as e:
            raise FitDivergedError(str(e), {"iteration": it, "term": e.term}) from e
        if not math.isfinite(parts["total"]) or parts["total"] > cfg.divergence_limit:
            raise FitDivergedError(
                f"loss diverged at iteration {it}",
                {"iteration": it, "parts": parts},
            )
        loss.backward()
        trace.append((it, parts["total"], parts["fit3d"], parts["track"],
                      parts["arap"], parts["smo"]))
        diagnostics["behind_camera"] += parts.get("track_diag", {}).get("behind_camera", 0)

        with torch.no_grad():
            base_steps = []
            for i, d in enumerate(state.dbase):
                g = d.grad if d.grad is not None else torch.zeros_like(d)
                base_steps.append(adams[i].step(g, cfg.lr_bases))
            gcam = state.dcam.grad if state.dcam.grad is not None else torch.zeros_like(state.dcam)
            cam_step = adam_cam.step(gcam, cfg.lr_cameras if cfg.optimize_cameras else 0.0)
        state.retract(base_steps, cam_step)

        structural = False
        # adaptive hooks skip the final iteration: a structural edit perturbs
        # the trajectory and needs further optimization to be absorbed
        adapt_ok = it < cfg.iterations
        if (adapt_ok and cfg.enable_prune and cfg.adaptive.n_prune > 0
                and it % cfg.adaptive.n_prune == 0):
            np_bases = state.export_bases()
            np_bases, report = prune_step(np_bases, cfg.adaptive, times)
            if report.removals:
                diagnostics["pruned"] += len(report.removals)
                structural = True
                bases = np_bases
        if (adapt_ok and cfg.enable_densify and scene.mask_seq is not None
                and cfg.adaptive.n_densify > 0 and it % cfg.adaptive.n_densify == 0):
            np_bases = bases if structural else state.export_bases()
            rig_now = state.export_rig(scene.camera)
            np_bases, records = densify_step(np_bases, scene.mask_seq, rig_now, cfg.adaptive)
            if records:
                diagnostics["densified"] += len(records)
                for rec in records:
                    base_tracklet.append(base_tracklet[rec.source_id])
                structural = True
                bases = np_bases
        if structural:
            state.base_tracklet = base_tracklet
            state._load_bases(bases)
            adams = [_Adam(d.shape, cfg.beta1, cfg.beta2, cfg.adam_eps) for d in state.dbase]
            adam_cam = _Adam(state.dcam.shape, cfg.beta1, cfg.beta2, cfg.adam_eps)

    diagnostics["track_warning"] = state.track_warning
    return FitResult(state.export_bases(), state.export_rig(scene.camera),
                     trace, base_tracklet, diagnostics)
