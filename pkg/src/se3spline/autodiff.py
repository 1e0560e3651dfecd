"""Differentiable (torch, float64) twins of the Lie/spline/deform operations.

These mirror the numpy implementations exactly (same formulas, same Taylor
branches) so loss values agree with the pure-numpy oracles to double
precision, while torch autograd supplies analytic gradients for the
tangent-space optimizer.  Everything here operates on raw tensors:
quaternions (..., 4) scalar-first, translations (..., 3), twists (..., 6)
as (omega, v).
"""

from __future__ import annotations

import numpy as np
import torch

from .spline import MotionBase, twist_coefficients

torch.set_default_dtype(torch.float64)

_SMALL2 = 1e-12  # squared-angle threshold matching lie.SMALL_ANGLE


def quat_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def quat_conj(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    return torch.stack([w, -x, -y, -z], dim=-1)


def quat_rotate(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    w = q[..., :1]
    u, v = torch.broadcast_tensors(q[..., 1:], v)
    t = 2.0 * torch.linalg.cross(u, v, dim=-1)
    return v + w * t + torch.linalg.cross(u, t, dim=-1)


def so3_exp(omega: torch.Tensor) -> torch.Tensor:
    t2 = (omega * omega).sum(-1, keepdim=True)
    small = t2 < _SMALL2
    t2s = t2.clamp(min=_SMALL2)
    theta = torch.sqrt(t2s)
    c = torch.where(small, 1.0 - t2 / 8.0 + t2 * t2 / 384.0, torch.cos(0.5 * theta))
    s = torch.where(small, 0.5 - t2 / 48.0 + t2 * t2 / 3840.0, torch.sin(0.5 * theta) / theta)
    return torch.cat([c, s * omega], dim=-1)


def so3_log(q: torch.Tensor) -> torch.Tensor:
    q = torch.where(q[..., :1] < 0, -q, q)
    w = q[..., :1]
    xyz = q[..., 1:]
    s2 = (xyz * xyz).sum(-1, keepdim=True)
    small = s2 < _SMALL2
    s = torch.sqrt(s2.clamp(min=_SMALL2))
    theta = 2.0 * torch.atan2(s, w)
    scale = torch.where(small, (2.0 / w) * (1.0 - s2 / (3.0 * w * w)), theta / s)
    return scale * xyz


def se3_exp(xi: torch.Tensor):
    """Twist (..., 6) -> (quat (..., 4), translation (..., 3))."""
    omega, v = xi[..., :3], xi[..., 3:]
    q = so3_exp(omega)
    t2 = (omega * omega).sum(-1, keepdim=True)
    small = t2 < _SMALL2
    t2s = t2.clamp(min=_SMALL2)
    theta = torch.sqrt(t2s)
    a = torch.where(small, 0.5 - t2 / 24.0, (1.0 - torch.cos(theta)) / t2s)
    b = torch.where(small, 1.0 / 6.0 - t2 / 120.0, (theta - torch.sin(theta)) / (t2s * theta))
    c1 = torch.linalg.cross(omega, v, dim=-1)
    c2 = torch.linalg.cross(omega, c1, dim=-1)
    return q, v + a * c1 + b * c2


def se3_log(q: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    omega = so3_log(q)
    t2 = (omega * omega).sum(-1, keepdim=True)
    small = t2 < _SMALL2
    t2s = t2.clamp(min=_SMALL2)
    theta = torch.sqrt(t2s)
    half = 0.5 * theta
    coeff = torch.where(
        small,
        1.0 / 12.0 + t2 / 720.0,
        (1.0 - half * torch.cos(half) / torch.sin(half)) / t2s,
    )
    c1 = torch.linalg.cross(omega, t, dim=-1)
    c2 = torch.linalg.cross(omega, c1, dim=-1)
    return torch.cat([omega, t - 0.5 * c1 + coeff * c2], dim=-1)


def pose_compose(qa, ta, qb, tb):
    return quat_mul(qa, qb), quat_rotate(qa, tb) + ta


def pose_inverse(q, t):
    qi = quat_conj(q)
    return qi, -quat_rotate(qi, t)


def pose_apply(q, t, p):
    return quat_rotate(q, p) + t


def relative_log(qa, ta, qb, tb) -> torch.Tensor:
    """Twist of A^-1 B."""
    qi, ti = pose_inverse(qa, ta)
    q, t = pose_compose(qi, ti, qb, tb)
    return se3_log(q, t)


# ---------------------------------------------------------------------------
# spline evaluation


class SplinePlan:
    """Time-independent evaluation plan for one base at fixed times.

    For each query time: the telescoped prefix control-point index, up to
    three active twist indices, and their blending coefficients.  Mirrors
    spline.twist_coefficients exactly.
    """

    def __init__(self, n_control: int, knot_times, times):
        template = _KnotTemplate(n_control, knot_times)
        prefix, idx, coeff = [], [], []
        for t in times:
            c = template.coefficients(float(t))
            active = np.nonzero(c < 1.0)[0]
            j0 = int(active[0]) if active.size else len(c)
            slots = [(i, c[i]) for i in range(j0, len(c)) if c[i] > 0.0][:3]
            while len(slots) < 3:
                slots.append((0, 0.0))
            prefix.append(j0)
            idx.append([s[0] for s in slots])
            coeff.append([s[1] for s in slots])
        self.prefix = torch.tensor(prefix, dtype=torch.long)
        self.idx = torch.tensor(idx, dtype=torch.long)
        self.coeff = torch.tensor(coeff, dtype=torch.float64)


class _KnotTemplate:
    """Lightweight stand-in for MotionBase used to reuse twist_coefficients."""

    def __init__(self, n_control, knot_times):
        self.n_control = n_control
        self.knot_times = np.asarray(knot_times, dtype=float)

    def coefficients(self, t):
        return twist_coefficients(self, t)


def base_twists(q: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Adjacent relative twists of control poses, (Nc-1, 6)."""
    return relative_log(q[:-1], t[:-1], q[1:], t[1:])


def spline_eval(q: torch.Tensor, t: torch.Tensor, plan: SplinePlan):
    """Poses of one base at the plan's times: (M, 4), (M, 3)."""
    xi = base_twists(q, t)                       # (Nc-1, 6)
    scaled = plan.coeff.unsqueeze(-1) * xi[plan.idx]   # (M, 3, 6)
    eq, et = se3_exp(scaled)                     # (M, 3, 4/3)
    oq, ot = q[plan.prefix], t[plan.prefix]
    for s in range(3):
        oq, ot = pose_compose(oq, ot, eq[:, s], et[:, s])
    return oq, ot


def spline_eval_batch(q: torch.Tensor, t: torch.Tensor, plan: SplinePlan):
    """Poses of a stack of bases sharing one plan: (B, M, 4), (B, M, 3)."""
    xi = relative_log(q[:, :-1], t[:, :-1], q[:, 1:], t[:, 1:])   # (B, Nc-1, 6)
    scaled = plan.coeff.unsqueeze(-1) * xi[:, plan.idx]           # (B, M, 3, 6)
    eq, et = se3_exp(scaled)
    oq, ot = q[:, plan.prefix], t[:, plan.prefix]
    for s in range(3):
        oq, ot = pose_compose(oq, ot, eq[:, :, s], et[:, :, s])
    return oq, ot


def plan_for_times(base: MotionBase, times) -> SplinePlan:
    return SplinePlan(base.n_control, base.knot_times, times)


# ---------------------------------------------------------------------------
# dual-quaternion blending


def pose_to_dq(q: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """(..., 8) dual quaternion from pose."""
    zeros = torch.zeros_like(t[..., :1])
    tq = torch.cat([zeros, t], dim=-1)
    return torch.cat([q, 0.5 * quat_mul(tq, q)], dim=-1)


def dq_to_pose(dq: torch.Tensor):
    real, dual = dq[..., :4], dq[..., 4:]
    t = 2.0 * quat_mul(dual, quat_conj(real))
    return real, t[..., 1:]


def dqb(weights: torch.Tensor, dqs: torch.Tensor) -> torch.Tensor:
    """Blend (..., K) weights with (..., K, 8) dual quaternions.

    Signs are aligned with the first entry (mask detached), the weighted sum
    is normalized by the real-part norm, and the dual part is re-orthogonalized.
    """
    w = weights / weights.sum(-1, keepdim=True)
    ref = dqs[..., :1, :4]
    dots = (dqs[..., :4] * ref).sum(-1, keepdim=True)
    sign = torch.where(dots < 0, -1.0, 1.0).detach()
    blended = (w.unsqueeze(-1) * sign * dqs).sum(-2)
    real, dual = blended[..., :4], blended[..., 4:]
    n = torch.linalg.vector_norm(real, dim=-1, keepdim=True)
    real = real / n
    dual = dual / n
    dual = dual - (dual * real).sum(-1, keepdim=True) * real
    return torch.cat([real, dual], dim=-1)
