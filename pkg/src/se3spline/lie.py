"""SO(3)/SE(3) exponential and logarithm maps, pose algebra, dual quaternions.

Conventions:
  * Quaternions are scalar-first (w, x, y, z), right-handed, and stored with
    a canonical sign: w >= 0, ties broken by x >= 0, then y, then z.
  * Twists are 6-vectors (omega, v) with omega in radians and v in scene
    units, both per unit time.
  * All values are immutable; every function here is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this rotation angle the closed forms are replaced by second-order
# Taylor expansions to avoid catastrophic cancellation.
SMALL_ANGLE = 1e-6

_UNIT_TOL = 1e-9


class InvalidArgumentError(ValueError):
    """An input violates a documented precondition."""


class BranchAmbiguityError(ValueError):
    """SE(3) logarithm requested at a rotation angle too close to pi."""


def _canonical_wxyz(w, x, y, z):
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if n == 0.0 or not math.isfinite(n):
        raise InvalidArgumentError("quaternion has zero or non-finite norm")
    w, x, y, z = w / n, x / n, y / n, z / n
    if w < 0.0 or (w == 0.0 and (x < 0.0 or (x == 0.0 and (y < 0.0 or (y == 0.0 and z < 0.0))))):
        w, x, y, z = -w, -x, -y, -z
    return w, x, y, z


@dataclass(frozen=True)
class Rotation:
    """Unit quaternion, scalar-first, canonical non-negative w."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        w, x, y, z = _canonical_wxyz(float(self.w), float(self.x), float(self.y), float(self.z))
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(1.0, 0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        s = math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
        return 2.0 * math.atan2(s, self.w)

    def apply(self, v) -> np.ndarray:
        """Rotate a 3-vector."""
        vx, vy, vz = float(v[0]), float(v[1]), float(v[2])
        w, x, y, z = self.w, self.x, self.y, self.z
        # t = 2 q_vec x v
        tx = 2.0 * (y * vz - z * vy)
        ty = 2.0 * (z * vx - x * vz)
        tz = 2.0 * (x * vy - y * vx)
        # v' = v + w t + q_vec x t
        return np.array([
            vx + w * tx + (y * tz - z * ty),
            vy + w * ty + (z * tx - x * tz),
            vz + w * tz + (x * ty - y * tx),
        ])

    def compose(self, other: "Rotation") -> "Rotation":
        a, b = self, other
        return Rotation(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )

    def inverse(self) -> "Rotation":
        return Rotation(self.w, -self.x, -self.y, -self.z)

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a = a.copy()
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation followed by translation (p -> R p + t)."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float)
        if t.shape != (3,):
            raise InvalidArgumentError("translation must be a 3-vector")
        # Sum is NaN/inf iff some component is non-finite.
        if not math.isfinite(float(t[0]) + float(t[1]) + float(t[2])):
            raise InvalidArgumentError("translation must be finite")
        object.__setattr__(self, "translation", _freeze(t))

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation.identity(), np.zeros(3))

    def apply(self, p) -> np.ndarray:
        return self.rotation.apply(p) + self.translation

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise InvalidArgumentError("pose matrix must be 4x4")
        return Pose(rotation_from_matrix(m[:3, :3]), m[:3, 3])


@dataclass(frozen=True)
class Twist:
    """Element of se(3): angular part omega and linear part v."""

    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if w.shape != (3,) or v.shape != (3,):
            raise InvalidArgumentError("twist parts must be 3-vectors")
        if not math.isfinite(float(w.sum()) + float(v.sum())):
            raise InvalidArgumentError("twist must be finite")
        object.__setattr__(self, "omega", _freeze(w))
        object.__setattr__(self, "v", _freeze(v))

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    def scaled(self, s: float) -> "Twist":
        return Twist(self.omega * s, self.v * s)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])

    def norm(self) -> float:
        return math.sqrt(float(self.omega @ self.omega) + float(self.v @ self.v))


@dataclass(frozen=True)
class DualQuat:
    """Unit dual quaternion: real part unit, dual part orthogonal to real."""

    real: np.ndarray
    dual: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.real, dtype=float)
        d = np.asarray(self.dual, dtype=float)
        if r.shape != (4,) or d.shape != (4,):
            raise InvalidArgumentError("dual quaternion parts must be 4-vectors")
        n = float(np.linalg.norm(r))
        if abs(n - 1.0) > 1e-6:
            raise InvalidArgumentError(f"real part must be unit norm, got {n}")
        r = r / n
        d = d / n
        d = d - (d @ r) * r  # enforce orthogonality
        object.__setattr__(self, "real", _freeze(r))
        object.__setattr__(self, "dual", _freeze(d))


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def rotation_from_matrix(m) -> Rotation:
    """Quaternion from a 3x3 rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    return Rotation(w, x, y, z)


def so3_exp(omega) -> Rotation:
    """Rotation by angle |omega| about omega/|omega|."""
    w = np.asarray(omega, dtype=float)
    if w.shape != (3,):
        raise InvalidArgumentError("omega must be a 3-vector")
    wx, wy, wz = float(w[0]), float(w[1]), float(w[2])
    theta2 = wx * wx + wy * wy + wz * wz
    if not math.isfinite(theta2):
        raise InvalidArgumentError("omega must be finite")
    theta = math.sqrt(theta2)
    if theta < SMALL_ANGLE:
        c = 1.0 - theta2 / 8.0 + theta2 * theta2 / 384.0
        s = 0.5 - theta2 / 48.0 + theta2 * theta2 / 3840.0
    else:
        c = math.cos(0.5 * theta)
        s = math.sin(0.5 * theta) / theta
    return Rotation(c, s * w[0], s * w[1], s * w[2])


def so3_log(r: Rotation) -> np.ndarray:
    """Canonical axis-angle with norm <= pi.

    At angle pi the axis sign is fixed by the canonical quaternion storage
    (w >= 0, ties toward non-negative leading components), which makes the
    returned vector deterministic; the largest-magnitude component of the
    result is non-negative there.
    """
    s = math.sqrt(r.x * r.x + r.y * r.y + r.z * r.z)
    if s < SMALL_ANGLE:
        # theta/s -> 2/w for small s; second-order correction in (s/w).
        scale = (2.0 / r.w) * (1.0 - (s * s) / (3.0 * r.w * r.w))
    else:
        theta = 2.0 * math.atan2(s, r.w)
        scale = theta / s
    return np.array([r.x * scale, r.y * scale, r.z * scale])


def _double_cross(omega, vec):
    """(omega x vec, omega x (omega x vec)) via scalar math (hot path)."""
    wx, wy, wz = float(omega[0]), float(omega[1]), float(omega[2])
    vx, vy, vz = float(vec[0]), float(vec[1]), float(vec[2])
    c1x = wy * vz - wz * vy
    c1y = wz * vx - wx * vz
    c1z = wx * vy - wy * vx
    c2x = wy * c1z - wz * c1y
    c2y = wz * c1x - wx * c1z
    c2z = wx * c1y - wy * c1x
    return (c1x, c1y, c1z), (c2x, c2y, c2z)


def _v_apply(omega, theta, vec):
    """Left Jacobian V(omega) applied to vec."""
    theta2 = theta * theta
    if theta < SMALL_ANGLE:
        a = 0.5 - theta2 / 24.0
        b = 1.0 / 6.0 - theta2 / 120.0
    else:
        a = (1.0 - math.cos(theta)) / theta2
        b = (theta - math.sin(theta)) / (theta2 * theta)
    c1, c2 = _double_cross(omega, vec)
    return np.array([
        float(vec[0]) + a * c1[0] + b * c2[0],
        float(vec[1]) + a * c1[1] + b * c2[1],
        float(vec[2]) + a * c1[2] + b * c2[2],
    ])


def _v_inv_apply(omega, theta, vec):
    """Inverse left Jacobian applied to vec."""
    theta2 = theta * theta
    if theta < SMALL_ANGLE:
        c = 1.0 / 12.0 + theta2 / 720.0
    else:
        half = 0.5 * theta
        c = (1.0 - half * math.cos(half) / math.sin(half)) / theta2
    c1, c2 = _double_cross(omega, vec)
    return np.array([
        float(vec[0]) - 0.5 * c1[0] + c * c2[0],
        float(vec[1]) - 0.5 * c1[1] + c * c2[1],
        float(vec[2]) - 0.5 * c1[2] + c * c2[2],
    ])


def se3_exp(xi: Twist) -> Pose:
    """Exact SE(3) exponential with Taylor branch for small angles."""
    w = xi.omega
    theta = math.sqrt(float(w[0]) ** 2 + float(w[1]) ** 2 + float(w[2]) ** 2)
    return Pose(so3_exp(xi.omega), _v_apply(xi.omega, theta, xi.v))


def se3_log(p: Pose) -> Twist:
    """Principal-branch SE(3) logarithm; errors near angle pi where V is singular."""
    angle = p.rotation.angle()
    if angle >= math.pi - 1e-9:
        raise BranchAmbiguityError(
            f"rotation angle {angle} too close to pi; resample control poses more densely"
        )
    omega = so3_log(p.rotation)
    v = _v_inv_apply(omega, angle, p.translation)
    return Twist(omega, v)


def pose_compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation.compose(b.rotation), a.rotation.apply(b.translation) + a.translation)


def pose_inverse(a: Pose) -> Pose:
    rinv = a.rotation.inverse()
    return Pose(rinv, -rinv.apply(a.translation))


def pose_log_norm(a: Pose, b: Pose) -> float:
    """Norm of the relative twist between two poses (zero iff equal)."""
    return se3_log(pose_compose(pose_inverse(a), b)).norm()


def pose_to_dualquat(p: Pose) -> DualQuat:
    r = p.rotation.as_array()
    t = np.array([0.0, p.translation[0], p.translation[1], p.translation[2]])
    d = 0.5 * _quat_mul(t, r)
    return DualQuat(r, d)


def dualquat_to_pose(d: DualQuat) -> Pose:
    r = d.real
    rc = np.array([r[0], -r[1], -r[2], -r[3]])
    t = 2.0 * _quat_mul(d.dual, rc)
    return Pose(Rotation(r[0], r[1], r[2], r[3]), t[1:])


def dqb(entries) -> DualQuat:
    """Dual-quaternion blending of (weight, DualQuat) pairs.

    Real parts are sign-aligned with the first entry before summation, so the
    blend is invariant to the quaternion double cover; weights are normalized
    internally, so uniform positive scaling of the weights is a no-op.
    """
    entries = list(entries)
    if not entries:
        raise InvalidArgumentError("dqb requires at least one entry")
    weights = np.array([float(w) for w, _ in entries])
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise InvalidArgumentError("weights must be non-negative and finite")
    total = weights.sum()
    if total <= 0.0:
        raise InvalidArgumentError("weights must not all be zero")
    weights = weights / total
    ref = entries[0][1].real
    real = np.zeros(4)
    dual = np.zeros(4)
    for w, dq in zip(weights, (dq for _, dq in entries)):
        sign = -1.0 if float(dq.real @ ref) < 0.0 else 1.0
        real += w * sign * dq.real
        dual += w * sign * dq.dual
    n = float(np.linalg.norm(real))
    if n < 1e-12:
        raise InvalidArgumentError("blended real part vanished; inputs too antagonistic")
    return DualQuat(real / n, dual / n)
