"""Poses, pose losses, rotation representations and evaluation metrics.

Quaternions are ordered (w, x, y, z) everywhere.  Differentiable functions
take :class:`Tensor` arguments whose last axis is the vector axis and return
one value per leading index; numpy helpers (``*_np``) are used for metrics,
rendering and data handling.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .nn import Module, param
from .tensor import ShapeError, Tensor


class DegenerateRotationError(ValueError):
    pass


class RotationRepr(str, enum.Enum):
    QUATERNION = "quaternion"
    FOUR_D_NORM = "4dnorm"
    SIX_D = "6d"

    @property
    def width(self) -> int:
        return 6 if self is RotationRepr.SIX_D else 4

    @classmethod
    def parse(cls, value) -> "RotationRepr":
        if isinstance(value, cls):
            return value
        aliases = {"quat": "quaternion", "fourdnorm": "4dnorm", "4d-norm": "4dnorm", "sixd": "6d"}
        key = str(value).strip().lower()
        return cls(aliases.get(key, key))


@dataclass
class Pose:
    x: np.ndarray  # (3,) position
    q: np.ndarray  # (4,) quaternion (w, x, y, z)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(3)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4)


class LossParams(Module):
    """Learned log-variance weights of the aggregated pose loss."""

    def __init__(self, s_x: float = 0.0, s_q: float = 0.0):
        self.s_x = param(np.array([s_x]))
        self.s_q = param(np.array([s_q]))


# ---------------------------------------------------------------------------
# Losses


def position_loss(x_est: Tensor, x_gt) -> Tensor:
    """Euclidean distance ||x_gt - x_est||."""
    x_gt = T._as_tensor(x_gt, x_est)
    if x_est.shape[-1] != 3 or x_gt.shape[-1] != 3:
        raise ShapeError("position_loss", x_est.shape, x_gt.shape)
    return T.norm2(x_gt - x_est, axis=-1)


def _check_nonzero(q: np.ndarray, what: str) -> None:
    n = np.sqrt((np.asarray(q, dtype=np.float64) ** 2).sum(axis=-1))
    if np.any(n <= 1e-12):
        raise DegenerateRotationError(f"{what}: zero-norm quaternion estimate")


def normalize(v: Tensor) -> Tensor:
    return v / T.norm2(v, axis=-1, keepdims=True)


def orientation_loss_quat(q_est: Tensor, q_gt) -> Tensor:
    """||q_gt - q_est/||q_est|| ||.  Not symmetric under q -> -q."""
    q_gt = T._as_tensor(q_gt, q_est)
    if q_est.shape[-1] != 4 or q_gt.shape[-1] != 4:
        raise ShapeError("orientation_loss_quat", q_est.shape, q_gt.shape)
    _check_nonzero(q_est.data, "orientation_loss_quat")
    return T.norm2(q_gt - normalize(q_est), axis=-1)


def pose_loss(l_x: Tensor, l_q: Tensor, params: LossParams) -> Tensor:
    """L_x * exp(-s_x) + s_x + L_q * exp(-s_q) + s_q, as a scalar."""
    s_x = params.s_x.reshape(())
    s_q = params.s_q.reshape(())
    l_x = T._as_tensor(l_x, s_x)
    l_q = T._as_tensor(l_q, s_q)
    return l_x * T.exp(-s_x) + s_x + l_q * T.exp(-s_q) + s_q


def pose_loss_value(l_x: float, l_q: float, s_x: float, s_q: float) -> float:
    return float(l_x * np.exp(-s_x) + s_x + l_q * np.exp(-s_q) + s_q)


def _col(t: Tensor, i: int) -> Tensor:
    return t[..., i]


def quat_to_rotmat(q: Tensor) -> Tensor:
    """Rotation matrix [..., 3, 3] of a unit quaternion tensor."""
    w, x, y, z = (_col(q, i) for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [
        [1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)],
        [2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)],
        [2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)],
    ]
    return T.stack([T.stack(r, axis=-1) for r in rows], axis=-2)


def _cross(a: Tensor, b: Tensor) -> Tensor:
    a0, a1, a2 = (_col(a, i) for i in range(3))
    b0, b1, b2 = (_col(b, i) for i in range(3))
    return T.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def sixd_to_rotmat(raw: Tensor, eps: float = 1e-8) -> Tensor:
    """Gram-Schmidt map of two 3-vectors to a rotation matrix whose columns are b1, b2, b1 x b2."""
    if raw.shape[-1] != 6:
        raise ShapeError("sixd_to_rotmat", raw.shape, (6,))
    a1, a2 = raw[..., 0:3], raw[..., 3:6]
    n1 = np.linalg.norm(a1.data, axis=-1)
    if np.any(n1 <= eps):
        raise DegenerateRotationError("6D rotation: first column has zero length")
    b1 = normalize(a1)
    proj = (b1 * a2).sum(axis=-1, keepdims=True)
    u2 = a2 - proj * b1
    n2 = np.linalg.norm(u2.data, axis=-1)
    if np.any(n2 <= eps * np.maximum(1.0, np.linalg.norm(a2.data, axis=-1))):
        raise DegenerateRotationError("6D rotation: columns are collinear")
    b2 = normalize(u2)
    b3 = _cross(b1, b2)
    return T.stack([b1, b2, b3], axis=-1)


def frobenius(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return T.norm2(d.reshape(*d.shape[:-2], 9), axis=-1)


def rotation_loss(repr_: RotationRepr | str, raw_est: Tensor, q_gt) -> Tensor:
    """Orientation loss for the chosen output representation."""
    repr_ = RotationRepr.parse(repr_)
    if raw_est.shape[-1] != repr_.width:
        raise ShapeError("rotation_loss", raw_est.shape, (repr_.width,), detail=f"{repr_.value} output width")
    q_gt = T._as_tensor(q_gt, raw_est)
    if repr_ is RotationRepr.QUATERNION:
        return orientation_loss_quat(raw_est, q_gt)
    target = quat_to_rotmat(q_gt)
    if repr_ is RotationRepr.FOUR_D_NORM:
        _check_nonzero(raw_est.data, "rotation_loss")
        est = quat_to_rotmat(normalize(raw_est))
    else:
        est = sixd_to_rotmat(raw_est)
    return frobenius(est, target)


# ---------------------------------------------------------------------------
# numpy helpers


def quat_to_rotmat_np(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_to_quat_np(r) -> np.ndarray:
    """Shepperd's method; returns w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    flat = r.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, m in enumerate(flat):
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[i] = q if q[0] >= 0 else -q
    return out.reshape(r.shape[:-2] + (4,))


def sixd_to_quat_np(raw) -> np.ndarray:
    with T.precision(np.float64):
        r = sixd_to_rotmat(Tensor(np.asarray(raw, dtype=np.float64))).data
    return rotmat_to_quat_np(r)


def raw_to_quat_np(repr_: RotationRepr | str, raw) -> np.ndarray:
    """Unit quaternion(s) from a regressor's raw orientation output."""
    repr_ = RotationRepr.parse(repr_)
    raw = np.asarray(raw, dtype=np.float64)
    if repr_ is RotationRepr.SIX_D:
        return sixd_to_quat_np(raw)
    _check_nonzero(raw, "raw_to_quat_np")
    return raw / np.linalg.norm(raw, axis=-1, keepdims=True)


def quat_conj_np(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul_np(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def rotate_np(q, v) -> np.ndarray:
    """Rotate vector(s) ``v`` by unit quaternion ``q``."""
    return np.einsum("...ij,...j->...i", quat_to_rotmat_np(q), np.asarray(v, dtype=np.float64))


# ---------------------------------------------------------------------------
# Metrics


def angular_error_deg(q_est, q_gt) -> np.ndarray | float:
    """Rotation angle between two orientations in degrees; q and -q are identified."""
    q_est = np.asarray(q_est, dtype=np.float64)
    q_gt = np.asarray(q_gt, dtype=np.float64)
    _check_nonzero(q_est, "angular_error_deg")
    qe = q_est / np.linalg.norm(q_est, axis=-1, keepdims=True)
    qg = q_gt / np.linalg.norm(q_gt, axis=-1, keepdims=True)
    d = np.minimum(1.0, np.abs((qe * qg).sum(axis=-1)))
    out = np.degrees(2.0 * np.arccos(d))
    return float(out) if out.ndim == 0 else out


def position_error(x_est, x_gt) -> np.ndarray | float:
    out = np.linalg.norm(np.asarray(x_est, dtype=np.float64) - np.asarray(x_gt, dtype=np.float64), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def median_errors(errors: Iterable[tuple[float, float]]) -> tuple[float, float]:
    """(median position error, median angular error); even lengths use the midpoint."""
    arr = np.asarray(list(errors), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("median_errors: empty error list")
    return float(np.median(arr[:, 0])), float(np.median(arr[:, 1]))
