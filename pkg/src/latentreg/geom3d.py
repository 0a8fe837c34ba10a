"""Rotations and rigid motions in 3D.

Rotations are plain ``(3, 3)`` float arrays (or stacks ``(..., 3, 3)``);
point clouds are ``(k, 3)`` arrays. The helpers here never mutate their
inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import ValidationError, check_cloud

__all__ = [
    "AxisAngle",
    "RigidMotion",
    "skew",
    "rotation_from_axis_angle",
    "exp_so3",
    "log_so3",
    "relative_angle",
    "is_rotation",
    "project_to_rotation",
    "rotation_about",
    "apply_motion",
    "sample_uniform_rotation",
    "joint_normalize",
    "undo_normalize",
]

_HAAR_BISECT_STEPS = 64


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``K`` with ``K @ w == cross(v, w)``.

    Works on a single 3-vector or on a stack ``(..., 3)``.
    """
    v = np.asarray(v, dtype=float)
    k = np.zeros(v.shape[:-1] + (3, 3))
    k[..., 0, 1] = -v[..., 2]
    k[..., 0, 2] = v[..., 1]
    k[..., 1, 0] = v[..., 2]
    k[..., 1, 2] = -v[..., 0]
    k[..., 2, 0] = -v[..., 1]
    k[..., 2, 1] = v[..., 0]
    return k


@dataclass(frozen=True)
class AxisAngle:
    """A unit rotation axis and an angle in radians."""

    axis: np.ndarray
    angle: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        norm = np.linalg.norm(axis)
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-12:
            raise ValidationError(f"rotation axis must be a unit vector, got norm {norm!r}")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "angle", float(self.angle))


def rotation_from_axis_angle(axis, angle: float | None = None) -> np.ndarray:
    """Rodrigues formula ``I + sin(t) K + (1 - cos(t)) K^2``.

    Accepts either an :class:`AxisAngle` or ``(axis, angle)``. The axis must
    already be unit length.
    """
    a = axis if isinstance(axis, AxisAngle) else AxisAngle(axis, angle)
    k = skew(a.axis)
    return np.eye(3) + np.sin(a.angle) * k + (1.0 - np.cos(a.angle)) * (k @ k)


def rotation_about(axis, degrees: float) -> np.ndarray:
    """Rotation by ``degrees`` about an arbitrary (normalised here) axis."""
    axis = np.asarray(axis, dtype=float)
    return rotation_from_axis_angle(axis / np.linalg.norm(axis), np.deg2rad(degrees))


def exp_so3(omega: np.ndarray) -> np.ndarray:
    """Exponential map of rotation vectors ``(..., 3) -> (..., 3, 3)``."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)[..., None, None]
    k = skew(omega)
    k2 = k @ k
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * k + b * k2


def log_so3(r: np.ndarray) -> np.ndarray:
    """Rotation vector of a single rotation matrix (angle in ``[0, pi]``)."""
    r = np.asarray(r, dtype=float)
    theta = relative_angle(r, np.eye(3))
    if theta < 1e-10:
        return np.zeros(3)
    if np.pi - theta < 1e-6:
        # near a half turn the antisymmetric part vanishes; read the axis off R + I
        s = r + np.eye(3)
        col = np.argmax(np.linalg.norm(s, axis=0))
        axis = s[:, col] / np.linalg.norm(s[:, col])
        return axis * theta
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return w * (theta / (2.0 * np.sin(theta)))


def relative_angle(r1: np.ndarray, r2: np.ndarray) -> np.ndarray | float:
    """Geodesic distance between rotations, the angle of ``R1 R2^T`` in ``[0, pi]``.

    Equal to ``arccos((tr(R1 R2^T) - 1) / 2)``, but evaluated as an ``atan2``
    of the sine and cosine parts so small angles keep full precision.
    Broadcasts over leading dimensions.
    """
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    a = r1 @ np.swapaxes(r2, -1, -2)
    cos = (a[..., 0, 0] + a[..., 1, 1] + a[..., 2, 2] - 1.0) / 2.0
    vee = np.stack([a[..., 2, 1] - a[..., 1, 2], a[..., 0, 2] - a[..., 2, 0],
                    a[..., 1, 0] - a[..., 0, 1]], axis=-1)
    sin = np.linalg.norm(vee, axis=-1) / 2.0
    out = np.arctan2(sin, cos)
    return float(out) if np.ndim(out) == 0 else out


def is_rotation(m: np.ndarray, tol: float = 1e-9) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (3, 3) or not np.all(np.isfinite(m)):
        return False
    eye = np.eye(3)
    ortho = np.linalg.norm(np.swapaxes(m, -1, -2) @ m - eye, axis=(-2, -1))
    det = np.linalg.det(m)
    return bool(np.all(ortho <= tol) and np.all(np.abs(det - 1.0) <= tol))


def project_to_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation in Frobenius norm (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    u = u.copy()
    u[..., :, -1] *= d[..., None] if np.ndim(d) else d
    return u @ vt


@dataclass(frozen=True)
class RigidMotion:
    """``x -> R x + t`` acting on row-vector point clouds."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not is_rotation(r, tol=1e-6):
            raise ValidationError("rotation part is not in SO(3)")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidMotion:
        return cls()

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other: RigidMotion) -> RigidMotion:
        """``self o other``: apply ``other`` first."""
        r = project_to_rotation(self.rotation @ other.rotation)
        return RigidMotion(r, self.rotation @ other.translation + self.translation)

    def inverse(self) -> RigidMotion:
        rt = self.rotation.T
        return RigidMotion(rt, -rt @ self.translation)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> RigidMotion:
        return cls(np.asarray(d["rotation"], dtype=float).reshape(3, 3), d["translation"])


def apply_motion(rho: RigidMotion, x: np.ndarray) -> np.ndarray:
    """Apply a rigid motion to every point; order and count are preserved."""
    return rho.apply(check_cloud(x))


def _haar_angles(u: np.ndarray) -> np.ndarray:
    """Invert the Haar angle CDF ``(t - sin t) / pi`` by bisection."""
    target = np.pi * u
    lo = np.zeros_like(target)
    hi = np.full_like(target, np.pi)
    for _ in range(_HAAR_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        below = (mid - np.sin(mid)) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def sample_uniform_rotation(rng: np.random.Generator, size: int | None = None,
                            mode: str = "haar") -> np.ndarray:
    """Random rotation(s): uniform axis on the sphere plus an angle.

    ``mode="haar"`` draws the angle from the Haar density ``(1 - cos t) / pi``,
    which makes the result uniform over SO(3). ``mode="paper"`` draws the angle
    from ``U(0, pi)``, which over-weights small rotations.
    """
    n = 1 if size is None else int(size)
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    u = rng.random(n)
    if mode == "haar":
        angle = _haar_angles(u)
    elif mode == "paper":
        angle = np.pi * u
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    r = exp_so3(axis * angle[:, None])
    return r[0] if size is None else r


def joint_normalize(views):
    """Center every view, then divide all views by one shared scale.

    The shared scale is the largest per-view radius after centering, so the
    largest view touches the unit sphere and relative sizes are kept.

    Returns ``(normalized_views, scale, centroids)``; see :func:`undo_normalize`.
    """
    views = [check_cloud(v) for v in views]
    if not views:
        raise ValidationError("joint_normalize needs at least one view")
    centroids = [v.mean(axis=0) for v in views]
    centered = [v - c for v, c in zip(views, centroids)]
    radii = [float(np.max(np.linalg.norm(v, axis=1))) for v in centered]
    scale = max(radii)
    if scale <= 0.0:
        raise ValidationError("cannot normalize: every view is a single repeated point")
    return [v / scale for v in centered], scale, centroids


def undo_normalize(view: np.ndarray, scale: float, centroid: np.ndarray) -> np.ndarray:
    return np.asarray(view) * scale + centroid
