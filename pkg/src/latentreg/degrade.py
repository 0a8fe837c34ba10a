"""Synthetic shapes and the view degradation model.

A view is produced from a reference shape by a random rigid pose followed by
anisotropic Gaussian jitter, a plane cut that keeps a fraction ``v`` of the
points, and outlier points drawn along random curves leaving the surface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import (
    ValidationError,
    as_generator,
    ceil_count,
    check_cloud,
    check_ratio,
)
from .cloud import read_pcd3, write_pcd3
from .geom3d import RigidMotion, sample_uniform_rotation

__all__ = [
    "DegradationModel",
    "ViewSet",
    "SHAPES",
    "make_shape",
    "normalize_shape",
    "jit_noise",
    "plane_cut",
    "curve_outliers",
    "generate_views",
    "save_viewset",
    "load_viewset",
]


# -- degradation model -----------------------------------------------------------

@dataclass(frozen=True)
class DegradationModel:
    """Noise covariance ``sigma`` (3x3), visibility ratio ``v``, outlier ratio ``o``."""

    sigma: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    v: float = 1.0
    o: float = 0.0

    def __post_init__(self):
        s = np.array(self.sigma, dtype=float).reshape(3, 3)
        if not np.allclose(s, s.T, atol=1e-12, rtol=0):
            raise ValidationError("noise covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(s)) < -1e-12:
            raise ValidationError("noise covariance must be positive semidefinite")
        s.setflags(write=False)
        object.__setattr__(self, "sigma", s)
        object.__setattr__(self, "v", check_ratio(self.v, "v", 0.0, 1.0, low_open=True))
        object.__setattr__(self, "o", check_ratio(self.o, "o", 0.0, 1.0, high_open=True))

    @classmethod
    def from_axes(cls, a: float, b: float, c: float, v: float = 1.0, o: float = 0.0,
                  as_variance: bool = False) -> DegradationModel:
        """``diag(a, b, c)`` read as per-axis standard deviations (or variances)."""
        d = np.array([a, b, c], dtype=float)
        if np.any(d < 0):
            raise ValidationError("per-axis noise levels must be non-negative")
        return cls(np.diag(d if as_variance else d**2), v, o)

    @property
    def is_clean(self) -> bool:
        return not np.any(self.sigma) and self.v == 1.0 and self.o == 0.0

    def scaled(self, factor: float) -> DegradationModel:
        """The same model after all coordinates are multiplied by ``factor``."""
        return DegradationModel(self.sigma * factor**2, self.v, self.o)

    def to_dict(self) -> dict:
        return {"sigma": self.sigma.tolist(), "v": self.v, "o": self.o}

    @classmethod
    def from_dict(cls, d: dict) -> DegradationModel:
        return cls(np.asarray(d.get("sigma", np.zeros((3, 3)))), d.get("v", 1.0), d.get("o", 0.0))


def jit_noise(x, sigma, rng) -> np.ndarray:
    """Add i.i.d. ``N(0, sigma)`` displacements to every point."""
    x = check_cloud(x)
    sigma = np.asarray(sigma, dtype=float).reshape(3, 3)
    if not np.any(sigma):
        return x.copy()
    try:
        chol = np.linalg.cholesky(sigma + 1e-12 * np.eye(3))
    except np.linalg.LinAlgError:
        raise ValidationError("noise covariance is not positive semidefinite") from None
    rng = as_generator(rng)
    return x + rng.standard_normal(x.shape) @ chol.T


def _random_unit(rng) -> np.ndarray:
    n = rng.standard_normal(3)
    return n / np.linalg.norm(n)


def plane_cut(x, v: float, rng, normal=None, mode: str = "halfspace") -> np.ndarray:
    """Keep exactly ``ceil(v * k)`` points on one side of a random plane.

    ``mode="halfspace"`` keeps the points with the smallest signed distance
    along the normal; ``mode="slab"`` keeps the points nearest a plane through
    the centroid. Survivors keep their original order.
    """
    x = check_cloud(x)
    v = check_ratio(v, "v", 0.0, 1.0, low_open=True)
    rng = as_generator(rng)
    n = _random_unit(rng) if normal is None else np.asarray(normal, float) / np.linalg.norm(normal)
    keep = ceil_count(v * len(x))
    if keep >= len(x):
        return x.copy()
    s = x @ n
    if mode == "halfspace":
        key = s - s.min()
    elif mode == "slab":
        key = np.abs(s - s.mean())
    else:
        raise ValueError(f"unknown plane-cut mode {mode!r}")
    order = np.argsort(key, kind="stable")[:keep]
    return x[np.sort(order)]


def curve_outliers(x, o: float, rng, step: float = 0.02, jitter: float = 0.3,
                   length: tuple = (16, 64)) -> np.ndarray:
    """Append ``ceil(o k / (1 - o))`` points along random curves leaving the surface.

    Each curve starts exactly on a randomly chosen input point and walks with
    a fixed step while its heading is perturbed by ``jitter`` radians (std)
    per step. Inliers come first and are untouched.
    """
    x = check_cloud(x)
    o = check_ratio(o, "o", 0.0, 1.0, high_open=True)
    n_out = ceil_count(o * len(x) / (1.0 - o))
    if n_out == 0:
        return x.copy()
    rng = as_generator(rng)
    pieces = []
    remaining = n_out
    while remaining > 0:
        n = min(remaining, int(rng.integers(length[0], length[1] + 1)))
        pos = x[rng.integers(len(x))].copy()
        heading = _random_unit(rng)
        pts = np.empty((n, 3))
        pts[0] = pos
        for j in range(1, n):
            kick = rng.standard_normal(3) * jitter
            kick -= kick.dot(heading) * heading
            heading = heading + kick
            heading /= np.linalg.norm(heading)
            pos = pos + step * heading
            pts[j] = pos
        pieces.append(pts)
        remaining -= n
    return np.vstack([x] + pieces)


# -- view sets ---------------------------------------------------------------

@dataclass
class ViewSet:
    """Views with optional ground-truth poses and the reference they came from."""

    views: list
    truth: list | None = None
    reference: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.views = [check_cloud(v) for v in self.views]
        if self.truth is not None and len(self.truth) != len(self.views):
            raise ValidationError(f"{len(self.truth)} truth poses for {len(self.views)} views")

    def __len__(self):
        return len(self.views)


def generate_views(reference, n: int, model: DegradationModel, rng,
                   translation_box: float = 0.25, rotation_mode: str = "haar",
                   cut_mode: str = "halfspace") -> ViewSet:
    """Pose then degrade ``n`` copies of ``reference`` (noise, cut, outliers)."""
    reference = check_cloud(reference, name="reference")
    if n < 2:
        raise ValidationError(f"need at least 2 views, got {n}")
    rng = as_generator(rng)
    base = int(rng.integers(2**63 - 1))
    views, truth = [], []
    for i in range(n):
        r_i = np.random.default_rng([base, i])
        rot = sample_uniform_rotation(r_i, mode=rotation_mode)
        t = r_i.uniform(-translation_box, translation_box, size=3)
        rho = RigidMotion(rot, t)
        x = rho.apply(reference)
        x = jit_noise(x, model.sigma, r_i)
        x = plane_cut(x, model.v, r_i, mode=cut_mode)
        x = curve_outliers(x, model.o, r_i)
        views.append(x)
        truth.append(rho)
    return ViewSet(views, truth, reference.copy(), {"degradation": model.to_dict()})


def save_viewset(vs: ViewSet, directory, meta: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, v in enumerate(vs.views):
        write_pcd3(d / f"view_{i:04d}.pcd3", v)
    if vs.truth is not None:
        poses = [{"rotation": p.rotation.reshape(-1).tolist(), "translation": p.translation.tolist()}
                 for p in vs.truth]
        (d / "truth.json").write_text(json.dumps({"poses": poses}, indent=1))
    if vs.reference is not None:
        write_pcd3(d / "reference.pcd3", vs.reference)
    (d / "meta.json").write_text(json.dumps(meta if meta is not None else vs.meta, indent=1))


def load_truth(path) -> list[RigidMotion]:
    data = json.loads(Path(path).read_text())
    return [RigidMotion.from_dict(p) for p in data["poses"]]


def load_viewset(directory) -> ViewSet:
    d = Path(directory)
    files = sorted(d.glob("view_*.pcd3"))
    if not files:
        raise FileNotFoundError(f"no view_*.pcd3 files in {d}")
    views = [read_pcd3(f) for f in files]
    truth = load_truth(d / "truth.json") if (d / "truth.json").exists() else None
    ref = read_pcd3(d / "reference.pcd3") if (d / "reference.pcd3").exists() else None
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
    return ViewSet(views, truth, ref, meta)


# -- shape library ----------------------------------------------------------------
#
# Each shape is a list of surface patches. Points are allocated to patches in
# proportion to their (approximate) area, then sampled uniformly on each.

def _frame(direction):
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    helper = np.array([1.0, 0, 0]) if abs(d[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    return d, u, np.cross(d, u)


class _Tube:
    """Surface of constant radius around a parametric curve ``c(s)``, s in [0, 1]."""

    def __init__(self, curve, radius, samples=256):
        self.curve = curve
        self.radius = radius
        s = np.linspace(0, 1, samples)
        pts = curve(s)
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        self.cum = np.concatenate([[0], np.cumsum(seg)])
        self.length = self.cum[-1]
        self.s = s

    def area(self):
        return 2 * np.pi * self.radius * self.length

    def sample(self, n, rng):
        arc = rng.uniform(0, self.length, n)
        s = np.interp(arc, self.cum, self.s)
        c = self.curve(s)
        h = 1e-4
        tan = self.curve(np.clip(s + h, 0, 1)) - self.curve(np.clip(s - h, 0, 1))
        tan /= np.linalg.norm(tan, axis=1, keepdims=True)
        ref = np.where(np.abs(tan[:, :1]) < 0.9, [[1.0, 0, 0]], [[0, 1.0, 0]])
        u = np.cross(tan, ref)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        w = np.cross(tan, u)
        phi = rng.uniform(0, 2 * np.pi, n)[:, None]
        return c + self.radius * (np.cos(phi) * u + np.sin(phi) * w)


def _segment(p0, p1):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    return lambda s: p0 + np.asarray(s)[:, None] * (p1 - p0)


class _Cone:
    def __init__(self, base, apex, radius):
        self.base, self.apex, self.radius = np.asarray(base, float), np.asarray(apex, float), radius
        self.height = np.linalg.norm(self.apex - self.base)

    def area(self):
        return np.pi * self.radius * np.hypot(self.radius, self.height)

    def sample(self, n, rng):
        d, u, w = _frame(self.apex - self.base)
        # area element grows linearly towards the base
        f = 1 - np.sqrt(rng.random(n))
        phi = rng.uniform(0, 2 * np.pi, n)[:, None]
        r = (self.radius * (1 - f))[:, None]
        return self.base + (f * self.height)[:, None] * d + r * (np.cos(phi) * u + np.sin(phi) * w)


class _Disk:
    def __init__(self, center, normal, radius):
        self.center, self.normal, self.radius = np.asarray(center, float), normal, radius

    def area(self):
        return np.pi * self.radius**2

    def sample(self, n, rng):
        _, u, w = _frame(self.normal)
        r = self.radius * np.sqrt(rng.random(n))[:, None]
        phi = rng.uniform(0, 2 * np.pi, n)[:, None]
        return self.center + r * (np.cos(phi) * u + np.sin(phi) * w)


class _Box:
    def __init__(self, center, half, rotation=None):
        self.center = np.asarray(center, float)
        self.half = np.asarray(half, float)
        self.rotation = np.eye(3) if rotation is None else rotation
        hx, hy, hz = self.half
        self.faces = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4

    def area(self):
        return self.faces.sum()

    def sample(self, n, rng):
        face = rng.choice(6, size=n, p=self.faces / self.faces.sum())
        p = rng.uniform(-1, 1, (n, 3)) * self.half
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        p[np.arange(n), axis] = sign * self.half[axis]
        return p @ self.rotation.T + self.center


class _Sphere:
    def __init__(self, center, radius):
        self.center, self.radius = np.asarray(center, float), radius

    def area(self):
        return 4 * np.pi * self.radius**2

    def sample(self, n, rng):
        d = rng.standard_normal((n, 3))
        return self.center + self.radius * d / np.linalg.norm(d, axis=1, keepdims=True)


def _jitter(value, rng, variation):
    return value * (1.0 + variation * rng.uniform(-1, 1))


def _asym_lamp(rng, var):
    j = lambda x: _jitter(x, rng, var)  # noqa: E731
    post_h = j(1.0)
    top = np.array([0.15, 0.0, post_h])
    arm_dir = np.array([np.cos(np.deg2rad(j(35))), 0.25, np.sin(np.deg2rad(j(35)))])
    elbow = top + j(0.55) * arm_dir / np.linalg.norm(arm_dir)
    head = elbow + np.array([j(0.35), -0.1, -j(0.15)])
    return [
        _Disk([0.0, 0.0, 0.0], [0, 0, 1], j(0.4)),
        _Tube(_segment([0.15, 0, 0], top), 0.04),
        _Tube(_segment(top, elbow), 0.035),
        _Tube(_segment(elbow, head), 0.03),
        _Cone(head + [0.05, 0.0, -0.2], head, j(0.22)),
        _Sphere(top, 0.07),
    ]


def _bent_arrow(rng, var):
    j = lambda x: _jitter(x, rng, var)  # noqa: E731
    bend = np.deg2rad(j(75))
    rad = j(0.9)

    def arc(s):
        a = np.asarray(s) * bend
        return np.stack([rad * np.sin(a), rad * (1 - np.cos(a)), 0.15 * np.asarray(s)], axis=1)

    tip = arc(np.array([1.0]))[0]
    tan = arc(np.array([1.0]))[0] - arc(np.array([0.98]))[0]
    tan /= np.linalg.norm(tan)
    return [
        _Tube(arc, 0.045),
        _Cone(tip, tip + j(0.3) * tan, j(0.13)),
        _Box([0.05, -0.02, 0.12], [0.12, 0.01, j(0.12)]),
        _Box([0.02, 0.1, 0.0], [0.1, j(0.08), 0.01]),
    ]


def _three_prong(rng, var):
    j = lambda x: _jitter(x, rng, var)  # noqa: E731
    parts = [_Sphere([0, 0, 0], j(0.18))]
    for length, az, el, r in ((1.0, 0.0, 20.0, 0.05), (0.7, 115.0, -15.0, 0.06),
                              (0.5, 230.0, 40.0, 0.07)):
        a, e = np.deg2rad(j(az + 10) - 10), np.deg2rad(j(el))
        d = np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
        end = j(length) * d
        parts.append(_Tube(_segment([0, 0, 0], end), r))
        parts.append(_Sphere(end, r * 1.6))
    return parts


def _helix_block(rng, var):
    j = lambda x: _jitter(x, rng, var)  # noqa: E731
    turns, hr, height = j(2.2), j(0.22), j(0.9)
    base = np.array([0.2, 0.05, 0.2])

    def helix(s):
        a = 2 * np.pi * turns * np.asarray(s)
        return base + np.stack([hr * np.cos(a), hr * np.sin(a), height * np.asarray(s)], axis=1)

    return [
        _Box([0.0, 0.0, 0.0], [j(0.45), j(0.28), j(0.2)]),
        _Tube(helix, 0.04),
        _Box([-0.35, 0.2, 0.3], [0.08, 0.06, j(0.12)]),
    ]


def _airplane(rng, var):
    j = lambda x: _jitter(x, rng, var)  # noqa: E731
    length = j(2.0)
    return [
        _Tube(_segment([-length / 2, 0, 0], [length / 2, 0, 0]), j(0.12)),
        _Cone([length / 2, 0, 0], [length / 2 + 0.3, 0, 0], 0.12),
        _Box([0.1, 0, 0], [j(0.18), j(0.8), 0.02]),
        _Box([-length / 2 + 0.1, 0, 0], [0.1, j(0.3), 0.015]),
        _Box([-length / 2 + 0.1, 0, 0.14], [0.1, 0.015, j(0.1)]),
    ]


SHAPES = {
    "asym-lamp": _asym_lamp,
    "bent-arrow": _bent_arrow,
    "three-prong": _three_prong,
    "helix-block": _helix_block,
    # near two-fold symmetric about its fuselage (x) axis
    "airplane": _airplane,
}

ASYMMETRIC_SHAPES = ("asym-lamp", "bent-arrow", "three-prong", "helix-block")


def normalize_shape(x) -> np.ndarray:
    """Center on the centroid and scale to lie exactly within the unit sphere."""
    x = check_cloud(x)
    c = x - x.mean(axis=0)
    r = np.max(np.linalg.norm(c, axis=1))
    return c / r if r > 0 else c


def make_shape(name: str, k: int, rng=None, variation: float = 0.0) -> np.ndarray:
    """Sample ``k`` surface points of a built-in parametric shape.

    ``variation`` perturbs the shape's proportions (relative amplitude), so a
    family of related instances can be drawn from one name. The result is
    centered and scaled into the unit sphere.
    """
    if name not in SHAPES:
        raise ValidationError(f"unknown shape {name!r}; choose from {sorted(SHAPES)}")
    if k < 64:
        raise ValidationError(f"shapes need at least 64 points, got {k}")
    rng = as_generator(rng)
    parts = SHAPES[name](rng, variation)
    areas = np.array([p.area() for p in parts])
    counts = rng.multinomial(k, areas / areas.sum())
    pts = np.vstack([p.sample(c, rng) for p, c in zip(parts, counts) if c])
    pts = pts[rng.permutation(len(pts))]
    return normalize_shape(pts)
