"""Multiview rigid registration in the latent space of a frozen autoencoder.

The views are explained as rigid copies of one decoded template ``d(z)``.
Pose and template are found by comparing encodings: a posed, noised and
masked template is encoded and compared with the encoding of the (masked)
view. The search alternates a joint gradient descent over ``z`` and every
pose with an exhaustive rotation scan (FLAMES: minima of the loss over a
fixed rotation grid) whose best candidates seed pose-only descents.

Conventions
-----------
A pose ``(R, t)`` maps template coordinates into a view: ``x = R p + t``.
Internally views are centred and share one scale (see
:func:`latentreg.geom3d.joint_normalize`); :func:`register` converts the
returned poses and template back to the input units.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import diff
from ._validation import ValidationError, check_cloud, check_views, floor_count
from .cloud import density_stddev, write_pcd3
from .degrade import DegradationModel
from .descriptor import DescriptorModel, decode, decode_tensor, encode_batch, encode_tensor
from .geom3d import (RigidMotion, exp_so3, is_rotation, joint_normalize, project_to_rotation,
                     relative_angle, sample_uniform_rotation)

__all__ = [
    "RegConfig",
    "RotationGrid",
    "GridFormatError",
    "build_rotation_grid",
    "load_rotation_grid",
    "super_fibonacci",
    "quaternion_to_rotation",
    "occlusion_keep",
    "outlier_keep",
    "mask_occlusion",
    "mask_outliers",
    "EmptyMaskError",
    "loss_view",
    "loss_total",
    "RegistrationProblem",
    "RegistrationState",
    "FlamesResult",
    "MultistartResult",
    "flames",
    "init_medoid",
    "joint_descent",
    "multistart",
    "update_poses",
    "compare_poses",
    "detect_escapes",
    "RegistrationReport",
    "register",
    "write_result",
]

log = logging.getLogger(__name__)


# -- configuration -----------------------------------------------------------------

@dataclass
class RegConfig:
    """Registration settings. Sizes default to a desk-scale budget."""

    grid_size: int = 5000
    grid_neighbors: int = 64
    top_m: int = 4
    escape_deg: float = 15.0
    reg_weight: float = 1e-2
    density_radius: float = 0.1
    lr: float = 1e-2
    lr_factor: float = 10.0
    patience_lr: int = 10
    patience_stop: int = 100
    threshold: float = 1e-4
    weight_decay: float = 1e-2
    max_steps: int = 2000
    max_rounds: int = 20
    threads: int = 1
    flames_dtype: str = "float32"
    compare_draws: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("grid_size", "grid_neighbors", "top_m", "patience_lr", "patience_stop",
                     "max_steps", "max_rounds", "threads", "compare_draws"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}")
        if self.grid_size <= self.grid_neighbors:
            raise ValidationError("grid_size must exceed grid_neighbors")
        if not 0.0 < self.escape_deg < 180.0:
            raise ValidationError(f"escape_deg must lie in (0, 180), got {self.escape_deg!r}")
        if not self.reg_weight >= 0.0:
            raise ValidationError("reg_weight must be non-negative")
        for name in ("density_radius", "lr", "lr_factor"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if not (self.lr_factor > 1.0 and self.threshold >= 0.0 and self.weight_decay >= 0.0):
            raise ValidationError("need lr_factor > 1, threshold >= 0 and weight_decay >= 0")
        if self.flames_dtype not in ("float32", "float64"):
            raise ValidationError("flames_dtype must be 'float32' or 'float64'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RegConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown registration setting(s): {', '.join(unknown)}")
        return cls(**d)


# -- rotation grid -------------------------------------------------------------------

_SF_PHI = math.sqrt(2.0)
_SF_PSI = 1.533751168755204288118041
GRID_MAGIC = b"SO3G"


class GridFormatError(ValueError):
    pass


def super_fibonacci(n: int) -> np.ndarray:
    """``n`` unit quaternions ``(x, y, z, w)`` spread evenly over the 3-sphere."""
    s = np.arange(n, dtype=np.float64) + 0.5
    r = np.sqrt(s / n)
    big_r = np.sqrt(1.0 - s / n)
    alpha = 2.0 * np.pi * s / _SF_PHI
    beta = 2.0 * np.pi * s / _SF_PSI
    return np.stack([r * np.sin(alpha), r * np.cos(alpha),
                     big_r * np.sin(beta), big_r * np.cos(beta)], axis=1)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from quaternions ``(..., 4)`` ordered ``(x, y, z, w)``."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    x, y, z, w = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def _rotation_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quaternion_to_rotation` (sign arbitrary), batched."""
    r = np.asarray(r, dtype=np.float64).reshape(-1, 3, 3)
    # eigenvector of the symmetric 4x4 matrix whose top eigenvalue picks q
    k = np.empty((len(r), 4, 4))
    m = r
    k[:, 0, 0] = m[:, 0, 0] - m[:, 1, 1] - m[:, 2, 2]
    k[:, 1, 1] = m[:, 1, 1] - m[:, 0, 0] - m[:, 2, 2]
    k[:, 2, 2] = m[:, 2, 2] - m[:, 0, 0] - m[:, 1, 1]
    k[:, 3, 3] = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    k[:, 0, 1] = k[:, 1, 0] = m[:, 1, 0] + m[:, 0, 1]
    k[:, 0, 2] = k[:, 2, 0] = m[:, 2, 0] + m[:, 0, 2]
    k[:, 1, 2] = k[:, 2, 1] = m[:, 2, 1] + m[:, 1, 2]
    k[:, 0, 3] = k[:, 3, 0] = m[:, 2, 1] - m[:, 1, 2]
    k[:, 1, 3] = k[:, 3, 1] = m[:, 0, 2] - m[:, 2, 0]
    k[:, 2, 3] = k[:, 3, 2] = m[:, 1, 0] - m[:, 0, 1]
    _, vec = np.linalg.eigh(k / 3.0)
    return vec[:, :, -1]


def _knn_adjacency(quats: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest rotations: chordal distance on ``{q, -q}`` orders angles."""
    n = len(quats)
    tree = cKDTree(np.vstack([quats, -quats]))
    _, idx = tree.query(quats, k=min(k + 2, 2 * n))
    idx = idx % n
    adj = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        row = [j for j in dict.fromkeys(idx[i].tolist()) if j != i]
        if len(row) < k:  # pragma: no cover - only for tiny, degenerate grids
            d = np.abs(quats @ quats[i])
            order = [j for j in np.lexsort((np.arange(n), -d)).tolist() if j != i]
            row = order
        adj[i] = row[:k]
    return adj


@dataclass(frozen=True)
class RotationGrid:
    """``L`` rotations and, for each, its ``k`` nearest grid neighbours."""

    rotations: np.ndarray
    adjacency: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotations, dtype=np.float64)
        adj = np.asarray(self.adjacency, dtype=np.int64)
        if rot.ndim != 3 or rot.shape[1:] != (3, 3):
            raise ValidationError(f"grid rotations must be (L, 3, 3), got {rot.shape}")
        if adj.shape[0] != rot.shape[0] or adj.ndim != 2:
            raise ValidationError("adjacency must have one row per rotation")
        if np.any(adj < 0) or np.any(adj >= len(rot)):
            raise ValidationError("adjacency index out of range")
        if np.any(adj == np.arange(len(rot))[:, None]):
            raise ValidationError("adjacency lists must not contain the node itself")
        rot.setflags(write=False)
        adj.setflags(write=False)
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "adjacency", adj)

    @property
    def size(self) -> int:
        return len(self.rotations)

    @property
    def k(self) -> int:
        return self.adjacency.shape[1]

    def neighbor_angles(self) -> np.ndarray:
        """Angle from each node to its nearest grid neighbour."""
        return relative_angle(self.rotations, self.rotations[self.adjacency[:, 0]])

    def covering_radius(self, probes: int = 20000, seed=0) -> float:
        """Largest angle from a random rotation to its closest grid node (estimate)."""
        q = _rotation_to_quaternion(self.rotations)
        probe = _rotation_to_quaternion(sample_uniform_rotation(np.random.default_rng(seed), probes))
        d, _ = cKDTree(np.vstack([q, -q])).query(probe)
        return float(np.max(4.0 * np.arcsin(np.clip(d / 2.0, 0.0, 1.0))))

    def check(self, samples: int = 50, seed=0, tol: float = 1e-6) -> None:
        """Re-verify rotation validity and, on sampled nodes, exact neighbour lists."""
        bad = [i for i, r in enumerate(self.rotations) if not is_rotation(r, 1e-9)]
        if bad:
            raise GridFormatError(f"grid entry {bad[0]} is not a rotation")
        rng = np.random.default_rng(seed)
        nodes = rng.choice(self.size, size=min(samples, self.size), replace=False)
        for i in nodes:
            ang = relative_angle(self.rotations[i], self.rotations)
            ang[i] = np.inf
            kth = np.partition(ang, self.k - 1)[self.k - 1]
            if np.any(ang[self.adjacency[i]] > kth + tol):
                raise GridFormatError(f"adjacency of grid node {i} is not its k nearest set")

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(GRID_MAGIC)
            fh.write(struct.pack("<II", self.size, self.k))
            fh.write(np.ascontiguousarray(self.rotations.reshape(-1, 9), dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(self.adjacency, dtype="<u4").tobytes())


def build_rotation_grid(L: int, k: int, seed=None) -> RotationGrid:
    """Super-Fibonacci rotation grid with its exact k-nearest-neighbour graph.

    The point set depends on ``L`` only. A non-``None`` ``seed`` applies one
    random global rotation, which leaves the neighbour graph unchanged.
    """
    L, k = int(L), int(k)
    if k < 1 or L <= k:
        raise ValidationError(f"need L > k >= 1, got L={L}, k={k}")
    q = super_fibonacci(L)
    rot = quaternion_to_rotation(q)
    adj = _knn_adjacency(q, k)
    if seed is not None:
        rot = sample_uniform_rotation(np.random.default_rng(seed)) @ rot
    return RotationGrid(rot, adj)


def load_rotation_grid(path, verify: bool = True) -> RotationGrid:
    data = Path(path).read_bytes()
    if data[:4] != GRID_MAGIC:
        raise GridFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 12:
        raise GridFormatError(f"{path}: truncated header")
    n, k = struct.unpack("<II", data[4:12])
    expected = 12 + 36 * n + 4 * n * k
    if len(data) != expected:
        raise GridFormatError(f"{path}: expected {expected} bytes for L={n}, k={k}, got {len(data)}")
    rot = np.frombuffer(data, dtype="<f4", count=9 * n, offset=12).reshape(n, 3, 3)
    adj = np.frombuffer(data, dtype="<u4", count=n * k, offset=12 + 36 * n).reshape(n, k)
    # the file stores single precision; snap back onto SO(3) in double precision
    grid = RotationGrid(project_to_rotation(rot.astype(np.float64)), adj.astype(np.int64))
    if verify:
        grid.check()
    return grid


@lru_cache(maxsize=4)
def _cached_grid(L: int, k: int) -> RotationGrid:
    return build_rotation_grid(L, k)


# -- masks ---------------------------------------------------------------------------

class EmptyMaskError(RuntimeError):
    pass


def occlusion_keep(dist: np.ndarray, v: float) -> np.ndarray:
    """Indices (ascending) surviving occlusion, per row of ``dist`` ``(..., k)``.

    ``floor((1 - v) k)`` entries with the largest distance are dropped; among
    equal distances the higher index goes first.
    """
    dist = np.asarray(dist)
    k = dist.shape[-1]
    drop = floor_count((1.0 - v) * k)
    if drop <= 0:
        return np.broadcast_to(np.arange(k), dist.shape).copy()
    rev = dist[..., ::-1]
    order = np.argsort(-rev, axis=-1, kind="stable")
    order = k - 1 - order
    return np.sort(order[..., drop:], axis=-1)


def outlier_keep(dist: np.ndarray, o: float) -> np.ndarray:
    """Boolean mask of entries not above the nearest-rank ``(1 - o)`` percentile."""
    dist = np.asarray(dist)
    n = dist.shape[-1]
    if o <= 0.0:
        return np.ones(dist.shape, dtype=bool)
    rank = n - floor_count(o * n)
    thr = np.partition(dist, rank - 1, axis=-1)[..., rank - 1:rank]
    return dist <= thr


def _check_nonempty(x, name):
    x = check_cloud(x, name=name)
    return x


def mask_occlusion(template_view, data_view, v: float) -> np.ndarray:
    """Drop the template points farthest from the data, keeping a fraction ``v``."""
    t = _check_nonempty(template_view, "template view")
    d = _check_nonempty(data_view, "data view")
    if not 0.0 < v <= 1.0:
        raise ValidationError(f"v must lie in (0, 1], got {v!r}")
    dist = cKDTree(d).query(t)[0]
    return t[occlusion_keep(dist, v)]


def mask_outliers(data_view, template_view, o: float) -> np.ndarray:
    """Drop data points whose distance to the template exceeds the ``1 - o`` percentile."""
    d = _check_nonempty(data_view, "data view")
    t = _check_nonempty(template_view, "template view")
    if not 0.0 <= o < 1.0:
        raise ValidationError(f"o must lie in [0, 1), got {o!r}")
    dist = cKDTree(t).query(d)[0]
    return d[outlier_keep(dist, o)]


def _noise_factor(sigma: np.ndarray) -> np.ndarray | None:
    sigma = np.asarray(sigma, dtype=np.float64)
    if not np.any(sigma):
        return None
    return np.linalg.cholesky(sigma + 1e-12 * np.eye(3))


def _masked_pair(posed: np.ndarray, x: np.ndarray, degr: DegradationModel, tree=None):
    """Masked template and masked data for one already posed (and noised) template."""
    tm = posed
    if degr.v < 1.0:
        tree = tree if tree is not None else cKDTree(x)
        tm = posed[occlusion_keep(tree.query(posed)[0], degr.v)]
    xm = x
    if degr.o > 0.0:
        xm = x[outlier_keep(cKDTree(posed).query(x)[0], degr.o)]
    if len(tm) == 0 or len(xm) == 0:
        raise EmptyMaskError("masking left an empty cloud")
    return tm, xm


# -- losses --------------------------------------------------------------------------

def _as_motion(rho) -> RigidMotion:
    if isinstance(rho, RigidMotion):
        return rho
    r, t = rho
    return RigidMotion(np.asarray(r, dtype=float), np.asarray(t, dtype=float))


def loss_view(z, rho, x, model: DescriptorModel, degr: DegradationModel | None = None,
              rng=None, view: int | str = 0) -> float:
    """Squared latent distance between the posed, degraded template and view ``x``.

    Noise (if any) is drawn from ``rng`` on every call, so the value is random
    unless the covariance is zero.
    """
    degr = degr or DegradationModel()
    x = check_cloud(x, name=f"view {view}")
    rho = _as_motion(rho)
    posed = rho.apply(decode(model, z))
    chol = _noise_factor(degr.sigma)
    if chol is not None:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        posed = posed + rng.standard_normal(posed.shape) @ chol.T
    try:
        tm, xm = _masked_pair(posed, x, degr)
    except EmptyMaskError:
        raise EmptyMaskError(f"masking emptied view {view}; check v and o") from None
    codes = encode_batch(model, tm[None], dtype=np.float64)[0]
    target = encode_batch(model, xm[None], dtype=np.float64)[0]
    return float(np.sum((codes - target) ** 2))


def regularizer(z, model: DescriptorModel, weight: float, radius: float) -> float:
    if weight == 0.0:
        return 0.0
    return weight * density_stddev(decode(model, z), radius)


def loss_total(z, poses, views, model: DescriptorModel, degr: DegradationModel | None,
               cfg: RegConfig | None = None, rng=None) -> tuple[float, np.ndarray, float]:
    """``(total, per_view, reg)`` with ``total = sum(per_view) + reg``."""
    cfg = cfg or RegConfig()
    views = check_views(views)
    if len(poses) != len(views):
        raise ValidationError(f"{len(poses)} poses for {len(views)} views")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    per = np.array([loss_view(z, p, x, model, degr, rng, view=i)
                    for i, (p, x) in enumerate(zip(poses, views))])
    reg = regularizer(z, model, cfg.reg_weight, cfg.density_radius)
    return float(per.sum() + reg), per, reg


# -- shared problem context ------------------------------------------------------------

_TAG_FLAMES, _TAG_JOINT, _TAG_MULTI, _TAG_EVAL, _TAG_COMPARE = 1, 2, 3, 4, 5
_FLAMES_BLOCK = 64


class RegistrationProblem:
    """Immutable inputs of one registration plus the cached view encodings.

    ``views`` must already be normalised. Noise draws come from generators
    keyed by ``(seed, purpose, counters...)`` so every evaluation is
    reproducible and independent of execution order.
    """

    def __init__(self, views, model: DescriptorModel, degr: DegradationModel | None = None,
                 cfg: RegConfig | None = None, grid: RotationGrid | None = None):
        self.views = [np.ascontiguousarray(v) for v in check_views(views)]
        self.model = model
        self.degr = degr or DegradationModel()
        self.cfg = cfg or RegConfig()
        self._grid = grid
        self.trees = [cKDTree(v) for v in self.views]
        self.chol = _noise_factor(self.degr.sigma)
        enc, dec = model.weights(np.float64)
        self.enc_t = [(diff.Tensor(w), diff.Tensor(b)) for w, b in enc]
        self.dec_t = [(diff.Tensor(w), diff.Tensor(b)) for w, b in dec]
        self.data_codes = np.stack([encode_batch(model, v[None], dtype=np.float64)[0]
                                    for v in self.views])
        self.stats = {"template_mask_noop": 0, "template_mask_active": 0,
                      "data_mask_noop": 0, "data_mask_active": 0}

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def grid(self) -> RotationGrid:
        if self._grid is None:
            self._grid = _cached_grid(self.cfg.grid_size, self.cfg.grid_neighbors)
        return self._grid

    def noise(self, shape, *key) -> np.ndarray | None:
        if self.chol is None:
            return None
        rng = np.random.default_rng([self.cfg.seed, *key])
        return rng.standard_normal(shape) @ self.chol.T

    def regularizer(self, template: np.ndarray) -> float:
        if self.cfg.reg_weight == 0.0:
            return 0.0
        return self.cfg.reg_weight * density_stddev(template, self.cfg.density_radius)

    # masks shared by the numpy and tape paths
    def _template_keep(self, posed: np.ndarray, view_idx) -> np.ndarray | None:
        if self.degr.v >= 1.0:
            self.stats["template_mask_noop"] += len(view_idx)
            return None
        self.stats["template_mask_active"] += len(view_idx)
        dist = np.stack([self.trees[i].query(p)[0] for p, i in zip(posed, view_idx)])
        return occlusion_keep(dist, self.degr.v)

    def _data_codes(self, posed: np.ndarray, view_idx) -> np.ndarray:
        if self.degr.o <= 0.0:
            self.stats["data_mask_noop"] += len(view_idx)
            return self.data_codes[list(view_idx)]
        self.stats["data_mask_active"] += len(view_idx)
        out = np.empty((len(view_idx), self.model.latent_dim))
        for b, (p, i) in enumerate(zip(posed, view_idx)):
            x = self.views[i]
            xm = x[outlier_keep(cKDTree(p).query(x)[0], self.degr.o)]
            out[b] = encode_batch(self.model, xm[None], dtype=np.float64)[0]
        return out

    def view_losses_tensor(self, template: diff.Tensor, rotations: np.ndarray,
                           omega: diff.Tensor, trans: diff.Tensor, view_idx,
                           noise: np.ndarray | None) -> diff.Tensor:
        """Per-view losses ``(B,)`` on the tape, poses ``R_b exp(omega_b)``, ``t_b``."""
        b = len(view_idx)
        rot = diff.matmul(diff.Tensor(rotations), diff.so3_exp(omega))
        posed = diff.matmul(template, diff.transpose(rot))
        posed = diff.add(posed, diff.reshape(trans, (b, 1, 3)))
        if noise is not None:
            posed = diff.add(posed, diff.Tensor(noise))
        keep = self._template_keep(posed.data, view_idx)
        masked = posed if keep is None else diff.gather_rows(posed, keep)
        codes = encode_tensor(masked, self.enc_t)
        target = self._data_codes(posed.data, view_idx)
        d = diff.sub(codes, target)
        return diff.sum_(diff.mul(d, d), axis=1)

    def view_losses(self, template: np.ndarray, rotations: np.ndarray, translations: np.ndarray,
                    view_idx, noise: np.ndarray | None = None) -> np.ndarray:
        """Plain float64 evaluation of the same per-view losses."""
        posed = np.matmul(template, np.swapaxes(rotations, -1, -2)) + translations[:, None, :]
        if noise is not None:
            posed = posed + noise
        keep = self._template_keep(posed, view_idx)
        masked = posed if keep is None else np.take_along_axis(posed, keep[..., None], axis=1)
        codes = encode_batch(self.model, masked, dtype=np.float64)
        target = self._data_codes(posed, view_idx)
        return np.sum((codes - target) ** 2, axis=1)


@dataclass
class RegistrationState:
    """Current template latent, poses and the per-view losses at those values."""

    z: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    losses: np.ndarray
    reg: float = 0.0
    counters: dict = field(default_factory=lambda: {"flames": 0, "joint_descent": 0,
                                                    "multistart": 0, "evaluate": 0})

    @property
    def poses(self) -> list[RigidMotion]:
        return [RigidMotion(r, t) for r, t in zip(self.rotations, self.translations)]

    def copy(self) -> RegistrationState:
        return RegistrationState(self.z.copy(), self.rotations.copy(), self.translations.copy(),
                                 self.losses.copy(), self.reg, dict(self.counters))


def evaluate_state(problem: RegistrationProblem, state: RegistrationState) -> RegistrationState:
    """Recompute per-view losses and the regularizer at the state's values."""
    template = decode(problem.model, state.z)
    n = problem.n_views
    noise = problem.noise((n, len(template), 3), _TAG_EVAL, state.counters["evaluate"])
    state.counters["evaluate"] += 1
    state.losses = problem.view_losses(template, state.rotations, state.translations,
                                       list(range(n)), noise)
    state.reg = problem.regularizer(template)
    return state


# -- medoid ----------------------------------------------------------------------------

def init_medoid(codes) -> np.ndarray:
    """The encoding with the smallest summed (unsquared) distance to all others."""
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2 or len(codes) == 0:
        raise ValidationError(f"expected a non-empty (N, l) array, got shape {codes.shape}")
    dist = np.sqrt(np.maximum(((codes[:, None, :] - codes[None, :, :]) ** 2).sum(-1), 0.0))
    return codes[int(np.argmin(dist.sum(axis=1)))].copy()


# -- FLAMES --------------------------------------------------------------------------

@dataclass
class FlamesResult:
    """Per view: grid indices and losses of the best local minima, ascending."""

    indices: list
    losses: list
    fields: np.ndarray | None = None

    def rotations(self, grid: RotationGrid, view: int) -> np.ndarray:
        return grid.rotations[self.indices[view]]


def local_minima(values: np.ndarray, adjacency: np.ndarray, top_m: int | None = None):
    """Nodes whose value is ``<=`` every neighbour's, ordered by (value, index)."""
    values = np.asarray(values)
    ok = np.all(values[:, None] <= values[adjacency], axis=1)
    idx = np.flatnonzero(ok)
    idx = idx[np.lexsort((idx, values[idx]))]
    return idx if top_m is None else idx[:top_m]


def _kept_rows(x: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Stack ``x[keep[b]]`` for every row of a boolean mask.

    Short rows are filled with their own first kept point, which leaves a
    max-pooled encoding unchanged.
    """
    order = np.argsort(~keep, axis=1, kind="stable")
    counts = keep.sum(axis=1)
    width = int(counts.max())
    idx = order[:, :width]
    short = np.arange(width)[None, :] >= counts[:, None]
    idx = np.where(short, idx[:, :1], idx)
    return x[idx]


def _flames_field(problem: RegistrationProblem, template: np.ndarray, t: np.ndarray,
                  view: int, call: int, dtype, shared: dict) -> np.ndarray:
    grid = problem.grid
    degr = problem.degr
    model = problem.model
    rot = grid.rotations.astype(dtype)
    x = problem.views[view]
    tpl = template.astype(dtype)
    clean_template = problem.chol is None and degr.v >= 1.0
    key = t.tobytes()
    codes_all = shared.get(key) if clean_template else None
    out = np.empty(grid.size, dtype=np.float64)
    p_tree = cKDTree(template) if degr.o > 0.0 and problem.chol is None else None
    for blk, s in enumerate(range(0, grid.size, _FLAMES_BLOCK)):
        rb = rot[s:s + _FLAMES_BLOCK]
        nb = len(rb)
        if codes_all is not None:
            codes = codes_all[s:s + nb]
        else:
            posed = np.matmul(tpl, np.swapaxes(rb, 1, 2)) + t.astype(dtype)
            noise = problem.noise(posed.shape, _TAG_FLAMES, call, view, blk)
            if noise is not None:
                posed = posed + noise.astype(dtype)
            if degr.v < 1.0:
                dist = problem.trees[view].query(posed.reshape(-1, 3))[0].reshape(nb, -1)
                masked = np.take_along_axis(posed, occlusion_keep(dist, degr.v)[..., None], 1)
            else:
                masked = posed
            codes = encode_batch(model, masked, dtype=dtype, chunk=8)
        if degr.o > 0.0:
            if p_tree is not None:
                # distance to the posed template equals distance of the back-moved data
                back = np.matmul(x - t, rb.astype(np.float64))
                dist = p_tree.query(back.reshape(-1, 3))[0].reshape(nb, -1)
            else:
                dist = np.stack([cKDTree(p).query(x)[0] for p in posed])
            target = encode_batch(model, _kept_rows(x, outlier_keep(dist, degr.o)), dtype=dtype, chunk=8)
        else:
            target = problem.data_codes[view].astype(dtype)[None]
        out[s:s + nb] = np.sum((codes - target) ** 2, axis=1, dtype=np.float64)
    return out


def flames(problem: RegistrationProblem, z, translations, top_m: int | None = None,
           call: int = 0, keep_fields: bool = False) -> FlamesResult:
    """Scan the rotation grid for each view with ``z`` and translations fixed.

    Returns, per view, up to ``top_m`` grid minima (loss ``<=`` all graph
    neighbours), sorted by (loss, index).
    """
    top_m = problem.cfg.top_m if top_m is None else top_m
    translations = np.asarray(translations, dtype=np.float64).reshape(problem.n_views, 3)
    template = decode(problem.model, z)
    dtype = np.dtype(problem.cfg.flames_dtype)
    shared: dict = {}
    if problem.chol is None and problem.degr.v >= 1.0:
        # precompute codes per distinct translation before scanning
        for t in translations:
            key = t.tobytes()
            if key not in shared:
                posed = np.matmul(template.astype(dtype), np.swapaxes(problem.grid.rotations.astype(dtype), 1, 2))
                shared[key] = encode_batch(problem.model, posed + t.astype(dtype), dtype=dtype, chunk=8)
    idx_out, loss_out, field_rows = [], [], []
    for i in range(problem.n_views):
        values = _flames_field(problem, template, translations[i], i, call, dtype, shared)
        best = local_minima(values, problem.grid.adjacency, top_m)
        idx_out.append(best)
        loss_out.append(values[best])
        if keep_fields:
            field_rows.append(values)
    return FlamesResult(idx_out, loss_out, np.stack(field_rows) if keep_fields else None)


# -- descents --------------------------------------------------------------------------

def _schedule(cfg: RegConfig, state: diff.OptimState, value: float) -> bool:
    return diff.plateau_schedule(state, value, cfg.lr_factor, cfg.patience_lr,
                                 cfg.patience_stop, cfg.threshold)


def joint_descent(problem: RegistrationProblem, state: RegistrationState,
                  max_steps: int | None = None) -> RegistrationState:
    """AdamW descent over ``z`` and every pose; returns the best iterate seen.

    Rotations move through a local rotation vector that is folded into the
    stored matrix after each step. Masks and noise are refreshed each step and
    treated as constants.
    """
    cfg = problem.cfg
    n = problem.n_views
    idx = list(range(n))
    call = state.counters["joint_descent"]
    state.counters["joint_descent"] += 1
    z = state.z.astype(np.float64).copy()
    rot = state.rotations.copy()
    trans = state.translations.astype(np.float64).copy()
    opt = diff.OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    k_out = problem.model.k_out
    best = None
    steps = 0
    for step in range(max_steps or cfg.max_steps):
        noise = problem.noise((n, k_out, 3), _TAG_JOINT, call, step)
        with diff.Tape() as tape:
            zt = diff.Tensor(z, requires_grad=True)
            om = diff.Tensor(np.zeros((n, 3)), requires_grad=True)
            tt = diff.Tensor(trans, requires_grad=True)
            template = decode_tensor(zt, problem.dec_t, k_out)
            per = problem.view_losses_tensor(template, rot, om, tt, idx, noise)
            data_term = diff.sum_(per)
        reg = problem.regularizer(template.data)
        value = float(data_term.data) + reg
        if not math.isfinite(value):
            raise FloatingPointError(f"joint descent hit a non-finite loss at step {step} "
                                     f"(per-view: {per.data.tolist()})")
        steps = step + 1
        if best is None or value < best[0]:
            best = (value, z.copy(), rot.copy(), trans.copy(), per.data.copy(), reg)
        if _schedule(cfg, opt, value):
            break
        grads = tape.backward(data_term)
        omega = np.zeros((n, 3))
        diff.adamw_step({"z": z, "omega": omega, "t": trans},
                        {"z": grads[zt], "omega": grads[om], "t": grads[tt]}, opt)
        rot = rot @ exp_so3(omega)
        if step % 50 == 49:
            rot = project_to_rotation(rot)
    _, state.z, state.rotations, state.translations, state.losses, state.reg = best
    state.counters["last_joint_steps"] = steps
    state.counters["last_joint_reductions"] = opt.reductions
    return state


def _pose_descent(problem: RegistrationProblem, template: np.ndarray, view: int,
                  rotation: np.ndarray, translation: np.ndarray, key: tuple):
    """Pose-only descent of one view's loss with the template fixed."""
    cfg = problem.cfg
    rot = np.asarray(rotation, dtype=np.float64)[None].copy()
    trans = np.asarray(translation, dtype=np.float64)[None].copy()
    tpl = diff.Tensor(template)
    opt = diff.OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    best = None
    for step in range(cfg.max_steps):
        noise = problem.noise((1,) + template.shape, *key, step)
        with diff.Tape() as tape:
            om = diff.Tensor(np.zeros((1, 3)), requires_grad=True)
            tt = diff.Tensor(trans, requires_grad=True)
            per = problem.view_losses_tensor(tpl, rot, om, tt, [view], noise)
            loss = diff.sum_(per)
        value = float(loss.data)
        if not math.isfinite(value):
            raise FloatingPointError(f"pose descent for view {view} hit a non-finite loss")
        if best is None or value < best[0]:
            best = (value, rot[0].copy(), trans[0].copy())
        if _schedule(cfg, opt, value):
            break
        grads = tape.backward(loss)
        omega = np.zeros((1, 3))
        diff.adamw_step({"omega": omega, "t": trans}, {"omega": grads[om], "t": grads[tt]}, opt)
        rot = rot @ exp_so3(omega)
    return best


@dataclass
class MultistartResult:
    rotations: np.ndarray
    translations: np.ndarray
    losses: np.ndarray
    starts: list
    failures: list


def multistart(problem: RegistrationProblem, state: RegistrationState,
               candidates: FlamesResult, threads: int | None = None) -> MultistartResult:
    """Pose-only descents from every FLAMES candidate; best result per view.

    Each start has its own tape and noise stream, so the selection does not
    depend on ``threads`` or on completion order.
    """
    threads = problem.cfg.threads if threads is None else threads
    call = state.counters["multistart"]
    state.counters["multistart"] += 1
    template = decode(problem.model, state.z)
    jobs = []
    for i in range(problem.n_views):
        if len(candidates.indices[i]) == 0:
            raise ValidationError(f"no rotation candidates for view {i}")
        for g in candidates.indices[i]:
            jobs.append((i, int(g)))

    def run(s):
        i, g = jobs[s]
        try:
            return _pose_descent(problem, template, i, problem.grid.rotations[g],
                                 state.translations[i], (_TAG_MULTI, call, s))
        except (FloatingPointError, EmptyMaskError) as exc:
            return exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(len(jobs))))
    else:
        results = [run(s) for s in range(len(jobs))]

    n = problem.n_views
    out_r = state.rotations.copy()
    out_t = state.translations.copy()
    out_l = np.full(n, np.inf)
    chosen = [None] * n
    starts, failures = [], []
    for s, ((i, g), res) in enumerate(zip(jobs, results)):
        if isinstance(res, Exception):
            failures.append({"view": i, "grid_index": g, "error": str(res)})
            continue
        value, r, t = res
        starts.append({"view": i, "grid_index": g, "loss": value})
        # jobs are in start order, so strict < keeps the lowest start index on ties
        if value < out_l[i]:
            out_l[i], out_r[i], out_t[i], chosen[i] = value, r, t, s
    return MultistartResult(out_r, out_t, out_l, starts, failures)


# -- pose update and escapes -----------------------------------------------------------

def compare_poses(problem: RegistrationProblem, state: RegistrationState, rotations, translations,
                  key: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-view losses of the current and the proposed poses under shared noise draws.

    Both pose sets see the same ``compare_draws`` noise samples. Returns the
    mean old losses, the mean new losses and the standard error of the paired
    differences (zero without declared noise, where one deterministic
    evaluation is used).
    """
    template = decode(problem.model, state.z)
    n = problem.n_views
    idx = list(range(n))
    draws = problem.cfg.compare_draws if problem.chol is not None else 1
    old = np.empty((draws, n))
    new = np.empty((draws, n))
    for d in range(draws):
        noise = problem.noise((n, len(template), 3), _TAG_COMPARE, key, d)
        old[d] = problem.view_losses(template, state.rotations, state.translations, idx, noise)
        new[d] = problem.view_losses(template, np.asarray(rotations), np.asarray(translations), idx, noise)
    se = np.zeros(n) if draws == 1 else (new - old).std(axis=0, ddof=1) / math.sqrt(draws)
    return old.mean(axis=0), new.mean(axis=0), se


def detect_escapes(rotations, losses, new_rotations, new_losses, threshold_deg: float,
                   margin=0.0) -> int:
    """Count views whose candidate is no worse and at least ``threshold_deg`` away.

    "No worse" means ``new <= old - margin``; ``margin`` (scalar or per view)
    absorbs the sampling error of noisy loss estimates and is zero otherwise.
    """
    losses = np.asarray(losses, dtype=float)
    new_losses = np.asarray(new_losses, dtype=float)
    if len(losses) != len(new_losses) or len(rotations) != len(new_rotations):
        raise ValidationError("escape detection needs equal-length inputs")
    angles = np.atleast_1d(relative_angle(np.asarray(new_rotations), np.asarray(rotations)))
    better = new_losses <= losses - np.asarray(margin, dtype=float)
    return int(np.sum(better & (angles >= math.radians(threshold_deg))))


def update_poses(state: RegistrationState, rotations, translations, losses) -> np.ndarray:
    """Adopt each candidate pose whose loss is ``<=`` the current one; returns the mask."""
    losses = np.asarray(losses, dtype=float)
    take = losses <= state.losses
    state.rotations = np.where(take[:, None, None], rotations, state.rotations)
    state.translations = np.where(take[:, None], translations, state.translations)
    state.losses = np.where(take, losses, state.losses)
    return take


# -- full loop ---------------------------------------------------------------------------

@dataclass
class RegistrationReport:
    """Outcome of :func:`register`; ``template`` is in input units."""

    template: np.ndarray
    losses: np.ndarray
    rounds: list
    converged: bool
    cap_reached: bool
    wall_time: float
    scale: float
    centroids: np.ndarray
    regularizer: float
    mask_stats: dict
    config: dict
    degradation: dict

    def to_dict(self) -> dict:
        return {
            "losses": self.losses.tolist(),
            "rounds": self.rounds,
            "escapes": [r["escapes"] for r in self.rounds],
            "n_rounds": len(self.rounds),
            "converged": self.converged,
            "cap_reached": self.cap_reached,
            "wall_time": self.wall_time,
            "scale": self.scale,
            "centroids": np.asarray(self.centroids).tolist(),
            "regularizer": self.regularizer,
            "mask_stats": self.mask_stats,
            "config": self.config,
            "degradation": self.degradation,
        }


def register(views, model: DescriptorModel, degr: DegradationModel | None = None,
             cfg: RegConfig | None = None, grid: RotationGrid | None = None,
             progress=None):
    """Jointly estimate a template and one pose per view.

    Returns ``(z, poses, report)``. Poses map the template (``report.template``,
    in input units) onto each input view.
    """
    t0 = time.perf_counter()
    cfg = cfg or RegConfig()
    degr = degr or DegradationModel()
    raw = check_views(views)
    normed, scale, centroids = joint_normalize(raw)
    problem = RegistrationProblem(normed, model, degr.scaled(1.0 / scale), cfg, grid)
    say = progress or (lambda msg: log.info(msg))

    n = problem.n_views
    z0 = init_medoid(problem.data_codes)
    state = RegistrationState(z0, np.repeat(np.eye(3)[None], n, 0), np.zeros((n, 3)), np.zeros(n))
    first = flames(problem, state.z, state.translations, top_m=1, call=state.counters["flames"])
    state.counters["flames"] += 1
    state.rotations = np.stack([problem.grid.rotations[first.indices[i][0]] for i in range(n)])
    evaluate_state(problem, state)
    say(f"init: loss {state.losses.sum():.4g}")

    rounds = []
    converged = False
    for rnd in range(cfg.max_rounds):
        joint_descent(problem, state)
        jd_steps = state.counters["last_joint_steps"]
        cand = flames(problem, state.z, state.translations, call=state.counters["flames"])
        state.counters["flames"] += 1
        ms = multistart(problem, state, cand)
        state.losses, proposed, se = compare_poses(problem, state, ms.rotations, ms.translations, rnd)
        escapes = detect_escapes(state.rotations, state.losses, ms.rotations, proposed,
                                 cfg.escape_deg, margin=2.0 * se)
        adopted = update_poses(state, ms.rotations, ms.translations, proposed)
        rounds.append({"round": rnd, "escapes": escapes, "joint_steps": jd_steps,
                       "adopted": int(adopted.sum()), "loss": float(state.losses.sum()),
                       "failed_starts": len(ms.failures)})
        say(f"round {rnd}: escapes {escapes}, loss {state.losses.sum():.4g}")
        if escapes == 0:
            converged = True
            break
    joint_descent(problem, state)

    template = decode(model, state.z) * scale
    poses = [RigidMotion(r, scale * t + c)
             for r, t, c in zip(state.rotations, state.translations, centroids)]
    report = RegistrationReport(
        template=template, losses=state.losses.copy(), rounds=rounds, converged=converged,
        cap_reached=not converged, wall_time=time.perf_counter() - t0, scale=float(scale),
        centroids=np.asarray(centroids), regularizer=float(state.reg),
        mask_stats=dict(problem.stats), config=cfg.to_dict(), degradation=degr.to_dict())
    if not converged:
        log.warning("registration stopped at the round cap (%d) without convergence", cfg.max_rounds)
    return state.z.copy(), poses, report


def write_result(out_dir, z, poses, report: RegistrationReport) -> None:
    """Write ``result.json`` and ``template.pcd3`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    doc.pop("wall_time")  # keep the file reproducible byte for byte
    doc["z"] = np.asarray(z).tolist()
    doc["poses"] = [p.to_dict() for p in poses]
    (out / "result.json").write_text(json.dumps(doc, indent=2))
    write_pcd3(out / "template.pcd3", report.template)
