"""Nearest neighbours, Chamfer distance, local density and point-cloud files."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ._validation import ValidationError, check_cloud

__all__ = [
    "NnIndex",
    "nn_distance",
    "nn_distance_vector",
    "nn_query",
    "chamfer",
    "density_counts",
    "density_stddev",
    "read_cloud",
    "write_cloud",
    "read_text_cloud",
    "write_text_cloud",
    "read_pcd3",
    "write_pcd3",
    "CloudFormatError",
]

PCD3_MAGIC = b"PCD3"


class CloudFormatError(ValueError):
    pass


class NnIndex:
    """Exact nearest-neighbour index over one cloud (kd-tree backed)."""

    def __init__(self, points):
        self.points = check_cloud(points, name="indexed cloud")
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, q) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the nearest indexed point for each row of ``q``."""
        q = np.asarray(q, dtype=float).reshape(-1, 3)
        d, i = self._tree.query(q, k=1)
        return d, i


def _as_index(q) -> NnIndex:
    return q if isinstance(q, NnIndex) else NnIndex(q)


def nn_distance(p, q) -> float:
    """Distance from point ``p`` to its nearest neighbour in ``q``."""
    p = np.asarray(p, dtype=float).reshape(3)
    d, _ = _as_index(q).query(p[None])
    return float(d[0])


def nn_query(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = check_cloud(p, name="source cloud")
    return _as_index(q).query(p)


def nn_distance_vector(p, q) -> np.ndarray:
    """``D[i] = d_NN(p_i, q)``, in the order of ``p``."""
    return nn_query(p, q)[0]


def chamfer(p, q) -> float:
    """Bidirectional Chamfer distance with unsquared Euclidean distances."""
    p = check_cloud(p, name="p")
    q = check_cloud(q, name="q")
    return float(nn_distance_vector(p, q).mean() + nn_distance_vector(q, p).mean())


def density_counts(x, r: float) -> np.ndarray:
    """Neighbours strictly closer than ``r`` to each point, the point itself excluded."""
    x = check_cloud(x)
    if not r > 0:
        raise ValidationError(f"density radius must be positive, got {r!r}")
    tree = cKDTree(x)
    # query_ball_point keeps distances <= radius; step just below r for strictness
    counts = tree.query_ball_point(x, np.nextafter(r, 0.0), return_length=True)
    return np.asarray(counts, dtype=np.int64) - 1


def density_stddev(x, r: float) -> float:
    """Sample standard deviation (``k - 1`` denominator) of the local counts."""
    x = check_cloud(x)
    if len(x) < 2:
        raise ValidationError("density_stddev needs at least 2 points")
    return float(np.std(density_counts(x, r), ddof=1))


# -- files -----------------------------------------------------------------

def read_text_cloud(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise CloudFormatError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise CloudFormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise CloudFormatError(f"{path}: no points")
    return check_cloud(np.array(rows))


def write_text_cloud(path, x) -> None:
    x = check_cloud(x)
    np.savetxt(path, x, fmt="%.9g")


def read_pcd3(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != PCD3_MAGIC:
        raise CloudFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise CloudFormatError(f"{path}: truncated header")
    (count,) = struct.unpack("<I", data[4:8])
    expected = 8 + 12 * count
    if len(data) != expected:
        raise CloudFormatError(f"{path}: expected {expected} bytes for {count} points, got {len(data)}")
    pts = np.frombuffer(data, dtype="<f4", count=3 * count, offset=8).reshape(count, 3)
    return check_cloud(pts.astype(np.float64))


def write_pcd3(path, x) -> None:
    x = check_cloud(x)
    with open(path, "wb") as fh:
        fh.write(PCD3_MAGIC)
        fh.write(struct.pack("<I", len(x)))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_cloud(path) -> np.ndarray:
    """Read a ``.pcd3`` binary file or a whitespace text file."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == PCD3_MAGIC:
        return read_pcd3(path)
    return read_text_cloud(path)


def write_cloud(path, x) -> None:
    if str(path).endswith(".pcd3"):
        write_pcd3(path, x)
    else:
        write_text_cloud(path, x)
