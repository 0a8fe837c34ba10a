"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import math

import numpy as np


class ValidationError(ValueError):
    """An input violates a documented contract."""


def check_cloud(x, name: str = "cloud", min_points: int = 1) -> np.ndarray:
    """Return ``x`` as a finite float64 ``(k, 3)`` array with ``k >= min_points``."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValidationError(f"{name} must have shape (k, 3), got {arr.shape}")
    if arr.shape[0] < min_points:
        raise ValidationError(f"{name} needs at least {min_points} point(s), got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite coordinates")
    return arr


def check_views(views, name: str = "views", min_views: int = 1) -> list[np.ndarray]:
    if isinstance(views, np.ndarray) and views.ndim == 3:
        views = list(views)
    out = [check_cloud(v, name=f"{name}[{i}]") for i, v in enumerate(views)]
    if len(out) < min_views:
        raise ValidationError(f"need at least {min_views} view(s), got {len(out)}")
    return out


def check_ratio(value: float, name: str, low: float, high: float,
                low_open: bool = False, high_open: bool = False) -> float:
    v = float(value)
    ok_low = v > low if low_open else v >= low
    ok_high = v < high if high_open else v <= high
    if not (math.isfinite(v) and ok_low and ok_high):
        lb = "(" if low_open else "["
        rb = ")" if high_open else "]"
        raise ValidationError(f"{name} must lie in {lb}{low}, {high}{rb}, got {value!r}")
    return v


def as_generator(seed) -> np.random.Generator:
    """Turn ``None``, an int, a SeedSequence or a Generator into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# Counts derived from ratios use a small slack so that e.g. 0.8 * 1000 is
# treated as exactly 800 despite binary round-off.
_SLACK = 1e-9


def floor_count(x: float) -> int:
    return int(math.floor(x + _SLACK))


def ceil_count(x: float) -> int:
    return int(math.ceil(x - _SLACK))
