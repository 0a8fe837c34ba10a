"""Rotation-only registration metrics: pairwise errors, recall and its CDF.

Rotations passed to :func:`pairwise_rre` must share one convention. With
``est[i] @ truth[i].T`` equal to the same matrix for every view the
registration is perfect, whatever that common matrix is.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import ValidationError
from .geom3d import relative_angle

__all__ = [
    "PairwiseErrors",
    "pairwise_rre",
    "registration_recall",
    "recall_cdf",
    "write_errors_csv",
    "write_cdf_csv",
    "summarize",
    "write_summary",
]


@dataclass(frozen=True)
class PairwiseErrors:
    """Angles (radians) for every unordered pair ``i < j``, in row-major pair order."""

    n_views: int
    pairs: np.ndarray
    thetas: np.ndarray

    def __post_init__(self):
        m = self.n_views * (self.n_views - 1) // 2
        if len(self.thetas) != m or self.pairs.shape != (m, 2):
            raise ValidationError(f"expected {m} pair errors for {self.n_views} views")

    def __len__(self) -> int:
        return len(self.thetas)

    def degrees(self) -> np.ndarray:
        return np.degrees(self.thetas)


def _rotations(r, name) -> np.ndarray:
    arr = np.asarray([getattr(x, "rotation", x) for x in r], dtype=float)
    if arr.ndim != 3 or arr.shape[1:] != (3, 3):
        raise ValidationError(f"{name} must be a sequence of 3x3 rotations")
    return arr


def pairwise_rre(estimated, truth) -> PairwiseErrors:
    """Relative rotation error ``angle(E_i T_i^T, E_j T_j^T)`` for all pairs."""
    est = _rotations(estimated, "estimated")
    tru = _rotations(truth, "truth")
    if len(est) != len(tru):
        raise ValidationError(f"{len(est)} estimated rotations but {len(tru)} true ones")
    if len(est) < 2:
        raise ValidationError("pairwise errors need at least 2 views")
    offsets = est @ np.swapaxes(tru, 1, 2)
    i, j = np.triu_indices(len(est), k=1)
    thetas = np.atleast_1d(relative_angle(offsets[i], offsets[j]))
    return PairwiseErrors(len(est), np.stack([i, j], axis=1), thetas)


def _thetas(errors) -> np.ndarray:
    return np.asarray(errors.thetas if isinstance(errors, PairwiseErrors) else errors, dtype=float)


def registration_recall(errors, t: float) -> float:
    """Fraction of pair errors strictly below ``t`` (radians)."""
    if not t > 0:
        raise ValidationError(f"threshold must be positive, got {t!r}")
    th = _thetas(errors)
    if th.size == 0:
        raise ValidationError("no errors to summarize")
    return float(np.mean(th < t))


def recall_cdf(errors) -> list[tuple[float, float]]:
    """Steps ``(angle, fraction of errors <= angle)`` at each distinct error.

    Evaluating the step function strictly left of ``t`` gives
    :func:`registration_recall` at ``t``; see :func:`cdf_at`.
    """
    th = np.sort(_thetas(errors))
    if th.size == 0:
        raise ValidationError("no errors to summarize")
    values, counts = np.unique(th, return_counts=True)
    frac = np.cumsum(counts) / th.size
    return [(float(a), float(f)) for a, f in zip(values, frac)]


def cdf_at(cdf, t: float) -> float:
    """Left limit of the step CDF at ``t``: the fraction of errors strictly below ``t``."""
    best = 0.0
    for angle, frac in cdf:
        if angle < t:
            best = frac
        else:
            break
    return best


def write_errors_csv(path, errors: PairwiseErrors) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "theta_deg"])
        for (i, j), th in zip(errors.pairs, errors.degrees()):
            w.writerow([int(i), int(j), f"{th:.10g}"])


def write_cdf_csv(path, errors) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta_deg", "fraction"])
        for a, f in recall_cdf(errors):
            w.writerow([f"{math.degrees(a):.10g}", f"{f:.10g}"])


def summarize(errors: PairwiseErrors, thresholds_deg=(10.0, 15.0, 30.0)) -> dict:
    th = errors.degrees()
    return {
        "n_views": errors.n_views,
        "n_pairs": len(errors),
        "thresholds_deg": [float(t) for t in thresholds_deg],
        "recall": {f"{float(t):g}": registration_recall(errors, math.radians(t))
                   for t in thresholds_deg},
        "median_error_deg": float(np.median(th)),
        "mean_error_deg": float(np.mean(th)),
    }


def write_summary(out_dir, errors: PairwiseErrors, thresholds_deg=(10.0, 15.0, 30.0)) -> dict:
    """Write ``errors.csv``, ``cdf.csv`` and ``summary.json``; returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_errors_csv(out / "errors.csv", errors)
    write_cdf_csv(out / "cdf.csv", errors)
    summary = summarize(errors, thresholds_deg)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary
