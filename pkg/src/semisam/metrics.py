"""Overlap and surface-distance metrics.

The ``brute_*`` functions are O(n^2) references kept independent of the
distance-transform kernels so the two can be checked against each other.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

_SIX = ndimage.generate_binary_structure(3, 1)


class EmptyMaskError(ValueError):
    """Raised when a surface distance is requested for an empty mask."""


def _pair(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    a, b = _pair(a, b)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def jaccard(a, b) -> float:
    a, b = _pair(a, b)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def boundary(mask) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour; outside the volume is background."""
    mask = np.asarray(mask).astype(bool)
    eroded = ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    return mask & ~eroded


def _directed(src_border, dst_border, spacing) -> np.ndarray:
    # distance from every voxel to the nearest dst boundary voxel
    dt = ndimage.distance_transform_edt(~dst_border, sampling=spacing)
    return dt[src_border]


def surface_distances(a, b, spacing=(1.0, 1.0, 1.0)):
    """Directed boundary-to-boundary distances (a to b, b to a)."""
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise EmptyMaskError("undefined surface distance: empty mask")
    ba, bb = boundary(a), boundary(b)
    spacing = tuple(float(s) for s in spacing)
    return _directed(ba, bb, spacing), _directed(bb, ba, spacing)


def _pooled(d_ab, d_ba) -> np.ndarray:
    # sorted so that asd(a, b) == asd(b, a) bit for bit
    return np.sort(np.concatenate([d_ab, d_ba]))


def asd(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    return float(_pooled(*surface_distances(a, b, spacing)).mean())


def hd95(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    return float(np.percentile(_pooled(*surface_distances(a, b, spacing)), 95))


# ---------------------------------------------------------------------------
# brute-force references


def brute_dice(a, b) -> float:
    a, b = _pair(a, b)
    inter = na = nb = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        na += x
        nb += y
        inter += x and y
    return 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)


def brute_jaccard(a, b) -> float:
    a, b = _pair(a, b)
    inter = union = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        inter += x and y
        union += x or y
    return 1.0 if union == 0 else inter / union


def brute_boundary(mask) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    out = np.zeros_like(mask)
    shape = mask.shape
    for idx in zip(*np.nonzero(mask)):
        for axis in range(3):
            for step in (-1, 1):
                n = list(idx)
                n[axis] += step
                if not 0 <= n[axis] < shape[axis] or not mask[tuple(n)]:
                    out[idx] = True
    return out


def brute_surface_distances(a, b, spacing=(1.0, 1.0, 1.0)):
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise EmptyMaskError("undefined surface distance: empty mask")
    s = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(brute_boundary(a)) * s
    pb = np.argwhere(brute_boundary(b)) * s

    def nearest(src, dst):
        out = np.empty(len(src))
        for start in range(0, len(src), 512):
            chunk = src[start:start + 512]
            d2 = ((chunk[:, None, :] - dst[None, :, :]) ** 2).sum(-1)
            out[start:start + 512] = np.sqrt(d2.min(axis=1))
        return out

    return nearest(pa, pb), nearest(pb, pa)


def percentile_linear(values, q: float) -> float:
    """q-th percentile by linear interpolation between order statistics."""
    v = sorted(values)
    pos = (len(v) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def brute_asd(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    d_ab, d_ba = brute_surface_distances(a, b, spacing)
    allv = list(d_ab) + list(d_ba)
    return sum(allv) / len(allv)


def brute_hd95(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    d_ab, d_ba = brute_surface_distances(a, b, spacing)
    return percentile_linear(list(d_ab) + list(d_ba), 95)


# ---------------------------------------------------------------------------
# reports


@dataclass
class CaseMetrics:
    case_id: str
    dice: float
    jaccard: float
    asd: float
    hd95: float
    sentinel: bool = False


@dataclass
class MetricsReport:
    """Per-case rows plus their means. Overlaps are percentages."""

    cases: list = field(default_factory=list)
    unit: str = "voxel"

    def mean(self) -> dict:
        if not self.cases:
            return {"dice": math.nan, "jaccard": math.nan, "asd": math.nan, "hd95": math.nan}
        return {k: float(np.mean([getattr(c, k) for c in self.cases])) for k in ("dice", "jaccard", "asd", "hd95")}

    def to_dict(self) -> dict:
        return {
            "unit": self.unit,
            "cases": [asdict(c) for c in self.cases],
            "mean": self.mean(),
            "n_sentinel": sum(c.sentinel for c in self.cases),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path) -> None:
        cols = ["case_id", "dice", "jaccard", "asd", "hd95", "sentinel"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for c in self.cases:
                w.writerow(asdict(c))
            w.writerow({"case_id": "mean", **self.mean(), "sentinel": sum(c.sentinel for c in self.cases)})


def evaluate_cases(predictions: dict, references: dict, spacings: Optional[dict] = None, unit: str = "voxel") -> MetricsReport:
    """Score each case; undefined surface distances get the worst finite value in the split.

    If no case has a finite distance the volume diagonal (in the report unit)
    is used instead.
    """
    if unit not in ("voxel", "mm"):
        raise ValueError(f"unknown distance unit {unit!r}")
    rows, pending, diag = [], [], 0.0
    for cid, pred in predictions.items():
        ref = references[cid]
        spacing = (1.0, 1.0, 1.0) if unit == "voxel" or spacings is None else spacings[cid]
        diag = max(diag, float(np.linalg.norm(np.asarray(ref.shape) * np.asarray(spacing))))
        row = CaseMetrics(cid, 100.0 * dice(pred, ref), 100.0 * jaccard(pred, ref), math.nan, math.nan)
        try:
            d_ab, d_ba = surface_distances(pred, ref, spacing)
        except EmptyMaskError:
            row.sentinel = True
            pending.append(row)
        else:
            d = _pooled(d_ab, d_ba)
            row.asd, row.hd95 = float(d.mean()), float(np.percentile(d, 95))
        rows.append(row)
    finite = [r for r in rows if not r.sentinel]
    worst_asd = max((r.asd for r in finite), default=diag)
    worst_hd = max((r.hd95 for r in finite), default=diag)
    for row in pending:
        row.asd, row.hd95 = worst_asd, worst_hd
    return MetricsReport(rows, unit)
