"""Segmentation agreement metrics: Dice overlap, pooled precision, zone
tables, and cartilage volume quantities."""

from __future__ import annotations

import dataclasses

import numpy as np

from .data import MaskVolume

ZONE_EDGES = (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0)


class NoPredictionsError(ValueError):
    """Raised when precision is requested but no pixel was predicted positive."""


@dataclasses.dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclasses.dataclass
class ZoneBin:
    mean_dsc: float | None
    sd_dsc: float | None
    count: int


@dataclasses.dataclass
class ZoneTable:
    bins: list[ZoneBin]          # four bins: {0}, (0,1/3], (1/3,2/3], (2/3,1]


@dataclasses.dataclass
class VolumeResult:
    v_gt: float
    v_pred: float
    delta_v: float


def _as_binary(arr) -> np.ndarray:
    a = arr.data if isinstance(arr, MaskVolume) else np.asarray(arr)
    return a.astype(bool)


def confusion_counts(pred, gt) -> ConfusionCounts:
    p, g = _as_binary(pred), _as_binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    tp = int((p & g).sum())
    fp = int((p & ~g).sum())
    fn = int((~p & g).sum())
    tn = int((~p & ~g).sum())
    return ConfusionCounts(tp, fp, fn, tn)


def dsc_2d(pred, gt) -> float:
    """Dice overlap of two binary slices; both-empty counts as 1."""
    p, g = _as_binary(pred), _as_binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def dsc_3d(pred, gt) -> float:
    """Dice overlap over all voxels of a volume at once."""
    p, g = _as_binary(pred), _as_binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"dims mismatch: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def precision_overall(pairs) -> float:
    """TP/(TP+FP) pooled over every (pred, gt) pair, not averaged per image."""
    tp = fp = 0
    for pred, gt in pairs:
        c = confusion_counts(pred, gt)
        tp += c.tp
        fp += c.fp
    if tp + fp == 0:
        raise NoPredictionsError("no positive pixel predicted anywhere in the set")
    return tp / (tp + fp)


def zone_of(ratio: float) -> int:
    """Bin index 0..3 for a slice's relative cartilage amount."""
    if ratio == 0.0:
        return 0
    if ratio <= ZONE_EDGES[1]:
        return 1
    if ratio <= ZONE_EDGES[2]:
        return 2
    return 3


def zone_assignments(gt_counts) -> list[int]:
    """Per-slice bins: count relative to the volume's max-cartilage slice."""
    counts = np.asarray(gt_counts, dtype=np.int64)
    peak = counts.max()
    if peak == 0:
        raise ValueError("volume has no cartilage in any slice")
    return [zone_of(c / peak) for c in counts]


def zone_analysis(per_slice: list[tuple[float, int]]) -> ZoneTable:
    """Zone table for one volume from (2D DSC, GT cartilage count) slices."""
    return zone_analysis_pooled([per_slice])


def zone_analysis_pooled(volumes: list[list[tuple[float, int]]]) -> ZoneTable:
    """Zone table pooling slices of several volumes; the relative cartilage
    amount is always computed within each slice's own volume."""
    buckets: list[list[float]] = [[], [], [], []]
    for per_slice in volumes:
        zones = zone_assignments([c for _, c in per_slice])
        for (dsc, _), z in zip(per_slice, zones):
            buckets[z].append(dsc)
    bins = []
    for vals in buckets:
        if vals:
            arr = np.asarray(vals)
            bins.append(ZoneBin(float(arr.mean()), float(arr.std()), len(vals)))
        else:
            bins.append(ZoneBin(None, None, 0))
    return ZoneTable(bins)


def cartilage_volume(mask: MaskVolume) -> float:
    """Labeled volume in mm^3: voxel count times voxel volume."""
    if not isinstance(mask, MaskVolume):
        raise TypeError("cartilage_volume needs a MaskVolume with voxel sizes")
    dz, dy, dx = mask.voxel_size_mm
    return float(int(mask.data.sum()) * (dz * dy * dx))


def volume_error(v_gt: float, v_pred: float) -> float:
    """Relative volume error in percent."""
    if v_gt <= 0:
        raise ValueError(f"reference volume must be positive, got {v_gt}")
    return abs(v_gt - v_pred) / v_gt * 100.0


def repeatability_pair(v1: float, v2: float) -> float:
    """Absolute volume difference scaled to the larger value, in percent."""
    peak = max(v1, v2)
    if peak <= 0:
        raise ValueError("at least one volume must be positive")
    return abs(v1 - v2) / peak * 100.0
