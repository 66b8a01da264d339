"""Evaluation metrics for corrected-vs-ground-truth lane pairs.

Point-level smooth-L1 and L2 operate on index-aligned point pairs. The
per-point residual d is scored as smooth_l1 = 0.5*s^2 if s < 1 else
s - 0.5 with s the L1 norm of d, and L2 as the Euclidean norm. Lane-level
scores are mask IoU after a K-pixel Chebyshev extension of the rasterized
polylines, and the mean bidirectional Chamfer distance. All aggregate
values are arithmetic means over lane instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .raster import dilate_chebyshev, rasterize_polyline

IOU_EXTENSIONS = (1, 2, 3)


def point_distances(corrected, gt) -> tuple[float, float]:
    """Per-lane mean (smooth_l1, l2) over index-aligned point pairs."""
    a = np.asarray(corrected, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(a) != len(b):
        raise ValueError(f"point counts differ: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("empty lanes")
    d = a - b
    s = np.abs(d).sum(axis=1)
    smooth = np.where(s < 1.0, 0.5 * s * s, s - 0.5)
    l2 = np.linalg.norm(d, axis=1)
    return float(smooth.mean()), float(l2.mean())


def lane_mask(points, extension: int, h: int, w: int) -> np.ndarray:
    return dilate_chebyshev(rasterize_polyline(points, h, w), extension)


def lane_iou(corrected, gt, extension: int, h: int, w: int) -> float:
    """IoU of the two lanes' K-pixel-extended rasterized masks.

    Two fully off-canvas lanes produce empty masks and score 1 by
    convention (vacuous agreement instead of 0/0)."""
    if extension not in IOU_EXTENSIONS:
        raise ValueError(f"extension must be one of {IOU_EXTENSIONS}, got {extension}")
    ma = lane_mask(corrected, extension, h, w)
    mb = lane_mask(gt, extension, h, w)
    union = int(np.logical_or(ma, mb).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(ma, mb).sum())
    return inter / union


def chamfer(corrected, gt) -> float:
    """Mean bidirectional Chamfer distance between two point sets."""
    a = np.asarray(corrected, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance of an empty lane")
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


@dataclass
class MetricsReport:
    """Per-instance metrics plus instance-averaged values."""

    unit: str  # "p" (pixels) or "m" (meters)
    count: int
    smooth_l1: float
    l2: float
    chamfer: float
    lane_iou: dict[int, float] | None = None  # extension -> mean IoU, pixel mode only
    canvas: tuple[int, int] | None = None     # (H, W) used for rasterization
    per_instance: dict[str, list[float]] = field(default_factory=dict)


def evaluate(pairs, unit: str, canvas: tuple[int, int] | None = None) -> MetricsReport:
    """Score a list of index-aligned (corrected, ground-truth) point-array
    pairs. ``unit`` is "p" for pixel-space lanes (enables the raster-defined
    lane-IoU, which needs ``canvas``) or "m" for metric-space lanes."""
    if unit not in ("p", "m"):
        raise ValueError(f"unit must be 'p' or 'm', got {unit!r}")
    if not pairs:
        raise ValueError("no lane pairs to evaluate")
    if unit == "p" and canvas is None:
        raise ValueError("pixel-mode evaluation needs a canvas size")

    per = {"smooth_l1": [], "l2": [], "chamfer": []}
    if unit == "p":
        for k in IOU_EXTENSIONS:
            per[f"lane_iou@{k}"] = []

    for corrected, gt in pairs:
        s, l2 = point_distances(corrected, gt)
        per["smooth_l1"].append(s)
        per["l2"].append(l2)
        per["chamfer"].append(chamfer(corrected, gt))
        if unit == "p":
            h, w = canvas
            for k in IOU_EXTENSIONS:
                per[f"lane_iou@{k}"].append(lane_iou(corrected, gt, k, h, w))

    n = len(pairs)
    iou = None
    if unit == "p":
        iou = {k: sum(per[f"lane_iou@{k}"]) / n for k in IOU_EXTENSIONS}
    return MetricsReport(
        unit=unit,
        count=n,
        smooth_l1=sum(per["smooth_l1"]) / n,
        l2=sum(per["l2"]) / n,
        chamfer=sum(per["chamfer"]) / n,
        lane_iou=iou,
        canvas=canvas,
        per_instance=per,
    )


def format_reports(rows: list[tuple[str, MetricsReport]], title: str) -> str:
    """Render labelled reports as a fixed-width table, one row per state."""
    if not rows:
        raise ValueError("nothing to format")
    unit = rows[0][1].unit
    count = rows[0][1].count
    lines = [title]
    if unit == "p":
        canvas = rows[0][1].canvas
        lines.append(f"unit: pixels | canvas: {canvas[0]}x{canvas[1]} | instances: {count}")
        header = (f"{'state':<12}{'lane-IoU@1':>12}{'lane-IoU@2':>12}{'lane-IoU@3':>12}"
                  f"{'smooth-L1 (p)':>15}{'L2 (p)':>10}{'CD (p)':>10}")
        lines.append(header)
        for name, rep in rows:
            lines.append(f"{name:<12}{rep.lane_iou[1]:>12.4f}{rep.lane_iou[2]:>12.4f}"
                         f"{rep.lane_iou[3]:>12.4f}{rep.smooth_l1:>15.4f}"
                         f"{rep.l2:>10.4f}{rep.chamfer:>10.4f}")
    else:
        lines.append(f"unit: meters | instances: {count}")
        lines.append(f"{'state':<12}{'smooth-L1 (m)':>15}{'L2 (m)':>10}{'CD (m)':>10}")
        for name, rep in rows:
            lines.append(f"{name:<12}{rep.smooth_l1:>15.4f}{rep.l2:>10.4f}{rep.chamfer:>10.4f}")
    return "\n".join(lines) + "\n"
