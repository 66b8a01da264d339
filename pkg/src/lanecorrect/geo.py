"""Image <-> absolute coordinate transforms and merging of corrected lanes.

Image y grows downward while geographic Y grows upward, so the vertical
axis flips through the region height. Merged lanes are grouped by tracking
ID, ordered by region index and linearly resampled to exactly 100 points
at uniform arclength spacing.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .data import LaneInstance

log = logging.getLogger(__name__)

GLOBAL_LANE_POINTS = 100


@dataclass(frozen=True)
class RegionAnchor:
    """Left-bottom absolute coordinate plus raster geometry of one region."""

    x_lb: float
    y_lb: float
    height: int
    width: int
    resolution: float
    region_index: int = 0

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.height <= 0 or self.width <= 0:
            raise ValueError("region extents must be positive")


@dataclass
class GlobalLane:
    """One merged lane: tracking ID plus exactly 100 absolute (X, Y) points."""

    track_id: int
    points: np.ndarray  # (100, 2) meters

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(self.points) != GLOBAL_LANE_POINTS:
            raise ValueError(f"global lane must have {GLOBAL_LANE_POINTS} points, "
                             f"got {len(self.points)}")


def image_to_geo(points, anchor: RegionAnchor) -> np.ndarray:
    """Pixel (x, y) -> absolute (X, Y). Accepts one point or an (N, 2) array."""
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 2)
    out = np.empty_like(p)
    out[:, 0] = anchor.x_lb + p[:, 0] * anchor.resolution
    out[:, 1] = anchor.y_lb + (anchor.height - p[:, 1]) * anchor.resolution
    return out[0] if single else out


def geo_to_image(points, anchor: RegionAnchor) -> np.ndarray:
    """Absolute (X, Y) -> pixel (x, y); exact inverse of ``image_to_geo``."""
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 2)
    out = np.empty_like(p)
    out[:, 0] = (p[:, 0] - anchor.x_lb) / anchor.resolution
    out[:, 1] = anchor.height - (p[:, 1] - anchor.y_lb) / anchor.resolution
    return out[0] if single else out


def resample_polyline(points: np.ndarray, n: int) -> np.ndarray:
    """Linearly interpolate a polyline to ``n`` points at uniform arclength
    spacing, preserving the endpoints."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise ValueError("polyline needs at least 2 points")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0:
        raise ValueError("polyline has zero length")
    targets = np.linspace(0.0, total, n)
    out = np.empty((n, 2))
    out[:, 0] = np.interp(targets, cum, pts[:, 0])
    out[:, 1] = np.interp(targets, cum, pts[:, 1])
    return out


def merge_global(corrected: list[tuple[LaneInstance, RegionAnchor]]) -> list[GlobalLane]:
    """Merge per-region corrected lanes into 100-point global lanes.

    Fragments sharing a tracking ID are converted to absolute coordinates,
    ordered by region index, concatenated with near-duplicate seam points
    (closer than half a pixel) dropped, then resampled to 100 points.
    Groups whose merged polyline has zero length are skipped with a
    warning.
    """
    groups: dict[int, list[tuple[RegionAnchor, LaneInstance]]] = {}
    for lane, anchor in corrected:
        if len(lane.points) < 2:
            raise ValueError(f"lane {lane.track_id} has fewer than 2 points")
        groups.setdefault(lane.track_id, []).append((anchor, lane))

    merged: list[GlobalLane] = []
    for track_id in sorted(groups):
        fragments = sorted(groups[track_id], key=lambda pair: pair[0].region_index)
        threshold = fragments[0][0].resolution / 2.0
        pieces = []
        for anchor, lane in fragments:
            pieces.append(image_to_geo(lane.points, anchor))
        pts = np.concatenate(pieces, axis=0)
        keep = np.ones(len(pts), dtype=bool)
        gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        keep[1:] = gaps >= threshold
        pts = pts[keep]
        if len(pts) < 2 or float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()) <= 0:
            log.warning("skipping track %d: merged polyline has zero length", track_id)
            continue
        merged.append(GlobalLane(track_id, resample_polyline(pts, GLOBAL_LANE_POINTS)))
    return merged


def smooth_reference(gt_global) -> list[GlobalLane]:
    """Apply the same 100-point linear smoothing to ground-truth polylines.

    ``gt_global`` is an iterable of (track_id, (N, 2) absolute points).
    """
    out: list[GlobalLane] = []
    for track_id, points in gt_global:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 2 or float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()) <= 0:
            log.warning("skipping track %d: reference polyline has zero length", track_id)
            continue
        out.append(GlobalLane(int(track_id), resample_polyline(pts, GLOBAL_LANE_POINTS)))
    return out


def save_global_lanes(path, lanes: list[GlobalLane]) -> None:
    payload = [{"track_id": lane.track_id, "points": lane.points.tolist()}
               for lane in lanes]
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_global_lanes(path) -> list[GlobalLane]:
    with open(path) as fh:
        payload = json.load(fh)
    return [GlobalLane(int(item["track_id"]), np.asarray(item["points"]))
            for item in payload]
