"""Synthetic worlds and rendered point-cloud-style datasets.

A world is a smooth driving centerline with laterally offset lanes and an
intensity field that is bright along lanes over a dark background.
Fixed-size regions are sampled along the centerline, rendered to RGB via
the intensity-ratio rule (G tracks the min-max ratio, B its complement,
R stays 0), and paired with ground-truth lanes, perturbed initial lanes
and a binary segmentation label.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .data import (ROLE_GROUND_TRUTH, ROLE_INITIAL, LaneInstance,
                   PointCloudImage, Sample)
from .geo import RegionAnchor, geo_to_image
from .raster import dilate_chebyshev, rasterize_polyline

log = logging.getLogger(__name__)

TRAIN_PER_CYCLE = 3  # 3:2 train/test split, interleaved by region index
SPLIT_CYCLE = 5


@dataclass
class SynthParams:
    """Everything that pins down one synthetic dataset."""

    n_regions: int = 10
    lanes_per_scene: int = 4
    lane_spacing: float = 3.5       # meters between adjacent lanes
    curvature_max: float = 0.004    # 1/m bound on centerline curvature
    drift_amplitude: float = 4.5    # px, sinusoidal deviation of initial lanes
    drift_wavelength: float = 90.0  # px
    point_noise: float = 0.4        # px, per-point gaussian sigma
    intensity_noise: float = 0.05   # background intensity sigma
    ridge_width: float = 0.2        # meters, gaussian half-width of lane glow
    region_height: int = 320        # pixels
    region_width: int = 160         # pixels
    resolution: float = 0.1         # meters per pixel
    sample_interval: float = 32.0   # meters between region centers
    seed: int = 0

    def __post_init__(self):
        if self.drift_amplitude < 0 or self.point_noise < 0 or self.intensity_noise < 0:
            raise ValueError("perturbation amplitudes must be >= 0")
        if self.n_regions < 1:
            raise ValueError("n_regions must be >= 1")


SYNTH_FIELD_TYPES = {
    "n_regions": int, "lanes_per_scene": int, "lane_spacing": float,
    "curvature_max": float, "drift_amplitude": float, "drift_wavelength": float,
    "point_noise": float, "intensity_noise": float, "ridge_width": float,
    "region_height": int, "region_width": int, "resolution": float,
    "sample_interval": float, "seed": int,
}


@dataclass
class World:
    """Global lanes, trajectory and the lane-proximity intensity field."""

    lanes: list[tuple[int, np.ndarray]]  # (track_id, (N, 2) absolute XY)
    trajectory: np.ndarray               # (N, 2) absolute XY
    intensity_at: Callable[[np.ndarray], np.ndarray] = field(repr=False, default=None)


def build_world(params: SynthParams) -> World:
    """Deterministic world construction from the seed."""
    rng = np.random.default_rng([params.seed, 7])
    margin = max(params.region_height, params.region_width) * params.resolution + 8.0
    target = params.n_regions * params.sample_interval + params.sample_interval / 2.0
    step = 0.5

    # heading integration: piecewise-smooth bounded curvature, headed +Y
    total = target + 2 * margin
    n_steps = int(np.ceil(total / step)) + 1
    knots = max(2, int(total / 40.0) + 2)
    kappa_ctrl = rng.uniform(-params.curvature_max, params.curvature_max, size=knots)
    s_axis = np.arange(n_steps) * step
    kappa = np.interp(s_axis, np.linspace(0, total, knots), kappa_ctrl)
    theta = np.pi / 2 + np.cumsum(kappa) * step
    xy = np.zeros((n_steps, 2))
    xy[1:, 0] = np.cumsum(np.cos(theta[:-1]) * step)
    xy[1:, 1] = np.cumsum(np.sin(theta[:-1]) * step)

    # the trajectory is the middle slice; lanes span the margins too so
    # every sampled region is fully covered
    lo = int(np.floor(margin / step))
    hi = int(np.ceil((margin + target) / step)) + 1
    trajectory = xy[lo:hi].copy()

    normals = np.stack([-np.sin(theta), np.cos(theta)], axis=1)
    lanes = []
    n = params.lanes_per_scene
    for j in range(n):
        offset = (j - (n - 1) / 2.0) * params.lane_spacing
        pts = xy + offset * normals
        lanes.append((j, pts[::2].copy()))  # ~1 m point spacing

    dense = np.concatenate([pts for _, pts in lanes], axis=0)
    tree = cKDTree(dense)
    width = params.ridge_width

    def intensity_at(points: np.ndarray) -> np.ndarray:
        d, _ = tree.query(np.asarray(points, dtype=np.float64), k=1)
        return 0.15 + 0.85 * np.exp(-0.5 * (d / width) ** 2)

    return World(lanes=lanes, trajectory=trajectory, intensity_at=intensity_at)


def sample_regions(trajectory, interval: float, h: int, w: int, resolution: float
                   ) -> list[tuple[int, float, float]]:
    """Axis-aligned h x w pixel regions centered every ``interval`` meters
    of trajectory arclength; returns (region_index, x_lb, y_lb) triples."""
    pts = np.asarray(trajectory, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise ValueError("degenerate trajectory")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0:
        raise ValueError("degenerate trajectory")
    if total < interval:
        raise ValueError(f"trajectory arclength {total:.3f} shorter than the "
                         f"sampling interval {interval}")
    count = int(np.floor(total / interval))
    out = []
    for k in range(1, count + 1):
        s = k * interval
        cx = float(np.interp(s, cum, pts[:, 0]))
        cy = float(np.interp(s, cum, pts[:, 1]))
        out.append((k - 1, cx - w * resolution / 2.0, cy - h * resolution / 2.0))
    return out


def intensity_to_rgb(u: np.ndarray) -> np.ndarray:
    """Map raw intensities to RGB: G = floor(ratio*255), B = floor((1-ratio)*255)
    with ratio the per-image min-max normalization; all-equal intensities
    render as ratio 0."""
    u = np.asarray(u, dtype=np.float64)
    umin, umax = float(u.min()), float(u.max())
    if umax == umin:
        r = np.zeros_like(u)
    else:
        r = (u - umin) / (umax - umin)
    rgb = np.zeros(u.shape + (3,), dtype=np.uint8)
    rgb[..., 1] = np.floor(r * 255.0).astype(np.uint8)
    rgb[..., 2] = np.floor((1.0 - r) * 255.0).astype(np.uint8)
    return rgb


def render_image(world: World, anchor: RegionAnchor, resolution: float,
                 seed: int, noise_sigma: float = 0.0) -> PointCloudImage:
    """Render one region. Pure function of (world, region, resolution, seed):
    the per-pixel noise stream is derived from (seed, region_index)."""
    h, w = anchor.height, anchor.width
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    xs = anchor.x_lb + (jj + 0.5) * resolution
    ys = anchor.y_lb + (h - ii - 0.5) * resolution
    u = world.intensity_at(np.stack([xs.ravel(), ys.ravel()], axis=1)).reshape(h, w)
    if noise_sigma > 0:
        rng = np.random.default_rng([seed, anchor.region_index, 11])
        u = u + rng.normal(0.0, noise_sigma, size=u.shape)
    return PointCloudImage(intensity_to_rgb(u), anchor.x_lb, anchor.y_lb, resolution)


def _unit_normals(points: np.ndarray) -> np.ndarray:
    tangents = np.gradient(points, axis=0)
    norms = np.linalg.norm(tangents, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    tangents = tangents / norms
    return np.stack([-tangents[:, 1], tangents[:, 0]], axis=1)


def perturb_lanes(gt_lanes: list[LaneInstance], params: SynthParams,
                  seed: int) -> list[LaneInstance]:
    """Initial lanes = ground truth + smooth sinusoidal lateral drift +
    per-point gaussian noise. Deterministic in (seed, track_id)."""
    out = []
    for lane in gt_lanes:
        rng = np.random.default_rng([seed, lane.track_id, 23])
        pts = lane.points
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        t = np.concatenate([[0.0], np.cumsum(seg)])
        phase = rng.uniform(0.0, 2.0 * np.pi)
        drift = params.drift_amplitude * np.sin(
            2.0 * np.pi * t / max(params.drift_wavelength, 1e-9) + phase)
        moved = pts + drift[:, None] * _unit_normals(pts)
        if params.point_noise > 0:
            moved = moved + rng.normal(0.0, params.point_noise, size=pts.shape)
        out.append(LaneInstance(lane.track_id, ROLE_INITIAL, moved))
    return out


def rasterize_label(gt_lanes: list[LaneInstance], h: int, w: int) -> np.ndarray:
    """Binary segmentation label: walked ground-truth polylines dilated by
    a 1-pixel Chebyshev radius."""
    mask = np.zeros((h, w), dtype=bool)
    for lane in gt_lanes:
        mask |= rasterize_polyline(lane.points, h, w)
    return dilate_chebyshev(mask, 1).astype(np.uint8)


def clip_lane_to_region(points: np.ndarray, anchor: RegionAnchor,
                        resolution: float) -> np.ndarray | None:
    """Longest contiguous run of a global polyline inside the region box,
    with boundary crossings interpolated; None if under 2 points survive."""
    x0, y0 = anchor.x_lb, anchor.y_lb
    x1 = x0 + anchor.width * resolution
    y1 = y0 + anchor.height * resolution
    pts = np.asarray(points, dtype=np.float64)
    inside = ((pts[:, 0] >= x0) & (pts[:, 0] <= x1)
              & (pts[:, 1] >= y0) & (pts[:, 1] <= y1))
    if not inside.any():
        return None

    # longest run of consecutive inside points
    best_start = best_len = 0
    run_start = None
    for i, flag in enumerate(np.append(inside, False)):
        if flag and run_start is None:
            run_start = i
        elif not flag and run_start is not None:
            if i - run_start > best_len:
                best_start, best_len = run_start, i - run_start
            run_start = None
    lo, hi = best_start, best_start + best_len - 1

    piece = [pts[i] for i in range(lo, hi + 1)]
    if lo > 0:
        entry = _box_crossing(pts[lo - 1], pts[lo], x0, x1, y0, y1)
        if entry is not None:
            piece.insert(0, entry)
    if hi + 1 < len(pts):
        exit_pt = _box_crossing(pts[hi + 1], pts[hi], x0, x1, y0, y1)
        if exit_pt is not None:
            piece.append(exit_pt)
    piece = np.asarray(piece)
    if len(piece) < 2:
        return None
    return piece


def _box_crossing(outside, inside, x0, x1, y0, y1):
    """Slab-method entry point of the segment outside->inside into the box."""
    o = np.asarray(outside, dtype=np.float64)
    i = np.asarray(inside, dtype=np.float64)
    d = i - o
    t_entry = 0.0
    for axis, (lo, hi) in enumerate(((x0, x1), (y0, y1))):
        if d[axis] == 0.0:
            continue  # inside endpoint pins this axis within the slab
        ta = (lo - o[axis]) / d[axis]
        tb = (hi - o[axis]) / d[axis]
        t_entry = max(t_entry, min(ta, tb))
    if not 0.0 <= t_entry <= 1.0:
        return None
    return o + t_entry * d


def build_dataset(params: SynthParams) -> tuple[list[Sample], list[Sample]]:
    """Generate the full dataset and split it 3:2 by region index."""
    if params.n_regions < 5:
        raise ValueError("need at least 5 regions for a 3:2 split")
    world = build_world(params)
    regions = sample_regions(world.trajectory, params.sample_interval,
                             params.region_height, params.region_width,
                             params.resolution)[:params.n_regions]
    train, test = [], []
    for region_index, x_lb, y_lb in regions:
        anchor = RegionAnchor(x_lb, y_lb, params.region_height, params.region_width,
                              params.resolution, region_index)
        image = render_image(world, anchor, params.resolution, params.seed,
                             noise_sigma=params.intensity_noise)
        gt = []
        for track_id, pts in world.lanes:
            piece = clip_lane_to_region(pts, anchor, params.resolution)
            if piece is None:
                continue
            gt.append(LaneInstance(track_id, ROLE_GROUND_TRUTH,
                                   geo_to_image(piece, anchor)))
        initial = perturb_lanes(gt, params, seed=params.seed * 1000 + region_index)
        label = rasterize_label(gt, params.region_height, params.region_width)
        sample = Sample(image=image, initial_lanes=initial, gt_lanes=gt,
                        label=label, region_index=region_index,
                        image_id=f"sample_{region_index:04d}")
        if region_index % SPLIT_CYCLE < TRAIN_PER_CYCLE:
            train.append(sample)
        else:
            test.append(sample)
    return train, test


# --------------------------------------------------------------------------
# on-disk format: PNG image + JSON sidecar + single-channel 0/1 label PNG
# --------------------------------------------------------------------------

def save_sample(directory, sample: Sample) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sample.image.pixels, mode="RGB").save(
        directory / f"{sample.image_id}.png")
    if sample.label is not None:
        Image.fromarray(sample.label, mode="L").save(
            directory / f"{sample.image_id}_label.png")
    lanes = []
    for lane in list(sample.initial_lanes) + list(sample.gt_lanes):
        lanes.append({"track_id": lane.track_id, "role": lane.role,
                      "points": lane.points.tolist()})
    sidecar = {
        "image_id": sample.image_id,
        "left_bottom": [sample.image.x_lb, sample.image.y_lb],
        "resolution": sample.image.resolution,
        "region_index": sample.region_index,
        "lanes": lanes,
    }
    with open(directory / f"{sample.image_id}.json", "w") as fh:
        json.dump(sidecar, fh)


def load_sample(json_path) -> Sample:
    json_path = Path(json_path)
    with open(json_path) as fh:
        sidecar = json.load(fh)
    image_id = sidecar["image_id"]
    pixels = np.asarray(Image.open(json_path.parent / f"{image_id}.png").convert("RGB"))
    label_path = json_path.parent / f"{image_id}_label.png"
    label = np.asarray(Image.open(label_path)) if label_path.exists() else None
    image = PointCloudImage(pixels, sidecar["left_bottom"][0],
                            sidecar["left_bottom"][1], sidecar["resolution"])
    initial, gt = [], []
    for entry in sidecar["lanes"]:
        lane = LaneInstance(int(entry["track_id"]), entry["role"],
                            np.asarray(entry["points"]))
        (initial if lane.role == ROLE_INITIAL else gt).append(lane)
    return Sample(image=image, initial_lanes=initial, gt_lanes=gt, label=label,
                  region_index=int(sidecar.get("region_index", 0)),
                  image_id=image_id)


def list_sample_files(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.glob("*.json")
                  if p.name != "manifest.json" and not p.name.endswith("_label.json"))


def save_dataset(out_dir, train: list[Sample], test: list[Sample],
                 params: SynthParams) -> None:
    out_dir = Path(out_dir)
    for split, samples in (("train", train), ("test", test)):
        for sample in samples:
            save_sample(out_dir / split, sample)
    manifest = {
        "train_count": len(train),
        "test_count": len(test),
        "seed": params.seed,
        "params": asdict(params),
    }
    tmp = out_dir / "manifest.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    tmp.replace(out_dir / "manifest.json")
