"""Shared domain types: lane polylines, point-cloud rasters, samples."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROLE_INITIAL = "initial"
ROLE_GROUND_TRUTH = "ground-truth"
ROLE_CORRECTED = "corrected"
ROLES = (ROLE_INITIAL, ROLE_GROUND_TRUTH, ROLE_CORRECTED)


@dataclass
class LaneInstance:
    """One lane polyline in image coordinates (pixels)."""

    track_id: int
    role: str
    points: np.ndarray  # (N, 2) float, columns (x, y)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown lane role {self.role!r}")
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(self.points)):
            raise ValueError(f"lane {self.track_id} has non-finite points")

    def with_points(self, points, role: str | None = None) -> "LaneInstance":
        return LaneInstance(self.track_id, role or self.role, points)


@dataclass
class PointCloudImage:
    """Rendered top-down intensity raster plus its geographic anchor."""

    pixels: np.ndarray  # (H, W, 3) uint8
    x_lb: float         # left-bottom absolute X (meters)
    y_lb: float         # left-bottom absolute Y (meters)
    resolution: float   # meters per pixel

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected (H,W,3) raster, got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class Sample:
    """One training / evaluation unit."""

    image: PointCloudImage
    initial_lanes: list[LaneInstance] = field(default_factory=list)
    gt_lanes: list[LaneInstance] = field(default_factory=list)
    label: np.ndarray | None = None  # (H, W) uint8 in {0, 1}
    region_index: int = 0
    image_id: str = ""

    def __post_init__(self):
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=np.uint8)
            if self.label.shape != (self.image.height, self.image.width):
                raise ValueError("label shape does not match the image")
