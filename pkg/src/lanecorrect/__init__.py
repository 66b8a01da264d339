"""Lane polyline correction on rasterized point-cloud images.

Submodules: ``autodiff`` (tensor engine + Adam), ``model`` (the correction
network), ``training`` (losses, resampling, loop, inference), ``synth``
(synthetic datasets), ``geo`` (coordinate transforms and global merging),
``metrics`` (point-, mask- and set-level scores) and ``cli``.
"""

from .autodiff import AdamState, Tensor, adam_step
from .data import LaneInstance, PointCloudImage, Sample
from .geo import GlobalLane, RegionAnchor, geo_to_image, image_to_geo, merge_global
from .metrics import MetricsReport, chamfer, evaluate, lane_iou, point_distances
from .model import ModelParams, forward, init_model
from .synth import SynthParams, World, build_dataset
from .training import Checkpoint, TrainConfig, correct, resample_lane, train

__all__ = [
    "AdamState", "Tensor", "adam_step",
    "LaneInstance", "PointCloudImage", "Sample",
    "GlobalLane", "RegionAnchor", "geo_to_image", "image_to_geo", "merge_global",
    "MetricsReport", "chamfer", "evaluate", "lane_iou", "point_distances",
    "ModelParams", "forward", "init_model",
    "SynthParams", "World", "build_dataset",
    "Checkpoint", "TrainConfig", "correct", "resample_lane", "train",
]

__version__ = "0.1.0"
