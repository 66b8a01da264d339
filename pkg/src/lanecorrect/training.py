"""Losses, lane resampling, the training loop and inference rescaling.

Training runs at a configurable network size: images are resized there,
lane coordinates scaled along, both lane sets resampled to M points, and
offset targets taken as ground-truth minus initial in net-scale pixels.
The optimizer is Adam at 1e-3, dropped to 1e-4 after the configured epoch.
Inference scales corrected coordinates back to the original resolution.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.interpolate import make_interp_spline

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step, zero_grads
from .data import ROLE_CORRECTED, LaneInstance, Sample
from .model import ModelParams, forward, init_model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2
LOG_FLOOR = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 0.001
    lr_drop_epoch: int = 50
    lr_after_drop: float = 0.0001
    batch_size: int = 2
    net_height: int = 640
    net_width: int = 320
    m_points: int = 32
    patch_size: int = 6
    seg_loss_weight: float = 1.0
    offset_loss_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.net_height % 16 != 0 or self.net_width % 16 != 0:
            raise ValueError(f"network size {self.net_height}x{self.net_width} "
                             "must be divisible by 16")
        if self.m_points < 2:
            raise ValueError("m_points must be >= 2")
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


TRAIN_FIELD_TYPES = {f.name: type(f.default) for f in fields(TrainConfig)}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, field_types: dict[str, type]) -> dict:
    """Flat key=value parser; '#' starts a comment; unknown keys are a
    hard error naming the key."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in field_types:
            raise ConfigError(f"unknown config key {key!r}")
        caster = field_types[key]
        try:
            values[key] = caster(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    return values


def load_train_config(path) -> TrainConfig:
    values = parse_config_text(Path(path).read_text(), TRAIN_FIELD_TYPES)
    return TrainConfig(**values)


@dataclass
class EpochStats:
    epoch: int
    seg_loss: float
    offset_loss: float
    lr: float


@dataclass
class Checkpoint:
    """Trained parameters plus the config snapshot and loss history."""

    params: ModelParams
    config: TrainConfig
    epoch: int
    history: list[EpochStats] = field(default_factory=list)

    def save(self, path) -> None:
        save_checkpoint(path, self.params, config=asdict(self.config),
                        epoch=self.epoch,
                        history=[asdict(row) for row in self.history])

    @classmethod
    def load(cls, path) -> "Checkpoint":
        params, config, epoch, history = load_checkpoint(path)
        known = {k: v for k, v in config.items() if k in TRAIN_FIELD_TYPES}
        known["patch_size"] = params.patch_size
        cfg = TrainConfig(**known)
        rows = [EpochStats(epoch=row["epoch"], seg_loss=row["seg_loss"],
                           offset_loss=row["offset_loss"], lr=row["lr"])
                for row in history]
        return cls(params=params, config=cfg, epoch=epoch, history=rows)


# --------------------------------------------------------------------------
# lane resampling
# --------------------------------------------------------------------------

def resample_lane(points, m: int) -> np.ndarray:
    """Resample a polyline to m points via an interpolating cubic B-spline
    (chord-length parameterized, evaluated at uniform parameter spacing);
    falls back to linear for fewer than 4 distinct points. Endpoints are
    preserved exactly."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise ValueError("need at least 2 points to resample")
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > 0
    pts = pts[keep]
    if len(pts) < 2:
        raise ValueError("all points coincident")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    t = np.concatenate([[0.0], np.cumsum(seg)])
    t /= t[-1]
    degree = 3 if len(pts) >= 4 else 1
    spline = make_interp_spline(t, pts, k=degree)
    out = spline(np.linspace(0.0, 1.0, m))
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def focal_loss(seg_logits: Tensor, label: np.ndarray) -> Tensor:
    """Mean focal loss over pixels: -alpha (1-p)^gamma log p on positives,
    -(1-alpha) p^gamma log(1-p) on negatives, p = sigmoid(logit)."""
    lab = np.asarray(label)
    if lab.shape != seg_logits.shape[-2:]:
        raise ValueError(f"label shape {lab.shape} does not match logits "
                         f"{seg_logits.shape}")
    if not np.isin(lab, (0, 1)).all():
        raise ValueError("label values must be 0 or 1")
    dtype = seg_logits.data.dtype
    pos = lab.astype(dtype).reshape(seg_logits.shape)
    neg = (1 - lab).astype(dtype).reshape(seg_logits.shape)
    p = ad.sigmoid(seg_logits)
    one_minus_p = 1.0 - p
    log_p = ad.log(ad.clamp_min(p, LOG_FLOOR))
    log_1mp = ad.log(ad.clamp_min(one_minus_p, LOG_FLOOR))
    pos_term = Tensor(pos * -FOCAL_ALPHA) * one_minus_p * one_minus_p * log_p
    neg_term = Tensor(neg * -(1.0 - FOCAL_ALPHA)) * p * p * log_1mp
    return (pos_term + neg_term).mean()


def offset_loss(predicted: list[Tensor], target: list[np.ndarray]) -> Tensor:
    """Mean smooth-L1 over all points of the per-point offset error,
    branching on the L1 norm of the 2-vector residual."""
    if len(predicted) != len(target):
        raise ValueError(f"lane count mismatch: {len(predicted)} predicted vs "
                         f"{len(target)} target")
    total = None
    count = 0
    for pred, tgt in zip(predicted, target):
        tgt = np.asarray(tgt, dtype=pred.data.dtype)
        if tgt.T.shape != pred.shape:
            raise ValueError(f"offset shapes differ: {pred.shape} vs {tgt.shape}")
        diff = pred - Tensor(tgt.T)
        s = ad.absolute(diff).sum(axis=0)  # L1 norm per point
        lane_sum = ad.smooth_l1(s).sum()
        total = lane_sum if total is None else total + lane_sum
        count += tgt.shape[0]
    if total is None or count == 0:
        raise ValueError("no offsets to score")
    return total * (1.0 / count)


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

def resize_image(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    if pixels.shape[:2] == (height, width):
        return pixels
    img = Image.fromarray(pixels, mode="RGB")
    return np.asarray(img.resize((width, height), Image.BILINEAR))


def resize_label(label: np.ndarray, height: int, width: int) -> np.ndarray:
    """Downscale by block max for integer factors (keeps thin bands alive),
    nearest neighbor otherwise."""
    h, w = label.shape
    if (h, w) == (height, width):
        return label
    if h % height == 0 and w % width == 0:
        fh, fw = h // height, w // width
        return label.reshape(height, fh, width, fw).max(axis=(1, 3))
    img = Image.fromarray(label, mode="L")
    return np.asarray(img.resize((width, height), Image.NEAREST))


def scale_points(points: np.ndarray, sx: float, sy: float) -> np.ndarray:
    out = np.asarray(points, dtype=np.float64).copy()
    out[:, 0] *= sx
    out[:, 1] *= sy
    return out


@dataclass
class PreparedSample:
    image: Tensor                      # (3, net_h, net_w) float in [0, 1]
    label: np.ndarray                  # (net_h, net_w) uint8
    lanes: list[LaneInstance]          # initial lanes at net scale, M points
    targets: list[np.ndarray]          # (M, 2) offset targets per lane
    image_id: str


def prepare_sample(sample: Sample, config: TrainConfig) -> PreparedSample:
    h, w = sample.image.height, sample.image.width
    sx = config.net_width / w
    sy = config.net_height / h
    pixels = resize_image(sample.image.pixels, config.net_height, config.net_width)
    image = Tensor(pixels.astype(np.float32).transpose(2, 0, 1) / 255.0)
    label = sample.label
    if label is None:
        label = np.zeros((h, w), dtype=np.uint8)
    label = resize_label(label, config.net_height, config.net_width)

    gt_by_id = {lane.track_id: lane for lane in sample.gt_lanes}
    lanes, targets = [], []
    for lane in sample.initial_lanes:
        gt = gt_by_id.get(lane.track_id)
        if gt is None:
            log.warning("sample %s: initial lane %d has no ground-truth partner; "
                        "skipped", sample.image_id, lane.track_id)
            continue
        init_net = resample_lane(scale_points(lane.points, sx, sy), config.m_points)
        gt_net = resample_lane(scale_points(gt.points, sx, sy), config.m_points)
        lanes.append(lane.with_points(init_net))
        targets.append(gt_net - init_net)
    for gt in sample.gt_lanes:
        if not any(l.track_id == gt.track_id for l in sample.initial_lanes):
            log.warning("sample %s: ground-truth lane %d has no initial partner; "
                        "skipped", sample.image_id, gt.track_id)
    return PreparedSample(image=image, label=label, lanes=lanes, targets=targets,
                          image_id=sample.image_id)


# --------------------------------------------------------------------------
# the loop
# --------------------------------------------------------------------------

def epoch_lr(config: TrainConfig, epoch: int) -> float:
    return config.lr_after_drop if epoch > config.lr_drop_epoch else config.lr


def train(config: TrainConfig, dataset: list[Sample],
          params: ModelParams | None = None) -> Checkpoint:
    """Run the full schedule over the dataset; deterministic given the
    config seed."""
    if not dataset:
        raise ValueError("empty training dataset")
    prepared = [prepare_sample(s, config) for s in dataset]
    if params is None:
        params = init_model(config.patch_size, seed=config.seed)
    elif params.patch_size != config.patch_size:
        raise ValueError(f"model patch size {params.patch_size} does not match "
                         f"config patch size {config.patch_size}")
    named = params.parameters()
    state = AdamState.for_params(named)
    rng = np.random.default_rng([config.seed, 977])
    history: list[EpochStats] = []

    for epoch in range(1, config.epochs + 1):
        lr = epoch_lr(config, epoch)
        order = rng.permutation(len(prepared))
        seg_sum = off_sum = 0.0
        batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [prepared[i] for i in order[start:start + config.batch_size]]
            zero_grads(named)
            seg_terms, off_terms = [], []
            for item in batch:
                _, seg_logits, offsets = forward(item.image, item.lanes, params)
                seg_terms.append(focal_loss(seg_logits, item.label))
                if item.lanes:
                    off_terms.append(offset_loss(offsets, item.targets))
            seg_batch = _mean_terms(seg_terms)
            off_batch = _mean_terms(off_terms)
            loss = seg_batch * config.seg_loss_weight
            if off_batch is not None:
                loss = loss + off_batch * config.offset_loss_weight
            loss.backward()
            grads = {name: p.grad for name, p in named.items()}
            adam_step(named, grads, state, lr)
            seg_sum += seg_batch.item()
            off_sum += off_batch.item() if off_batch is not None else 0.0
            batches += 1
        history.append(EpochStats(epoch=epoch, seg_loss=seg_sum / batches,
                                  offset_loss=off_sum / batches, lr=lr))
    return Checkpoint(params=params, config=config, epoch=config.epochs,
                      history=history)


def _mean_terms(terms: list[Tensor]) -> Tensor | None:
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def correct(checkpoint: Checkpoint, sample: Sample) -> list[LaneInstance]:
    """Run the network on one sample and return corrected lanes at the
    sample's original resolution."""
    config = checkpoint.config
    h, w = sample.image.height, sample.image.width
    prepared = prepare_sample(sample, config)
    corrected, _, _ = forward(prepared.image, prepared.lanes, checkpoint.params)
    sx = w / config.net_width
    sy = h / config.net_height
    return [LaneInstance(lane.track_id, ROLE_CORRECTED,
                         scale_points(lane.points, sx, sy))
            for lane in corrected]


def write_loss_log(path, history: list[EpochStats]) -> None:
    lines = ["# epoch\tseg_loss\toffset_loss\tlr"]
    for row in history:
        lines.append(f"{row.epoch}\t{row.seg_loss!r}\t{row.offset_loss!r}\t{row.lr!r}")
    Path(path).write_text("\n".join(lines) + "\n")
