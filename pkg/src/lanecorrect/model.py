"""The patch-wise lane correction network.

Forward pipeline: a four-stage downsampling backbone feeds a segmentation
head whose sigmoid map is concatenated with the input image into a
4-channel feature tensor; fixed-size patch grids centered at each initial
lane point are sampled bilinearly and flattened; a 1D attention module
re-weights the flattened channels per lane instance; five 1D 1x1
convolutions regress per-point (dx, dy) offsets, and corrected lanes are
the initial lanes plus those offsets. No iterative refinement anywhere.
"""

from __future__ import annotations

import ast
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ROLE_CORRECTED, LaneInstance

CHECKPOINT_MAGIC = "PLCNET1"
MODEL_VERSION = "1"

BACKBONE_WIDTHS = (16, 24, 40, 80)
MLP_HIDDEN = 64
MLP_LAYERS = 5


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype):
    # scaled uniform with variance 2/fan_in
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2dLayer:
    """Parameter container for one 2D convolution."""

    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None,
                 dtype=np.float32, zero_init: bool = False):
        self.stride = stride
        self.padding = padding
        if zero_init or rng is None:
            w = np.zeros((c_out, c_in, k, k), dtype=dtype)
        else:
            w = _he_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype)
        self.weight = Tensor(w, requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros((c_out, 1, 1), dtype=dtype), requires_grad=True,
                           dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, stride=self.stride, padding=self.padding) + self.bias


class Conv1dLayer:
    """Parameter container for one 1D convolution."""

    def __init__(self, c_in: int, c_out: int, k: int, padding: int = 0,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 zero_init: bool = False):
        self.padding = padding
        if zero_init or rng is None:
            w = np.zeros((c_out, c_in, k), dtype=dtype)
        else:
            w = _he_uniform(rng, (c_out, c_in, k), c_in * k, dtype)
        self.weight = Tensor(w, requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros((c_out, 1), dtype=dtype), requires_grad=True,
                           dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight, padding=self.padding) + self.bias


class StandardBackbone:
    """Compact stand-in backbone: four stages of
    [stride-2 3x3 conv -> relu -> 3x3 conv -> relu], so stage j is
    downsampled 2^j times. Any object with the same ``widths``,
    ``stage_maps`` and ``parameters`` surface can be plugged in instead.
    """

    def __init__(self, rng: np.random.Generator | None = None, dtype=np.float32,
                 in_channels: int = 3):
        self.widths = BACKBONE_WIDTHS
        self.stages = []
        c_prev = in_channels
        for width in self.widths:
            down = Conv2dLayer(c_prev, width, 3, stride=2, padding=1, rng=rng, dtype=dtype)
            keep = Conv2dLayer(width, width, 3, stride=1, padding=1, rng=rng, dtype=dtype)
            self.stages.append((down, keep))
            c_prev = width

    def stage_maps(self, image: Tensor) -> list[Tensor]:
        maps = []
        h = image
        for down, keep in self.stages:
            h = ad.relu(keep(ad.relu(down(h))))
            maps.append(h)
        return maps

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for j, (down, keep) in enumerate(self.stages, start=1):
            out[f"backbone.stage{j}.down.weight"] = down.weight
            out[f"backbone.stage{j}.down.bias"] = down.bias
            out[f"backbone.stage{j}.keep.weight"] = keep.weight
            out[f"backbone.stage{j}.keep.bias"] = keep.bias
        return out


@dataclass
class ModelParams:
    """All learnable parameters plus the patch size they were built for."""

    backbone: StandardBackbone
    seg_head: Conv2dLayer      # 1x1, sum(stage2..4 widths) -> 1
    attention_conv: Conv1dLayer  # k=3, pad 1, 2 -> 1
    mlp: list[Conv1dLayer]     # K -> 64 -> 64 -> 64 -> 64 -> 2, all 1x1
    patch_size: int
    version: str = MODEL_VERSION

    @property
    def feature_channels(self) -> int:
        return self.patch_size * self.patch_size * 4

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.backbone.parameters())
        out["seg_head.weight"] = self.seg_head.weight
        out["seg_head.bias"] = self.seg_head.bias
        out["attention.weight"] = self.attention_conv.weight
        out["attention.bias"] = self.attention_conv.bias
        for i, layer in enumerate(self.mlp):
            out[f"mlp.{i}.weight"] = layer.weight
            out[f"mlp.{i}.bias"] = layer.bias
        return out

    def validate(self) -> None:
        k = self.patch_size * self.patch_size * 4
        path = [k] + [MLP_HIDDEN] * (MLP_LAYERS - 1)
        for i, layer in enumerate(self.mlp):
            c_out = 2 if i == MLP_LAYERS - 1 else MLP_HIDDEN
            expect = (c_out, path[i], 1)
            if layer.weight.shape != expect:
                raise ValueError(f"mlp layer {i} has shape {layer.weight.shape}, "
                                 f"expected {expect}")
        if self.attention_conv.weight.shape != (1, 2, 3):
            raise ValueError("attention conv must map 2 pooled channels to 1 with k=3")
        seg_in = sum(self.backbone.widths[1:])
        if self.seg_head.weight.shape != (1, seg_in, 1, 1):
            raise ValueError(f"segmentation head expects (1,{seg_in},1,1) weights, "
                             f"got {self.seg_head.weight.shape}")


def init_model(patch_size: int, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Fresh model; the final offset layer starts at zero so the initial
    state is a no-op correction."""
    if patch_size < 2:
        raise ValueError("patch size must be >= 2")
    rng = np.random.default_rng([seed, 101])
    backbone = StandardBackbone(rng, dtype=dtype)
    seg_head = Conv2dLayer(sum(BACKBONE_WIDTHS[1:]), 1, 1, rng=rng, dtype=dtype)
    attention = Conv1dLayer(2, 1, 3, padding=1, rng=rng, dtype=dtype)
    k = patch_size * patch_size * 4
    dims = [k] + [MLP_HIDDEN] * (MLP_LAYERS - 1) + [2]
    mlp = []
    for i in range(MLP_LAYERS):
        zero = i == MLP_LAYERS - 1
        mlp.append(Conv1dLayer(dims[i], dims[i + 1], 1, rng=rng, dtype=dtype,
                               zero_init=zero))
    params = ModelParams(backbone=backbone, seg_head=seg_head,
                         attention_conv=attention, mlp=mlp, patch_size=patch_size)
    params.validate()
    return params


# --------------------------------------------------------------------------
# forward pieces
# --------------------------------------------------------------------------

def extract_multiscale_features(image: Tensor, params: ModelParams
                                ) -> tuple[Tensor, Tensor]:
    """(3, H, W) image -> 4-channel features (image + sigmoid seg map) and
    raw segmentation logits. H and W must be divisible by 16."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    if h % 16 != 0 or w % 16 != 0:
        raise ValueError(f"image size {h}x{w} not divisible by 16")
    maps = params.backbone.stage_maps(image)
    # stage 1 only feeds stage 2; stages 2..4 join the segmentation head
    upsampled = [ad.bilinear_upsample(m, 2 ** (j + 2)) for j, m in enumerate(maps[1:])]
    stacked = ad.concat(upsampled, axis=0)
    seg_logits = params.seg_head(stacked)
    seg_prob = ad.sigmoid(seg_logits)
    features = ad.concat([image, seg_prob], axis=0)
    return features, seg_logits


def crop_patch_features(features: Tensor, lane: LaneInstance, patch_size: int
                        ) -> Tensor:
    """Sample a patch_size x patch_size grid of bilinear samples, spaced one
    pixel apart and centered at each lane point, over the 4-channel features.
    Off-image grid positions clamp to the valid range. Flattening is
    row-major over the grid with the channel fastest, giving a (K, M)
    tensor with K = patch_size^2 * channels."""
    if lane.points.shape[0] == 0:
        raise ValueError("lane has no points")
    if patch_size < 2:
        raise ValueError("patch size must be >= 2")
    c, h, w = features.shape
    m = lane.points.shape[0]
    offs = np.arange(patch_size, dtype=np.float64) - (patch_size - 1) / 2.0
    gx, gy = np.meshgrid(offs, offs)  # row-major: gy varies slowest
    xs = lane.points[:, 0][:, None] + gx.reshape(-1)[None, :]  # (M, P*P)
    ys = lane.points[:, 1][:, None] + gy.reshape(-1)[None, :]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    sampled = ad.bilinear_sample_many(features, xs.reshape(-1), ys.reshape(-1))
    # (C, M*P*P) -> (M, P*P, C) -> (M, K) -> (K, M)
    grid = ad.reshape(sampled, (c, m, patch_size * patch_size))
    grid = ad.transpose(grid, (1, 2, 0))
    flat = ad.reshape(grid, (m, patch_size * patch_size * c))
    return ad.transpose(flat, (1, 0))


def lane_attention(t: Tensor, params: ModelParams) -> Tensor:
    """Per-channel instance-level re-weighting: max- and mean-pool over the
    position axis, run a k=3 1D conv over the pooled channel sequence,
    squash with a sigmoid and scale each row of the input by its weight."""
    mx = pool_to_row(t, "max")
    mn = pool_to_row(t, "mean")
    pooled = ad.concat([mx, mn], axis=0)  # (2, K)
    logits = params.attention_conv(pooled)  # (1, K)
    weights = ad.sigmoid(logits)
    return t * ad.transpose(weights, (1, 0))  # broadcast (K, 1) over M


def pool_to_row(t: Tensor, mode: str) -> Tensor:
    return ad.transpose(ad.pool_over_positions(t, mode), (1, 0))


def correction_mlp(a: Tensor, params: ModelParams) -> Tensor:
    """(K, M) attended features -> (2, M) per-point offsets. ReLU after the
    four hidden layers, none after the last."""
    h = a
    for layer in params.mlp[:-1]:
        h = ad.relu(layer(h))
    return params.mlp[-1](h)


def forward(image: Tensor, initial_lanes: list[LaneInstance], params: ModelParams
            ) -> tuple[list[LaneInstance], Tensor, list[Tensor]]:
    """Full forward pass over every lane instance of one image.

    Returns corrected lanes (track IDs preserved, same point counts),
    the segmentation logits, and the per-lane (2, M) offset tensors."""
    features, seg_logits = extract_multiscale_features(image, params)
    corrected: list[LaneInstance] = []
    offsets: list[Tensor] = []
    for lane in initial_lanes:
        patch = crop_patch_features(features, lane, params.patch_size)
        attended = lane_attention(patch, params)
        offset = correction_mlp(attended, params)
        corrected.append(LaneInstance(lane.track_id, ROLE_CORRECTED,
                                      lane.points + offset.data.T))
        offsets.append(offset)
    return corrected, seg_logits, offsets


# --------------------------------------------------------------------------
# checkpoint file: magic line, text manifest, raw little-endian float32 data
# --------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, config: dict | None = None,
                    epoch: int = 0, history: list[dict] | None = None) -> None:
    """Write the checkpoint: after the magic line come ``config key value``
    lines (values are reprs), one ``tensor name dims count`` line per
    parameter, a ``data`` separator, then the raw float32 payload."""
    named = params.parameters()
    lines = [CHECKPOINT_MAGIC]
    lines.append(f"config model_version {params.version}")
    lines.append(f"config patch_size {params.patch_size}")
    lines.append(f"config epoch {int(epoch)}")
    for key, value in (config or {}).items():
        lines.append(f"config {key} {value!r}")
    arrays = []
    entries = list(named.items())
    if history:
        for key in ("seg_loss", "offset_loss", "lr"):
            values = np.asarray([row[key] for row in history], dtype=np.float32)
            entries.append((f"history.{key}", Tensor(values)))
    for name, tensor in entries:
        arr = np.asarray(tensor.data, dtype="<f4")
        dims = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {dims} {arr.size}")
        arrays.append(arr)
    lines.append("data")
    blob = "\n".join(lines).encode() + b"\n" + b"".join(a.tobytes() for a in arrays)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[ModelParams, dict, int, list[dict]]:
    """Read a checkpoint and rebuild a validated ModelParams. Returns
    (params, config, epoch, history)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header_end = blob.find(b"\ndata\n")
    if header_end < 0:
        raise CheckpointError("missing data separator")
    header = blob[:header_end].decode()
    payload = blob[header_end + len(b"\ndata\n"):]
    lines = header.split("\n")
    if lines[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {lines[0]!r}")

    config: dict[str, str] = {}
    manifest: list[tuple[str, tuple[int, ...], int]] = []
    for line in lines[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "config":
            key, value = rest.split(" ", 1)
            config[key] = value
        elif kind == "tensor":
            name, dims, count = rest.rsplit(" ", 2)
            shape = tuple(int(d) for d in dims.split(",") if d != "")
            manifest.append((name, shape, int(count)))
        else:
            raise CheckpointError(f"unknown manifest line kind {kind!r}")

    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape, count in manifest:
        expect = int(np.prod(shape)) if shape else 1
        if expect != count:
            raise CheckpointError(f"entry {name}: shape {shape} does not hold "
                                  f"{count} elements")
        nbytes = count * 4
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"truncated data for entry {name}")
        tensors[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError("trailing bytes after the declared tensor data")

    patch_size = int(config.pop("patch_size", "0"))
    version = config.pop("model_version", MODEL_VERSION)
    epoch = int(config.pop("epoch", "0"))
    params = init_model(patch_size, dtype=np.float32)
    params.version = version
    for name, tensor in params.parameters().items():
        if name not in tensors:
            raise CheckpointError(f"missing parameter {name}")
        if tensors[name].shape != tensor.shape:
            raise CheckpointError(f"parameter {name} has shape {tensors[name].shape}, "
                                  f"expected {tensor.shape}")
        tensor.data = np.ascontiguousarray(tensors[name], dtype=np.float32)
    params.validate()

    history: list[dict] = []
    if "history.seg_loss" in tensors:
        seg = tensors["history.seg_loss"]
        off = tensors["history.offset_loss"]
        lr = tensors["history.lr"]
        for i in range(len(seg)):
            history.append({"epoch": i + 1, "seg_loss": float(seg[i]),
                            "offset_loss": float(off[i]), "lr": float(lr[i])})
    parsed_config = {k: _parse_repr(v) for k, v in config.items()}
    return params, parsed_config, epoch, history


def _parse_repr(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text
