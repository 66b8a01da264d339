"""Batch command line driving the full pipeline.

Subcommands: ``synth`` (generate a dataset), ``train`` (fit the model and
write a checkpoint plus a loss log), ``eval`` (correct, merge, score
against ground truth with an initial-state baseline) and ``render``
(static overlay images: initial lanes as diamonds, corrected as squares,
ground truth as circles).

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 runtime
error. Single-file artifacts are written via temp-then-rename.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import ROLE_CORRECTED, ROLE_INITIAL, LaneInstance, Sample
from .geo import RegionAnchor, merge_global, save_global_lanes
from .metrics import evaluate, format_reports
from .model import CheckpointError
from .synth import (SYNTH_FIELD_TYPES, SynthParams, build_dataset,
                    list_sample_files, load_sample, save_dataset)
from .training import (Checkpoint, ConfigError, TrainConfig, TRAIN_FIELD_TYPES,
                       correct, parse_config_text, resample_lane, train,
                       write_loss_log)

log = logging.getLogger(__name__)

PALETTE = [
    (230, 60, 60), (60, 160, 230), (240, 180, 40), (150, 90, 220),
    (60, 200, 120), (235, 120, 180), (110, 200, 220), (250, 140, 70),
    (170, 220, 80), (200, 120, 90),
]
MARKER_RADIUS = 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def lane_color(track_id: int) -> tuple[int, int, int]:
    return PALETTE[track_id % len(PALETTE)]


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _ensure_out_dir(out_dir: Path) -> None:
    if out_dir.exists() and not out_dir.is_dir():
        raise DataError(f"output path {out_dir} exists and is not a directory")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc


def _split_dir(data_dir: Path, split: str) -> Path:
    candidate = data_dir / split
    return candidate if candidate.is_dir() else data_dir


def _load_samples(directory: Path) -> list[Sample]:
    files = list_sample_files(directory)
    if not files:
        raise DataError(f"no samples found in {directory}")
    samples = []
    for path in files:
        try:
            samples.append(load_sample(path))
        except (KeyError, ValueError, OSError) as exc:
            raise DataError(f"malformed sample {path}: {exc}") from exc
    return samples


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def cmd_synth(config_path: str, out_dir: str, seed: int | None = None) -> int:
    values = parse_config_text(Path(config_path).read_text(), SYNTH_FIELD_TYPES)
    if seed is not None:
        values["seed"] = seed
    params = SynthParams(**values)
    out = Path(out_dir)
    _ensure_out_dir(out)
    train_set, test_set = build_dataset(params)
    save_dataset(out, train_set, test_set, params)
    print(f"synth: {len(train_set)} train / {len(test_set)} test samples "
          f"(seed {params.seed}) -> {out}")
    return 0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def cmd_train(config_path: str, data_dir: str, out_checkpoint: str,
              seed: int | None = None) -> int:
    values = parse_config_text(Path(config_path).read_text(), TRAIN_FIELD_TYPES)
    if seed is not None:
        values["seed"] = seed
    config = TrainConfig(**values)
    samples = _load_samples(_split_dir(Path(data_dir), "train"))
    checkpoint = train(config, samples)
    out = Path(out_checkpoint)
    _ensure_out_dir(out.parent)
    checkpoint.save(out)
    write_loss_log(str(out) + ".log", checkpoint.history)
    last = checkpoint.history[-1]
    print(f"train: {config.epochs} epochs over {len(samples)} samples; final "
          f"seg {last.seg_loss:.5f} offset {last.offset_loss:.5f} -> {out}")
    return 0


# --------------------------------------------------------------------------
# eval: correct every sample, merge, score
# --------------------------------------------------------------------------

def save_lane_file(path: Path, image_id: str, lanes: list[LaneInstance]) -> None:
    payload = {"image_id": image_id,
               "lanes": [{"track_id": l.track_id, "role": l.role,
                          "points": l.points.tolist()} for l in lanes]}
    _atomic_write_text(path, json.dumps(payload))


def load_lane_file(path) -> tuple[str, list[LaneInstance]]:
    with open(path) as fh:
        payload = json.load(fh)
    lanes = [LaneInstance(int(e["track_id"]), e["role"], np.asarray(e["points"]))
             for e in payload["lanes"]]
    return payload["image_id"], lanes


def cmd_correct_merge_eval(checkpoint_path: str, data_dir: str, out_dir: str) -> int:
    try:
        checkpoint = Checkpoint.load(checkpoint_path)
    except (CheckpointError, OSError) as exc:
        raise DataError(f"cannot load checkpoint {checkpoint_path}: {exc}") from exc
    samples = _load_samples(_split_dir(Path(data_dir), "test"))
    out = Path(out_dir)
    _ensure_out_dir(out / "corrected")

    m = checkpoint.config.m_points
    local_pairs: list[tuple[np.ndarray, np.ndarray]] = []
    initial_pairs: list[tuple[np.ndarray, np.ndarray]] = []
    fragments = {"corrected": [], "initial": [], "gt": []}
    canvas = (samples[0].image.height, samples[0].image.width)
    missing_gt = False

    for sample in samples:
        corrected = correct(checkpoint, sample)
        save_lane_file(out / "corrected" / f"{sample.image_id}_corrected.json",
                       sample.image_id, corrected)
        anchor = RegionAnchor(sample.image.x_lb, sample.image.y_lb,
                              sample.image.height, sample.image.width,
                              sample.image.resolution, sample.region_index)
        for lane in corrected:
            fragments["corrected"].append((lane, anchor))
        gt_by_id = {l.track_id: l for l in sample.gt_lanes}
        if not gt_by_id:
            missing_gt = True
            continue
        init_by_id = {l.track_id: l for l in sample.initial_lanes}
        for lane in corrected:
            gt = gt_by_id.get(lane.track_id)
            init = init_by_id.get(lane.track_id)
            if gt is None or init is None:
                continue
            gt_m = resample_lane(gt.points, m)
            local_pairs.append((lane.points, gt_m))
            initial_pairs.append((resample_lane(init.points, m), gt_m))
            fragments["initial"].append((init, anchor))
            fragments["gt"].append((gt, anchor))

    merged = merge_global(fragments["corrected"])
    save_global_lanes(out / "global_lanes.json.tmp", merged)
    (out / "global_lanes.json.tmp").replace(out / "global_lanes.json")

    if not local_pairs:
        log.warning("no ground truth available; evaluation skipped")
        print(f"eval: corrected {len(samples)} samples -> {out} (no ground truth; "
              "metrics skipped)")
        return 0
    if missing_gt:
        log.warning("some samples lack ground truth; they were corrected but "
                    "not scored")

    local_corr = evaluate(local_pairs, unit="p", canvas=canvas)
    local_init = evaluate(initial_pairs, unit="p", canvas=canvas)
    local_text = format_reports([("initial", local_init), ("corrected", local_corr)],
                                "Local correction metrics")
    _atomic_write_text(out / "metrics_local.txt", local_text)

    gt_global = {g.track_id: g for g in merge_global(fragments["gt"])}
    init_global = {g.track_id: g for g in merge_global(fragments["initial"])}
    global_rows = []
    corr_pairs, init_pairs_g = [], []
    for lane in merged:
        gt = gt_global.get(lane.track_id)
        init = init_global.get(lane.track_id)
        if gt is None or init is None:
            continue
        corr_pairs.append((lane.points, gt.points))
        init_pairs_g.append((init.points, gt.points))
    global_text = ""
    report = {"local": {"canvas": list(canvas),
                        "initial": _report_dict(local_init),
                        "corrected": _report_dict(local_corr)}}
    if corr_pairs:
        glob_corr = evaluate(corr_pairs, unit="m")
        glob_init = evaluate(init_pairs_g, unit="m")
        global_rows = [("initial", glob_init), ("corrected", glob_corr)]
        global_text = format_reports(global_rows, "Global correction metrics")
        _atomic_write_text(out / "metrics_global.txt", global_text)
        report["global"] = {"initial": _report_dict(glob_init),
                            "corrected": _report_dict(glob_corr)}
    _atomic_write_text(out / "metrics.json", json.dumps(report, indent=2,
                                                        sort_keys=True))
    print(local_text)
    if global_text:
        print(global_text)
    print(f"eval: {len(samples)} samples, {len(merged)} global lanes -> {out}")
    return 0


def _report_dict(report) -> dict:
    payload = {"count": report.count, "smooth_l1": report.smooth_l1,
               "l2": report.l2, "chamfer": report.chamfer}
    if report.lane_iou is not None:
        payload["lane_iou"] = {str(k): v for k, v in report.lane_iou.items()}
    return payload


# --------------------------------------------------------------------------
# render
# --------------------------------------------------------------------------

def _draw_marker(draw: ImageDraw.ImageDraw, x: float, y: float, role: str,
                 color: tuple[int, int, int]) -> None:
    r = MARKER_RADIUS
    if role == ROLE_INITIAL:
        draw.polygon([(x, y - r), (x + r, y), (x, y + r), (x - r, y)], fill=color)
    elif role == ROLE_CORRECTED:
        draw.rectangle([x - r, y - r, x + r, y + r], fill=color)
    else:
        draw.ellipse([x - r, y - r, x + r, y + r], fill=color)


def render_overlay(sample: Sample, corrected: list[LaneInstance] | None) -> Image.Image:
    img = Image.fromarray(sample.image.pixels, mode="RGB").convert("RGB")
    draw = ImageDraw.Draw(img)
    layers = [sample.initial_lanes, corrected or [], sample.gt_lanes]
    for lanes in layers:  # ground truth drawn last so its centers stay visible
        for lane in lanes:
            color = lane_color(lane.track_id)
            for x, y in lane.points:
                _draw_marker(draw, float(x), float(y), lane.role, color)
    return img


def cmd_render(data_dir: str, lanes_files: list[str], out_dir: str) -> int:
    base = Path(data_dir)
    samples: dict[str, Sample] = {}
    for directory in (base, base / "train", base / "test"):
        if directory.is_dir():
            for path in list_sample_files(directory):
                sample = load_sample(path)
                samples[sample.image_id] = sample
    if not samples:
        raise DataError(f"no samples found under {base}")

    corrected_by_id: dict[str, list[LaneInstance]] = {}
    for lf in lanes_files:
        try:
            image_id, lanes = load_lane_file(lf)
        except (KeyError, ValueError, OSError) as exc:
            raise DataError(f"malformed lane file {lf}: {exc}") from exc
        if image_id not in samples:
            raise DataError(f"lane file {lf} references unknown sample "
                            f"{image_id!r}")
        corrected_by_id[image_id] = lanes

    out = Path(out_dir)
    _ensure_out_dir(out)
    count = 0
    for image_id in sorted(samples):
        sample = samples[image_id]
        overlay = render_overlay(sample, corrected_by_id.get(image_id))
        overlay.save(out / f"overlay_{image_id}.png")
        count += 1
    print(f"render: {count} overlays -> {out}")
    return 0


# --------------------------------------------------------------------------
# argument wiring
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lanecorrect",
                     description="Synthesize, train, correct, merge, evaluate "
                                 "and render lane corrections.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--config", required=True, help="synth config file (key=value)")
    p_synth.add_argument("--out", required=True, help="output dataset directory")
    p_synth.add_argument("--seed", type=int, default=None, help="override the config seed")

    p_train = sub.add_parser("train", help="train the correction network")
    p_train.add_argument("--config", required=True, help="train config file (key=value)")
    p_train.add_argument("--data", required=True, help="dataset directory")
    p_train.add_argument("--out", required=True, help="checkpoint output path")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")

    p_eval = sub.add_parser("eval", help="correct lanes, merge them globally and "
                                         "score against ground truth")
    p_eval.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p_eval.add_argument("--data", required=True, help="dataset directory")
    p_eval.add_argument("--out", required=True, help="output directory")

    p_render = sub.add_parser("render", help="write static overlay images")
    p_render.add_argument("--data", required=True, help="dataset directory")
    p_render.add_argument("--lanes", nargs="*", default=[],
                          help="corrected-lane files from eval")
    p_render.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "synth":
            return cmd_synth(args.config, args.out, args.seed)
        if args.command == "train":
            return cmd_train(args.config, args.data, args.out, args.seed)
        if args.command == "eval":
            return cmd_correct_merge_eval(args.checkpoint, args.data, args.out)
        if args.command == "render":
            return cmd_render(args.data, args.lanes, args.out)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
