"""Command-line entry point.

Subcommands: synth, train, detect, segment, eval. Exit codes: 0 on success,
1 on a runtime failure, 2 on a usage error. Overlay conventions: ground
truth green, predictions red, detection boxes on segment overlays blue.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import load_dataset, save_mask, load_mask, synth_generate, write_dataset
from .errors import DatasetError
from .geometry import Box, iou
from .metrics import aggregate_metrics, compute_metrics
from .pipeline import PipelineModel, segment_full
from .segmenter import SegmenterConfig
from .detection import detect
from .training import TrainConfig, train

GT_COLOR = (0, 200, 0)
PRED_COLOR = (220, 0, 0)
DET_BOX_COLOR = (40, 80, 255)


class CliError(Exception):
    """Runtime failure that should exit with code 1."""


# ---------------------------------------------------------------------------
# config handling

_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_PATH_KEYS = ("manifest", "checkpoint_dir", "output_dir")


def load_run_config(path) -> dict:
    """Parse the JSON run config; unknown keys are rejected."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliError(f"config {path} must be a JSON object")
    allowed = set(_TRAIN_FIELDS) | set(_PATH_KEYS)
    unknown = set(raw) - allowed
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    return raw


def build_train_config(raw: dict) -> TrainConfig:
    kwargs = {}
    for key, value in raw.items():
        if key in _PATH_KEYS:
            continue
        if key == "segmenter":
            seg_fields = {f.name for f in dataclasses.fields(SegmenterConfig)}
            unknown = set(value) - seg_fields
            if unknown:
                raise CliError(f"unknown segmenter config keys: {sorted(unknown)}")
            if "dilation_rates" in value:
                value = dict(value, dilation_rates=tuple(value["dilation_rates"]))
            kwargs[key] = SegmenterConfig(**value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# overlay rendering

def _to_pil(image: np.ndarray) -> Image.Image:
    return Image.fromarray(np.clip(image * 255.0, 0, 255).round().astype(np.uint8), mode="RGB")


def _draw_box(draw: ImageDraw.ImageDraw, box: Box, color) -> None:
    draw.rectangle([box.x1, box.y1, box.x2 - 1, box.y2 - 1], outline=color, width=1)


def save_box_overlay(path, image: np.ndarray, gt_box: Box | None, pred_boxes) -> None:
    im = _to_pil(image)
    draw = ImageDraw.Draw(im)
    if gt_box is not None:
        _draw_box(draw, gt_box, GT_COLOR)
    for box in pred_boxes:
        _draw_box(draw, box, PRED_COLOR)
    im.save(path)


def _mask_contour(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbor outside the mask."""
    m = np.asarray(mask) != 0
    interior = np.zeros_like(m)
    interior[1:-1, 1:-1] = (m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1]
                            & m[1:-1, :-2] & m[1:-1, 2:])
    return m & ~interior


def save_contour_overlay(path, image: np.ndarray, gt_mask: np.ndarray | None,
                         pred_mask: np.ndarray, det_box: Box | None = None) -> None:
    arr = np.clip(image * 255.0, 0, 255).round().astype(np.uint8).copy()
    if gt_mask is not None:
        arr[_mask_contour(gt_mask)] = GT_COLOR
    arr[_mask_contour(pred_mask)] = PRED_COLOR
    im = Image.fromarray(arr, mode="RGB")
    if det_box is not None:
        _draw_box(ImageDraw.Draw(im), det_box, DET_BOX_COLOR)
    im.save(path)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    samples = synth_generate(args.n, args.seed, args.size)
    manifest = write_dataset(samples, out_dir)
    print(f"wrote {len(samples)} samples to {out_dir} (manifest: {manifest})")
    return 0


def cmd_train(args) -> int:
    raw = load_run_config(args.config) if args.config else {}
    manifest = args.manifest or raw.get("manifest")
    if manifest is None:
        raise CliError("a dataset manifest is required (--manifest or config key)")
    out_dir = Path(args.out or raw.get("output_dir") or "runs")
    checkpoint_dir = Path(args.checkpoint or raw.get("checkpoint_dir") or out_dir)

    overrides = {
        "epochs": args.epochs,
        "seed": args.seed,
        "lr": args.lr,
        "input_size": args.size,
        "batch_size": args.batch_size,
    }
    for key, value in overrides.items():
        if value is not None:
            raw[key] = value
    config = build_train_config(raw)

    dataset = load_dataset(_require_file(manifest, "manifest"))
    if not dataset:
        raise CliError(f"no usable samples in {manifest}")
    if any(s.image.shape[0] != config.input_size for s in dataset):
        from .data import resize_pair

        dataset = [resize_pair(s, config.input_size) for s in dataset]

    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    model, log = train(dataset, config)
    model.save(checkpoint_dir / "pipeline.ckpt")
    log.to_jsonl(out_dir / "train_log.jsonl")
    (out_dir / "train_config.json").write_text(
        json.dumps(_config_to_json(config), indent=2, sort_keys=True) + "\n")
    print(f"checkpoint: {checkpoint_dir / 'pipeline.ckpt'}")
    print(f"train log: {out_dir / 'train_log.jsonl'}")
    return 0


def _config_to_json(config: TrainConfig) -> dict:
    obj = dataclasses.asdict(config)
    obj["segmenter"] = dataclasses.asdict(config.segmenter)
    return obj


def _load_model(path) -> PipelineModel:
    try:
        return PipelineModel.load(_require_file(path, "checkpoint"))
    except (ValueError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from exc


def _load_sized_dataset(manifest, size: int):
    from .data import resize_pair

    dataset = load_dataset(_require_file(manifest, "manifest"))
    if not dataset:
        raise CliError(f"no usable samples in {manifest}")
    return [resize_pair(s, size) for s in dataset]


def cmd_detect(args) -> int:
    model = _load_model(args.checkpoint)
    dataset = _load_sized_dataset(args.manifest, model.detector.config.input_size)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for s in dataset:
        detections = detect(s.image, model.detector)
        best = max((iou(d.box, s.gt_box) for d in detections), default=0.0)
        results.append({
            "id": s.id,
            "gt_box": list(s.gt_box.as_array()),
            "detections": [
                {"box": list(d.box.as_array()), "lesion_prob": d.lesion_prob}
                for d in detections
            ],
            "best_iou": best,
        })
        save_box_overlay(out_dir / f"{s.id}_boxes.png", s.image, s.gt_box,
                         [d.box for d in detections])
    (out_dir / "detections.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    print(f"wrote detections for {len(results)} images to {out_dir}")
    return 0


def cmd_segment(args) -> int:
    model = _load_model(args.checkpoint)
    dataset = _load_sized_dataset(args.manifest, model.detector.config.input_size)
    out_dir = Path(args.out)
    mask_dir = out_dir / "pred_masks"
    overlay_dir = out_dir / "overlays"
    mask_dir.mkdir(parents=True, exist_ok=True)
    overlay_dir.mkdir(parents=True, exist_ok=True)
    flags = []
    for s in dataset:
        pred, det = segment_full(s.image, model.detector, model.segmenter)
        save_mask(mask_dir / f"{s.id}.png", pred)
        save_contour_overlay(overlay_dir / f"{s.id}.png", s.image, s.mask, pred,
                             det.box if det else None)
        flags.append({"id": s.id, "detected": det is not None})
    (out_dir / "segmentations.json").write_text(json.dumps(flags, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(flags)} masks to {mask_dir}")
    return 0


def cmd_eval(args) -> int:
    pred_dir = _require_dir(args.pred, "prediction directory")
    gt_dir = _require_dir(args.gt, "ground-truth directory")
    gt_files = sorted(p.name for p in gt_dir.glob("*.png"))
    if not gt_files:
        raise CliError(f"no PNG masks in {gt_dir}")
    samples = []
    reports = []
    for name in gt_files:
        pred_path = pred_dir / name
        if not pred_path.is_file():
            raise CliError(f"missing prediction for {name}")
        try:
            report = compute_metrics(load_mask(pred_path), load_mask(gt_dir / name))
        except ValueError as exc:
            raise CliError(f"{name}: {exc}") from exc
        reports.append(report)
        samples.append({"id": name, **report.to_dict()})
    payload = {"samples": samples, "aggregate": aggregate_metrics(reports)}
    Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    agg = payload["aggregate"]["mean"]
    print("mean metrics: " + "  ".join(f"{k}={agg[k]:.4f}" for k in ("AC", "DC", "JI", "SE", "SP")))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesionpipe",
                                     description="Two-stage lesion detection and segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64, help="square image size")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train detector and segmenter")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--manifest", help="dataset manifest")
    p.add_argument("--out", help="output directory for logs")
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--size", type=int, help="training image size")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run detection and write box overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("segment", help="run the full pipeline and write masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted masks")
    p.add_argument("--gt", required=True, help="directory of ground-truth masks")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (CliError, DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
