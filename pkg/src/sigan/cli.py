"""Command-line interface.

Five subcommands: train, segment, augment, evaluate-fid, evaluate-seg.
Successful runs exit 0 and print a JSON summary (floats at 4 decimal
places); validation failures exit 1 with a one-line JSON error on stderr;
usage errors exit 2 via argparse. Runs that produce files also write a
run_manifest.json recording the command, resolved config, seed, and every
artifact path.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from types import SimpleNamespace

import numpy as np
from PIL import Image

from sigan import __version__
from sigan.augmentation import generate_defective, record_real_counts, save_manifest
from sigan.checkpoint import load_checkpoint
from sigan.data import IMAGE_SUFFIXES, load_dataset, preprocess, _read_grayscale
from sigan.errors import CheckpointError, ConfigError, SiganError
from sigan.extractors import available_extractors, get_extractor
from sigan.fid import extract_features, fid
from sigan.segmentation import (
    SegMetrics,
    ThresholdConfig,
    aggregate_metrics,
    evaluate_masks,
    find_ground_truth,
    load_mask_png,
    save_mask_png,
    segment,
)
from sigan.trainer import TrainConfig, Trainer

logger = logging.getLogger(__name__)


def _round4(value):
    if isinstance(value, float):
        return round(value, 4)
    if isinstance(value, dict):
        return {k: _round4(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round4(v) for v in value]
    return value


def _print_json(obj):
    print(json.dumps(_round4(obj), sort_keys=True))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_run_manifest(out_dir, command: str, config: dict, seed, artifacts: list[str], started_at: str):
    """Record what a run produced; paths are relative to out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rel = []
    for a in artifacts:
        p = Path(a)
        if not p.exists():
            raise SiganError(f"internal error: artifact {a} was reported but does not exist")
        rel.append(os.path.relpath(p, out))
    manifest = {
        "format_version": 1,
        "tool": "sigan",
        "tool_version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "started_at": started_at,
        "ended_at": _now(),
        "status": "ok",
        "artifacts": sorted(rel),
    }
    path = out / "run_manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, path)
    return path


def _write_report(out_dir, name: str, payload: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(_round4(payload), indent=1, sort_keys=True))
    os.replace(tmp, path)
    return path


def _list_images(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise ConfigError(f"input path does not exist: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ConfigError(f"no images ({'/'.join(IMAGE_SUFFIXES)}) found in {path}")
    return files


def _network_from_checkpoint(checkpoint_path, name: str):
    ck = load_checkpoint(checkpoint_path)
    nets = ck.build_networks()
    if name not in nets:
        raise CheckpointError(f"checkpoint {checkpoint_path} holds no network named {name!r}")
    return ck, nets[name]


# -- train ----------------------------------------------------------------


def _config_flag_name(field_name: str) -> str:
    return "--" + field_name.replace("_", "-")


def _add_train_config_flags(parser: argparse.ArgumentParser):
    type_map = {"int": int, "float": float, "str": str}
    for f in dataclasses.fields(TrainConfig):
        kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "str")
        if kind == "bool":
            parser.add_argument(
                _config_flag_name(f.name),
                dest=f.name,
                action=argparse.BooleanOptionalAction,
                default=None,
                help=f"override config key {f.name} (default {f.default})",
            )
        else:
            parser.add_argument(
                _config_flag_name(f.name),
                dest=f.name,
                type=type_map.get(kind, str),
                default=None,
                help=f"override config key {f.name} (default {f.default})",
            )


def resolve_train_config(config_path, args: argparse.Namespace) -> TrainConfig:
    """Apply precedence: dataclass defaults, then the file, then flags."""
    values: dict = {}
    if config_path:
        p = Path(config_path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {p} must hold a flat JSON object")
        values.update(loaded)
    for f in dataclasses.fields(TrainConfig):
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            values[f.name] = flag_value
    return TrainConfig.from_flat_dict(values)


def cmd_train(args) -> int:
    started = _now()
    if args.resume:
        overridden = [f.name for f in dataclasses.fields(TrainConfig) if getattr(args, f.name, None) is not None]
        if args.config or overridden:
            raise ConfigError("--resume restores the saved config; drop --config and config-key flags")
        trainer = Trainer.resume(args.resume, out_dir=args.out)
    else:
        trainer = Trainer(resolve_train_config(args.config, args), out_dir=args.out)
    cfg = trainer.cfg
    data = load_dataset(args.data, "train", image_size=cfg.image_size, workers=args.workers)
    series = trainer.train(data)
    artifacts = [series.log_path, *series.checkpoints]
    _write_run_manifest(args.out, "train", cfg.to_flat_dict(), cfg.seed, artifacts, started)
    last = trainer.state.loss_history[-1].to_dict() if trainer.state.loss_history else {}
    _print_json(
        {
            "command": "train",
            "epochs": trainer.state.epoch,
            "steps": trainer.state.step,
            "final_checkpoint": series.final,
            "last_losses": last,
        }
    )
    return 0


# -- segment ----------------------------------------------------------------


def cmd_segment(args) -> int:
    started = _now()
    if args.threshold is not None:
        threshold = ThresholdConfig(mode="fixed", value=args.threshold)
    else:
        threshold = ThresholdConfig(mode="otsu")
    ck, generator = _network_from_checkpoint(args.checkpoint, "F")
    image_size = generator.arch.image_size
    out = Path(args.out)
    mask_dir = out / "masks"
    artifacts: list[str] = []
    per_image: dict[str, dict] = {}
    metrics: list[SegMetrics] = []

    for path in _list_images(Path(args.input)):
        raw = _read_grayscale(path)
        sample = SimpleNamespace(id=path.stem, pixels=preprocess(raw, image_size=image_size))
        result = segment(sample, generator, threshold=threshold, polarity=args.polarity)
        mask = result.mask
        size = (raw.shape[0], raw.shape[1]) if args.original_size else None
        mask_path = mask_dir / f"{path.stem}_mask.png"
        save_mask_png(mask, mask_path, size=size)
        artifacts.append(str(mask_path))
        record = {"threshold": result.threshold_used, "threshold_mode": result.threshold_mode}
        if args.gt:
            gt = load_mask_png(find_ground_truth(args.gt, path.stem))
            if gt.shape != mask.shape:
                # Compare at the ground truth's resolution.
                resized = Image.fromarray(mask.astype(np.uint8) * 255, mode="L").resize(
                    (gt.shape[1], gt.shape[0]), Image.NEAREST
                )
                mask = np.asarray(resized) > 127
            scored = evaluate_masks(mask, gt)
            metrics.append(scored)
            record.update(scored.to_dict())
        per_image[path.stem] = record

    report: dict = {"per_image": per_image, "num_images": len(per_image)}
    if metrics:
        report["aggregate"] = aggregate_metrics(metrics)
    artifacts.append(str(_write_report(out, "segmentation_report.json", report)))
    _write_run_manifest(out, "segment", vars_without_func(args), None, artifacts, started)
    summary = {"command": "segment", "images": len(per_image)}
    if metrics:
        summary["aggregate"] = report["aggregate"]
    _print_json(summary)
    return 0


def vars_without_func(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func" and not callable(v)}


# -- augment ----------------------------------------------------------------


def cmd_augment(args) -> int:
    started = _now()
    ck, generator = _network_from_checkpoint(args.checkpoint, "G")
    target = args.target_class or ck.config().get("defect_class", "all")
    if target == "all":
        raise ConfigError("the checkpoint was trained on all defect classes; pass --target-class")
    data = load_dataset(args.data, "train", image_size=generator.arch.image_size, workers=args.workers)
    manifest = generate_defective(
        data.defect_free,
        generator,
        count=args.count,
        out_dir=args.out,
        target_class=target,
        seed=args.seed,
        checkpoint_ref=str(args.checkpoint),
    )
    record_real_counts(manifest, data)
    manifest_path = save_manifest(manifest, args.out)
    artifacts = [str(Path(args.out) / e.output_path) for e in manifest.entries] + [manifest_path]
    _write_run_manifest(args.out, "augment", vars_without_func(args), args.seed, artifacts, started)
    _print_json(
        {
            "command": "augment",
            "generated": len(manifest.entries),
            "target_class": target,
            "counts": manifest.counts,
            "manifest": manifest_path,
        }
    )
    return 0


# -- evaluate-fid -------------------------------------------------------------


def _load_flat_images(path, image_size: int = 256):
    files = _list_images(Path(path))
    return [preprocess(_read_grayscale(p), image_size=image_size) for p in files]


def cmd_evaluate_fid(args) -> int:
    started = _now()
    extractor = get_extractor(args.extractor)
    real = _load_flat_images(args.real)
    fake = _load_flat_images(args.fake)
    features_real = extract_features(real, extractor, batch_size=args.batch_size)
    features_fake = extract_features(fake, extractor, batch_size=args.batch_size)
    report = fid(features_real, features_fake, extractor_id=extractor.extractor_id)
    payload = report.to_dict()
    payload["command"] = "evaluate-fid"
    if args.out:
        report_path = _write_report(args.out, "fid_report.json", payload)
        _write_run_manifest(args.out, "evaluate-fid", vars_without_func(args), None, [str(report_path)], started)
    _print_json(payload)
    return 0


# -- evaluate-seg -------------------------------------------------------------


def cmd_evaluate_seg(args) -> int:
    started = _now()
    pred_dir = Path(args.pred)
    pred_files = sorted(p for p in _list_images(pred_dir) if p.suffix.lower() == ".png")
    if not pred_files:
        raise ConfigError(f"no predicted mask PNGs in {pred_dir}")
    per_image = {}
    metrics = []
    for pred_path in pred_files:
        stem = pred_path.stem
        if stem.endswith("_mask"):  # the segment command's naming
            stem = stem[: -len("_mask")]
        gt_path = find_ground_truth(args.gt, stem)
        scored = evaluate_masks(load_mask_png(pred_path), load_mask_png(gt_path))
        metrics.append(scored)
        per_image[stem] = scored.to_dict()
    payload = {
        "command": "evaluate-seg",
        "per_image": per_image,
        "aggregate": aggregate_metrics(metrics),
    }
    if args.out:
        report_path = _write_report(args.out, "seg_report.json", payload)
        _write_run_manifest(args.out, "evaluate-seg", vars_without_func(args), None, [str(report_path)], started)
    _print_json(payload)
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sigan",
        description="Unpaired translation between defect-free and defective EL images: "
        "training, defect segmentation, dataset augmentation, and evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the translation model on one dataset root")
    p_train.add_argument("--config", help="JSON file of config keys (flags override it)")
    p_train.add_argument("--data", required=True, help="dataset root with train/<class>/ directories")
    p_train.add_argument("--out", required=True, help="output directory (logs and checkpoints)")
    p_train.add_argument("--resume", help="checkpoint directory to continue from")
    p_train.add_argument("--workers", type=int, default=0, help="image-decoding threads")
    _add_train_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_seg = sub.add_parser("segment", help="segment defects in images using a trained checkpoint")
    p_seg.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p_seg.add_argument("--input", required=True, help="an image file or a directory of images")
    p_seg.add_argument("--out", required=True, help="output directory for masks and the report")
    thr = p_seg.add_mutually_exclusive_group()
    thr.add_argument("--threshold", type=float, help="fixed binarization threshold on the difference map")
    thr.add_argument("--otsu", action="store_true", help="per-image Otsu threshold (default)")
    p_seg.add_argument("--gt", help="directory of ground-truth masks (same file names)")
    p_seg.add_argument("--polarity", choices=("absolute", "signed"), default="absolute")
    p_seg.add_argument("--original-size", action="store_true", help="resize masks back to each source image's size")
    p_seg.set_defaults(func=cmd_segment)

    p_aug = sub.add_parser("augment", help="generate synthetic defective images from defect-free ones")
    p_aug.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p_aug.add_argument("--data", required=True, help="dataset root; its train split supplies the inputs")
    p_aug.add_argument("--count", required=True, type=int, help="number of images to generate")
    p_aug.add_argument("--out", required=True, help="output directory for images and manifest.json")
    p_aug.add_argument("--target-class", help="defect class to label outputs with (default: from the checkpoint)")
    p_aug.add_argument("--seed", type=int, default=0)
    p_aug.add_argument("--workers", type=int, default=0, help="image-decoding threads")
    p_aug.set_defaults(func=cmd_augment)

    p_fid = sub.add_parser("evaluate-fid", help="distribution distance between two image directories")
    p_fid.add_argument("--real", required=True, help="directory of real images")
    p_fid.add_argument("--fake", required=True, help="directory of generated images")
    p_fid.add_argument(
        "--extractor",
        default="inception-v3",
        help=f"feature extractor (available: {', '.join(available_extractors())})",
    )
    p_fid.add_argument("--batch-size", type=int, default=32)
    p_fid.add_argument("--out", help="also write fid_report.json and a run manifest here")
    p_fid.set_defaults(func=cmd_evaluate_fid)

    p_eseg = sub.add_parser("evaluate-seg", help="score predicted masks against ground truth")
    p_eseg.add_argument("--pred", required=True, help="directory of predicted mask PNGs")
    p_eseg.add_argument("--gt", required=True, help="directory of ground-truth mask PNGs (matching names)")
    p_eseg.add_argument("--out", help="also write seg_report.json and a run manifest here")
    p_eseg.set_defaults(func=cmd_evaluate_seg)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except SiganError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
