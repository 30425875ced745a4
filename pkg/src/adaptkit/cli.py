"""Command-line front end: train / eval / infer / gen-synthetic.

Runs are described by a YAML config file (nested maps) merged with
command-line flags and ``--set dotted.key=value`` overrides, flags winning.
Exit codes: 0 success, 2 configuration/argument/backend, 3 data,
4 protocol, 5 checkpoint, 6 diverged training, 1 anything else.
All outputs land under ``--output-dir``.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np
import yaml
from PIL import Image

from .backbone import EncoderConfig, create_backend, restore_backend
from .checkpoint import Checkpoint
from .data import (
    DatasetSpec,
    SyntheticSpec,
    generate_synthetic,
    load_and_resize,
    sample_prompts,
    scan,
)
from .errors import (
    AdaptKitError,
    ArgumentError,
    BackendError,
    CheckpointError,
    ConfigurationError,
    DataError,
    MetricUndefinedError,
    ProtocolError,
    TrainingDivergedError,
)
from .inference import (
    Predictor,
    predict_batch,
    save_map_png,
    save_overlay_png,
    save_prediction_json,
)
from .metrics import PixelTruth, evaluate
from .training import TrainConfig, fit

EXIT_CODES = (
    (TrainingDivergedError, 6),
    (CheckpointError, 5),
    ((ProtocolError, MetricUndefinedError), 4),
    (DataError, 3),
    ((ConfigurationError, ArgumentError, BackendError), 2),
)

DEFAULT_CONFIG = {
    "dataset": {"root": None, "layout": "mvtec_folders", "resolution": None, "categories": None},
    "backbone": {"id": "synthetic", "seed": 0},
    "train": {},
    "synthetic": {},
    "shots": 0,
    "seed": 0,
    "workers": 1,
    "output_dir": "adaptkit-out",
    "checkpoint": None,
    "mode": None,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = _assemble_config(args)
        os.makedirs(config["output_dir"], exist_ok=True)
        handler = {
            "train": run_train,
            "eval": run_eval,
            "infer": run_infer,
            "gen-synthetic": run_gen_synthetic,
        }[args.command]
        handler(config, args)
        return 0
    except AdaptKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for types, code in EXIT_CODES:
            if isinstance(exc, types):
                return code
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train adapters on a labelled dataset"),
        ("eval", "evaluate a checkpoint on a dataset's test split"),
        ("infer", "score individual images"),
        ("gen-synthetic", "write a seeded synthetic dataset"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--dataset-root", help="dataset root directory")
        p.add_argument("--backbone", help="backend id (e.g. synthetic)")
        p.add_argument("--checkpoint", help="checkpoint path")
        p.add_argument("--shots", type=int, help="number of normal prompts (0 = zero-shot)")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--workers", type=int, help="parallel inference workers")
        p.add_argument("--output-dir", help="directory for all outputs")
        p.add_argument(
            "--mode", choices=("alternating", "joint", "context_off"), help="training mode"
        )
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config entry at a dotted path (repeatable)",
        )
        if name == "infer":
            p.add_argument("images", nargs="+", help="image files to score")
            p.add_argument("--prompts", nargs="*", default=[], help="normal prompt image files")
    return parser


def _assemble_config(args) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"invalid YAML in {args.config}: {exc}") from exc
        _deep_merge(config, loaded)
    flag_map = {
        "dataset_root": ("dataset", "root"),
        "backbone": ("backbone", "id"),
        "checkpoint": ("checkpoint",),
        "shots": ("shots",),
        "seed": ("seed",),
        "workers": ("workers",),
        "output_dir": ("output_dir",),
        "mode": ("mode",),
    }
    for attr, path in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            _set_path(config, path, value)
    for override in args.set:
        if "=" not in override:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {override!r}")
        key, _, raw = override.partition("=")
        _set_path(config, tuple(key.split(".")), yaml.safe_load(raw))
    if config.get("mode"):
        config.setdefault("train", {})["mode"] = config["mode"]
    return config


def _deep_merge(base: dict, extra: dict) -> None:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = value


def _set_path(config: dict, path: tuple, value) -> None:
    node = config
    for key in path[:-1]:
        node = node.setdefault(key, {})
    node[path[-1]] = value


def _dataset_spec(config: dict) -> DatasetSpec:
    ds = config["dataset"]
    if not ds.get("root"):
        raise ConfigurationError("no dataset root configured (--dataset-root or dataset.root)")
    return DatasetSpec(
        root_path=ds["root"],
        layout=ds.get("layout", "mvtec_folders"),
        categories=ds.get("categories"),
        resolution=ds.get("resolution") or 518,
    )


def _make_backbone(config: dict, resolution: int):
    section = dict(config["backbone"])
    backend_id = section.pop("id", "synthetic")
    encoder_fields = {
        k: section.pop(k)
        for k in list(section)
        if k in ("patch_size", "embed_dim", "feature_layers", "prompt_length_capacity", "text_width")
    }
    if "feature_layers" in encoder_fields:
        encoder_fields["feature_layers"] = tuple(encoder_fields["feature_layers"])
    encoder = EncoderConfig(input_resolution=resolution, **encoder_fields)
    return create_backend(backend_id, config=encoder, **section)


def run_train(config: dict, args) -> None:
    spec = _dataset_spec(config)
    backbone = _make_backbone(config, spec.resolution)
    train_cfg = TrainConfig(seed=config["seed"], **config.get("train", {}))
    checkpoint = fit(spec, train_cfg, backbone)
    out_dir = config["output_dir"]
    ckpt_path = os.path.join(out_dir, "checkpoint.akpt")
    checkpoint.save(ckpt_path)
    log_path = os.path.join(out_dir, "training_log.json")
    with open(log_path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint.history, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for entry in checkpoint.history:
        line = " ".join(f"{k}={v:.4f}" for k, v in entry.items() if k != "epoch")
        print(f"epoch {entry['epoch']}: {line}")
    print(f"checkpoint written to {ckpt_path}")


def _load_checkpoint(config: dict) -> Checkpoint:
    path = config.get("checkpoint")
    if not path:
        raise ConfigurationError("this command requires --checkpoint")
    return Checkpoint.load(path)


def run_eval(config: dict, args) -> None:
    checkpoint = _load_checkpoint(config)
    backbone = restore_backend(checkpoint.backbone_id, checkpoint.backbone_config)
    predictor = Predictor(checkpoint, backbone)
    spec = _dataset_spec(config)
    samples = scan(spec)
    test = [s for s in samples if s.split == "test"]
    if not test:
        raise ProtocolError("dataset has no test-split samples")
    shots = int(config["shots"])
    seed = int(config["seed"])
    workers = int(config["workers"])
    resolution = backbone.config.input_resolution

    predictions, truths = [], []
    for category in sorted({s.category for s in test}):
        cat_samples = [s for s in test if s.category == category]
        bank = None
        if shots > 0:
            prompt_samples = sample_prompts(samples, category, shots, seed)
            prompt_images = [load_and_resize(p, resolution)[0] for p in prompt_samples]
            bank = predictor.bank_for(prompt_images, shots, class_id=category)
        loaded = [load_and_resize(s, resolution) for s in cat_samples]
        images = [img for img, _ in loaded]
        paths = [s.image_path for s in cat_samples]
        preds = predict_batch(images, bank, checkpoint, workers=workers, backbone=backbone, paths=paths)
        predictions.extend(preds)
        truths.extend(
            PixelTruth(path=s.image_path, category=s.category, label=s.label, mask=mask)
            for s, (_, mask) in zip(cat_samples, loaded)
        )

    labels = [t.label for t in truths]
    masked = all(s.mask_path is not None for s in test if s.label == 1)
    image_ok = 0 in labels and 1 in labels
    if image_ok and masked:
        level = "both"
    elif image_ok:
        level = "image"
    elif masked and 1 in labels:
        level = "pixel"
    else:
        raise ProtocolError("dataset supports neither image- nor pixel-level evaluation")

    report = evaluate(predictions, truths, level=level)
    out_dir = config["output_dir"]
    stem = f"report_shots{shots}_seed{seed}"
    with open(os.path.join(out_dir, f"{stem}.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    table = report.to_table()
    with open(os.path.join(out_dir, f"{stem}.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
        fh.write("\n")
    print(table)


def run_infer(config: dict, args) -> None:
    checkpoint = _load_checkpoint(config)
    backbone = restore_backend(checkpoint.backbone_id, checkpoint.backbone_config)
    predictor = Predictor(checkpoint, backbone)
    resolution = backbone.config.input_resolution
    shots = int(config["shots"])
    bank = None
    if shots > 0:
        if len(args.prompts) < shots:
            raise ConfigurationError(f"--shots {shots} needs at least {shots} --prompts paths")
        prompt_images = [_load_image(p, resolution)[0] for p in args.prompts]
        bank = predictor.bank_for(prompt_images, shots)

    out_dir = config["output_dir"]
    failures = []
    for path in args.images:
        try:
            resized, original = _load_image(path, resolution)
            pred = predictor.few_shot(resized, bank, path) if bank else predictor.zero_shot(resized, path)
            stem = os.path.splitext(os.path.basename(path))[0]
            save_prediction_json(pred, os.path.join(out_dir, f"{stem}.json"))
            save_map_png(pred.map, os.path.join(out_dir, f"{stem}_map.png"))
            overlay_map = _resize_map(pred.map, original.shape[:2])
            save_overlay_png(original, overlay_map, os.path.join(out_dir, f"{stem}_overlay.png"))
            print(f"{path}: score={pred.score:.4f} shots={pred.shots}")
        except (DataError, OSError) as exc:
            failures.append((path, str(exc)))
            print(f"error: {path}: {exc}", file=sys.stderr)
    if failures:
        raise DataError(f"{len(failures)} image(s) failed: " + ", ".join(p for p, _ in failures))


def _load_image(path: str, resolution: int):
    """Returns (resized [res, res, 3] float, original [h, w, 3] float)."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            original = np.asarray(rgb, dtype=np.float32) / 255.0
            resized = np.asarray(
                rgb.resize((resolution, resolution), Image.BILINEAR), dtype=np.float32
            ) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return resized, original


def _resize_map(anomaly_map: np.ndarray, shape: tuple) -> np.ndarray:
    img = Image.fromarray((np.clip(anomaly_map, 0, 1) * 255).astype(np.uint8), mode="L")
    resized = img.resize((shape[1], shape[0]), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float32) / 255.0


def run_gen_synthetic(config: dict, args) -> None:
    section = dict(config.get("synthetic", {}))
    section.setdefault("seed", config["seed"])
    if "categories" in section:
        section["categories"] = tuple(section["categories"])
    if "resolution" not in section and config["dataset"].get("resolution"):
        section["resolution"] = config["dataset"]["resolution"]
    spec = SyntheticSpec(**section)
    out = generate_synthetic(config["output_dir"], spec)
    n = len(scan(out))
    print(f"wrote {n} samples to {out.root_path}")


if __name__ == "__main__":
    sys.exit(main())
