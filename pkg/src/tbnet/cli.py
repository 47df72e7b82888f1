"""Command-line entry point: generate | train | eval | predict.

Exit codes: 0 success, 2 usage/configuration/IO errors, 3 numeric failure.
Relative --out paths are resolved under $TBNET_OUTPUT_ROOT when it is set.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .core import (
    ClassTaxonomy,
    ConfigError,
    DataLoadError,
    NumericError,
    ShapeError,
    TrainConfig,
    config_from_text,
    config_to_text,
    parse_config_value,
    validate_config,
)
from .data import (
    PALETTE,
    GeneratorSpec,
    class_pixel_stats,
    default_class_mix,
    generate_dataset,
    load_dataset,
    palette_bytes,
    save_dataset,
)
from .training import (
    AblationFlags,
    evaluate,
    load_checkpoint,
    predict,
    train,
)
from . import reports

CONFIG_FLAGS = (
    "input_size",
    "learning_rate",
    "decay",
    "epochs",
    "lambda_seg",
    "lambda_boundary",
    "weighting_mode",
    "seed",
    "batch_size",
    "width_divisor",
    "backbone_blocks",
    "projection_depth",
    "lr_decay",
    "reduction",
    "boundary_fusion_source",
    "attention_cap",
)


def _resolve_out(path: str) -> Path:
    root = os.environ.get("TBNET_OUTPUT_ROOT")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def dataset_fingerprint(root: Path) -> str:
    """SHA-256 over relative paths and bytes of every file under ``root``."""
    digest = hashlib.sha256()
    if root.is_file():
        digest.update(root.name.encode())
        digest.update(root.read_bytes())
    else:
        for path in sorted(root.rglob("*")):
            if path.is_file():
                digest.update(str(path.relative_to(root)).encode())
                digest.update(path.read_bytes())
    return digest.hexdigest()


@dataclasses.dataclass
class RunManifest:
    """Provenance record written into the output directory before work starts."""

    command: str
    argv: list[str]
    config: dict
    flags: dict
    dataset_fingerprint: str | None
    code_version: str
    created_utc: str

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")


def write_manifest(out_dir: Path, command: str, cfg: TrainConfig | None,
                   flags: AblationFlags | None, data_root: Path | None) -> None:
    manifest = RunManifest(
        command=command,
        argv=sys.argv[1:],
        config=dataclasses.asdict(cfg) if cfg else {},
        flags=dataclasses.asdict(flags) if flags else {},
        dataset_fingerprint=dataset_fingerprint(data_root) if data_root else None,
        code_version=__version__,
        created_utc=datetime.now(timezone.utc).isoformat(),
    )
    manifest.write(out_dir / "manifest.json")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for name in CONFIG_FLAGS:
        flag = "--" + name.replace("_", "-")
        if name == "input_size":
            parser.add_argument("--size", "--input-size", dest="input_size", default=None,
                                help="input size, one integer or H,W")
        else:
            parser.add_argument(flag, dest=name, default=None)


def _config_from_args(args) -> TrainConfig:
    if getattr(args, "config", None):
        cfg = config_from_text(Path(args.config).read_text())
    else:
        cfg = TrainConfig()
    overrides = {}
    for name in CONFIG_FLAGS:
        raw = getattr(args, name, None)
        if raw is not None:
            overrides[name] = parse_config_value(name, str(raw))
    cfg = dataclasses.replace(cfg, **overrides)
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("invalid configuration: " + "; ".join(problems))
    return cfg


def _parse_class_mix(text: str, taxonomy: ClassTaxonomy) -> dict[int, float]:
    mix = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, value = part.partition("=")
        try:
            cid = taxonomy.id_of(name.strip())
        except KeyError:
            raise ConfigError(f"unknown class name {name.strip()!r} in --class-mix")
        mix[cid] = float(value) if value else 1.0
    return mix


def cmd_generate(args) -> int:
    taxonomy = ClassTaxonomy.default()
    mix = _parse_class_mix(args.class_mix, taxonomy) if args.class_mix else default_class_mix(taxonomy)
    spec = GeneratorSpec(
        num_samples=args.samples,
        image_size=tuple(parse_config_value("input_size", str(args.size))),
        seed=args.seed,
        class_mix=mix,
        illumination=args.illumination,
        grain=args.grain,
    )
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "generate", None, None, None)
    dataset = generate_dataset(spec, taxonomy, split=args.split)
    save_dataset(dataset, out)
    counts = class_pixel_stats(dataset)
    table = reports.class_stats_table(counts, taxonomy)
    print(f"wrote {len(dataset)} samples to {out / args.split}")
    print(table, end="")
    (out / f"{args.split}_stats.csv").write_text(reports.class_stats_to_csv(counts, taxonomy))
    reports.plot_class_distribution(counts, taxonomy, out / f"{args.split}_class_pixels.png")
    return 0


def cmd_train(args) -> int:
    out = _resolve_out(args.out)
    data_root = Path(args.data)
    flags = AblationFlags(
        use_caa=not args.no_attn,
        use_boundary_stream=not args.no_boundary,
        use_class_weighting=not args.no_weighting,
    )
    resume_state = None
    if args.resume:
        resume_state = load_checkpoint(args.resume)
        stored = resume_state.config
        for name in CONFIG_FLAGS:
            raw = getattr(args, name, None)
            if raw is None or name == "epochs":
                continue
            wanted = parse_config_value(name, str(raw))
            if wanted != getattr(stored, name):
                raise ConfigError(
                    f"--{name.replace('_', '-')} {wanted} conflicts with the "
                    f"checkpoint value {getattr(stored, name)} on --resume"
                )
        if flags != resume_state.flags and (args.no_attn or args.no_boundary
                                            or args.no_weighting):
            raise ConfigError(
                f"ablation flags {flags} conflict with the checkpoint flags "
                f"{resume_state.flags} on --resume"
            )
        cfg = stored
        if args.epochs is not None:
            cfg = dataclasses.replace(cfg, epochs=int(args.epochs))
        flags = resume_state.flags
    else:
        cfg = _config_from_args(args)

    train_data = load_dataset(data_root, "train")
    val_data = None
    if (data_root / "val").is_dir():
        val_data = load_dataset(data_root, "val")

    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "train", cfg, flags, data_root)
    (out / "config.txt").write_text(config_to_text(cfg))
    state, rows = train(
        cfg,
        train_data,
        flags,
        val_data=val_data,
        out_dir=out,
        resume=resume_state,
        val_every=args.val_every,
    )
    reports.plot_training_curves(rows, out / "loss_curves.png")
    summary = f"finished {state.step} steps over {state.epoch} epochs"
    if math.isfinite(state.best_val_miou):
        summary += f"; best val mIoU {state.best_val_miou:.4f}"
    print(summary)
    return 0


def cmd_eval(args) -> int:
    out = _resolve_out(args.out)
    state = load_checkpoint(args.checkpoint)
    data_root = Path(args.data)
    dataset = load_dataset(data_root, args.split, taxonomy=state.taxonomy)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "eval", state.config, state.flags, data_root)
    report = evaluate(state, dataset)
    paths = reports.save_metrics_report(report, state.taxonomy, out)
    print(reports.metrics_table_text(report, state.taxonomy), end="")
    print(f"mPA:  {report.mean_cpa:.4f}")
    print(f"mIoU: {report.mean_iou:.4f}")
    print(f"reports written to {paths['csv'].parent}")
    return 0


def _overlay(image: np.ndarray, labels: np.ndarray, background_id: int) -> np.ndarray:
    gray = np.repeat((image * 255).astype(np.uint8)[..., None], 3, axis=-1)
    colors = np.zeros_like(gray)
    for cid, rgb in PALETTE.items():
        colors[labels == cid] = rgb
    blend = gray.astype(np.float32)
    fg = labels != background_id
    blend[fg] = 0.5 * gray[fg] + 0.5 * colors[fg].astype(np.float32)
    return np.clip(np.rint(blend), 0, 255).astype(np.uint8)


def cmd_predict(args) -> int:
    out = _resolve_out(args.out)
    state = load_checkpoint(args.checkpoint)
    image_path = Path(args.image)
    if not image_path.exists():
        raise DataLoadError(f"input image {image_path} does not exist")
    image = np.asarray(Image.open(image_path).convert("L"), dtype=np.float32) / 255.0
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "predict", state.config, state.flags, image_path)
    labels, boundary = predict(state, image)

    stem = image_path.stem
    mask = Image.fromarray(labels.astype(np.uint8), mode="P")
    mask.putpalette(palette_bytes(state.taxonomy))
    mask.save(out / f"{stem}_labels.png")
    Image.fromarray(np.rint(boundary * 255).astype(np.uint8), mode="L").save(
        out / f"{stem}_boundary.png"
    )
    Image.fromarray(
        _overlay(image, labels, state.taxonomy.background_id), mode="RGB"
    ).save(out / f"{stem}_overlay.png")
    print(f"wrote {stem}_labels.png, {stem}_boundary.png, {stem}_overlay.png to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tbnet",
        description="Three-stream boundary-aware segmentation for pavement defects",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a deterministic synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=int, default=64)
    g.add_argument("--size", default="128")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="train", choices=("train", "val", "test"))
    g.add_argument("--class-mix", dest="class_mix", default=None,
                   help="e.g. 'crack=2,patch=1'; default mirrors the survey mix")
    g.add_argument("--illumination", type=float, default=0.08)
    g.add_argument("--grain", type=float, default=0.03)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help="flat key = value config file")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--val-every", dest="val_every", type=int, default=1)
    t.add_argument("--no-attn", action="store_true", help="drop context attention")
    t.add_argument("--no-boundary", action="store_true", help="drop the boundary stream")
    t.add_argument("--no-weighting", action="store_true", help="plain unweighted CE")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one gray-scale image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, DataLoadError, ShapeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
