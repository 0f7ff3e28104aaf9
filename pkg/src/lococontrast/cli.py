"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ChecksumError, ConfigError, ContractViolation, EmptyDataset, NonFiniteLoss, VersionError

logger = logging.getLogger("lococontrast")

SEED_ENV = "LOCOCONTRAST_SEED"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _default_seed(value):
    if value is not None:
        return value
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc


def _parse_crop(text: str | None):
    if text is None:
        return None
    from .cropper import CropSpec

    try:
        a, b, side = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--crop expects a,b,side integers, got {text!r}") from exc
    return CropSpec(a, b, side, side)


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _write_json(path: Path, payload: dict) -> Path:
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    os.replace(tmp, path)
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> list[Path]:
    from .dataset import SynthConfig, generate_synthetic

    config = SynthConfig(image_size=args.size, min_shapes=args.min_shapes,
                         max_shapes=args.max_shapes, seed=_default_seed(args.seed))
    manifest = generate_synthetic(config, args.count, args.out, split=args.split,
                                  start_index=args.start_index)
    print(f"wrote {len(manifest)} images to {args.out}")
    return [Path(args.out) / "manifest.json"]


def cmd_train(args) -> list[Path]:
    from .evalkit.plotting import plot_loss_curve
    from .trainer import TrainConfig, Trainer, read_train_log

    config = TrainConfig.from_file(_require(args.config, "config file"))
    # flag > config file > built-in default
    for flag, attr in (("epochs", "epochs"), ("seed", "seed"), ("out_dir", "out_dir"),
                       ("data", "dataset"), ("lr", "learning_rate"), ("batch_size", "batch_size")):
        value = getattr(args, flag)
        if value is not None:
            setattr(config, attr, value)
    if args.seed is None and os.environ.get(SEED_ENV) is not None and "seed" not in json.loads(
            Path(args.config).read_text()):
        config.seed = _default_seed(None)
    if config.dataset:
        _require(config.dataset, "dataset")
    trainer = Trainer(config)
    if args.resume:
        trainer.resume(_require(args.resume, "checkpoint"))
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "config_resolved.json", config.to_json())
    result = trainer.train()
    log = read_train_log(result.log_path)
    paths = [result.checkpoint, result.log_path]
    if log:
        paths.append(plot_loss_curve([r["loss"] for r in log], out_dir / "loss.png"))
    print(f"trained {result.epochs_run} epoch(s); checkpoint {result.checkpoint}")
    return paths


def _load_models(ckpt):
    from .evalkit import ModelEmbedder
    from .trainer import models_from_checkpoint

    crop_encoder, pyramid_encoder, config = models_from_checkpoint(_require(ckpt, "checkpoint"))
    return ModelEmbedder(crop_encoder, pyramid_encoder), config


def cmd_eval(args) -> list[Path]:
    from .dataset import open_dataset
    from .evalkit import eval_sga_riga
    from .evalkit.plotting import plot_metrics

    embedder, config = _load_models(args.ckpt)
    dataset = open_dataset(_require(args.data, "dataset"), split="eval")
    min_side = args.min_side
    if min_side is None and dataset.generator_config is None:
        min_side = config.min_side
    seed = _default_seed(args.seed)
    provenance = {"ckpt": str(args.ckpt), "data": str(args.data), "seed": seed,
                  "mode": args.mode, "min_side": min_side, "train_config": config.to_json(),
                  "version": __version__}
    report = eval_sga_riga(embedder, dataset, seed=seed, mode=args.mode, min_side=min_side,
                           provenance=provenance)
    out = Path(args.out)
    json_path, csv_path = report.write(out)
    paths = [json_path, csv_path]
    if not args.no_plot:
        paths.append(plot_metrics(report, out / "metrics.png"))
    print(report.to_csv(), end="")
    return paths


def cmd_heatmap(args) -> list[Path]:
    from .dataset import ensure_min_size, read_image
    from .evalkit import localize_image
    from .evalkit.plotting import render_heatmap

    embedder, _ = _load_models(args.ckpt)
    image = read_image(_require(args.image, "image"))
    if args.min_side:
        image = ensure_min_size(image, args.min_side)
    seed = _default_seed(args.seed)
    record, heat = localize_image(embedder, image, seed, crop=_parse_crop(args.crop))
    out = Path(args.out)
    stem = args.stem or Path(args.image).stem
    paths = render_heatmap(heat, image.pixels, out, stem=stem)
    summary = {
        "image": str(args.image), "ckpt": str(args.ckpt), "seed": seed,
        "crop": record.crop.to_json(),
        "argmax": [{"level": c.level, "row": c.row, "col": c.col} for c in record.argmax],
        "files": [p.name for p in paths],
    }
    paths.append(_write_json(out / f"{stem}_heatmap.json", summary))
    print("\n".join(str(p) for p in paths))
    return paths


def cmd_retrieve(args) -> list[Path]:
    from .cropper import extract_crop
    from .dataset import ensure_min_size, open_dataset, read_image
    from .evalkit.metrics import image_stream
    from .evalkit.plotting import contact_sheet
    from .evalkit.retrieval import retrieve_topk
    from .cropper import sample_crop

    embedder, _ = _load_models(args.ckpt)
    dataset = open_dataset(_require(args.data, "dataset"), split="eval")
    image = read_image(_require(args.image, "image"))
    if args.min_side:
        image = ensure_min_size(image, args.min_side)
    seed = _default_seed(args.seed)
    crop = _parse_crop(args.crop) or sample_crop(image.width, image.height,
                                                 image_stream(seed, image.id))
    query = extract_crop(image, crop)
    result = retrieve_topk(query, dataset, embedder, k=args.k, min_side=args.min_side,
                           query_info={"image": str(args.image), "crop": crop.to_json(),
                                       "seed": seed, "ckpt": str(args.ckpt), "k": args.k})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [result.write(out / "retrieval.json")]
    if args.contact_sheet:
        by_id = {item.id: i for i, item in enumerate(dataset.items)}
        images = [dataset.load(by_id[i]).pixels for i, _ in result.entries]
        labels = [f"#{r + 1} {i} ({s:.3f})" for r, (i, s) in enumerate(result.entries)]
        paths.append(contact_sheet(query.pixels, images, labels, out / "retrieval.png"))
    for rank, (image_id, score) in enumerate(result.entries, 1):
        print(f"{rank}\t{image_id}\t{score:.6f}")
    return paths


def cmd_selfcheck(args) -> list[Path]:
    from .selfcheck import run_all

    if not run_all(seed=_default_seed(args.seed)):
        raise RuntimeError("selfcheck failed")
    return []


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lococontrast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--workers", type=int, default=None,
                        help="cap on intra-op threads (default: torch's choice)")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    seed_help = f"random seed (default: ${SEED_ENV} or 0)"

    p = sub.add_parser("synth", help="generate a synthetic shape-scene dataset")
    p.add_argument("--size", type=int, default=256, help="square image side in pixels")
    p.add_argument("--count", type=int, required=True, help="number of images")
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.add_argument("--out", required=True, help="output directory (images + manifest.json)")
    p.add_argument("--split", choices=["train", "eval"], default="train")
    p.add_argument("--start-index", type=int, default=0,
                   help="first image index; disjoint ranges give disjoint datasets")
    p.add_argument("--min-shapes", type=int, default=3)
    p.add_argument("--max-shapes", type=int, default=8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train both encoders from a JSON config")
    p.add_argument("--config", required=True, help="TrainConfig JSON file")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--data", default=None, help="override config dataset (manifest or directory)")
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.add_argument("--lr", type=float, default=None, help="override config learning_rate")
    p.add_argument("--batch-size", type=int, default=None, help="override config batch_size")
    p.add_argument("--out-dir", default=None, help="override config out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="SGA / RIGA / GAP-R per pyramid level")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="manifest JSON or image directory")
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.add_argument("--mode", choices=["center", "full-cell"], default="center",
                   help="containment test for a cell inside the crop box")
    p.add_argument("--min-side", type=int, default=None,
                   help="upscale smaller images (default: the training config's, none for synthetic)")
    p.add_argument("--out", default="eval_out", help="output directory")
    p.add_argument("--no-plot", action="store_true", help="skip metrics.png")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="render per-level and combined similarity heatmaps")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--image", required=True, help="input image")
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.add_argument("--crop", default=None, help="query crop as a,b,side (default: random)")
    p.add_argument("--min-side", type=int, default=None, help="upscale smaller images")
    p.add_argument("--out", default="heatmaps", help="output directory")
    p.add_argument("--stem", default=None, help="file name prefix (default: image stem)")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("retrieve", help="top-k images for a query crop")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="manifest JSON or image directory")
    p.add_argument("--image", required=True, help="image to take the query crop from")
    p.add_argument("--k", type=int, default=10, help="number of results")
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.add_argument("--crop", default=None, help="query crop as a,b,side (default: random)")
    p.add_argument("--min-side", type=int, default=None, help="upscale smaller images")
    p.add_argument("--out", default="retrieval_out", help="output directory")
    p.add_argument("--contact-sheet", action="store_true", help="also write retrieval.png")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("selfcheck", help="run the built-in oracle checks")
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if getattr(args, "k", 1) < 1:
            raise UsageError("--k must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.workers:
        import torch

        torch.set_num_threads(args.workers)
    try:
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, OSError, ConfigError, ContractViolation, EmptyDataset,
            NonFiniteLoss, VersionError, ChecksumError, RuntimeError, ValueError) as exc:
        print(f"lococontrast {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
