"""Command-line entry point.

Subcommands: synth, train, eval, infer, ablate, dump-iters, dump-latents,
serve. Exit codes: 0 success, 1 usage error, 2 runtime failure. Every
subcommand is deterministic given its --seed.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

ENV_CHECKPOINT = "TEXTSCRUB_CHECKPOINT"
ENV_PORT = "TEXTSCRUB_PORT"

ABLATION_CSV_HEADER = ["variant", "PSNR", "MSSIM", "MSE", "AGE", "pEPs", "pCEPS", "Para."]


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="textscrub", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--count", type=int, required=True, help="number of samples")
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-instances", type=int, default=2)
    p.add_argument("--max-instances", type=int, default=4)
    p.add_argument("--font", default=None, help="path to a .ttf font (default: bundled)")
    p.add_argument("--font-size-min", type=int, default=None)
    p.add_argument("--font-size-max", type=int, default=None)
    p.add_argument(
        "--background-dir",
        default=None,
        help="draw backgrounds from image files in this directory instead of procedural textures",
    )
    p.add_argument("--write-masks", action="store_true", help="also write masks/<id>.png")
    p.add_argument("--dilate", type=int, default=0, help="grow written masks by N pixels")

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint file to write (.npz)")
    p.add_argument("--config", default=None, help="flat key=value training config file")
    p.add_argument("--log", default=None, help="JSONL per-step training log")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--base-lr", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--latent-channels", type=int, default=None)
    p.add_argument("--backbone-width", type=int, default=None)
    p.add_argument("--residual-blocks", type=int, default=None)

    p = sub.add_parser("eval", help="score a checkpoint or prediction directory")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--pred-dir", default=None, help="directory of <id>.png predictions")
    p.add_argument("--protocol", choices=["raw", "composited"], default="raw")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--dilate", type=int, default=0)
    p.add_argument("--csv", default=None, help="append a CSV row here")

    p = sub.add_parser("infer", help="erase masked regions of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True, help="single-channel 0/255 PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=None, help="override trained iteration count")
    p.add_argument("--dump-every", type=int, default=0, help="write every Nth iteration frame")
    p.add_argument("--dump-dir", default=None, help="directory for frames (default: out dir)")
    p.add_argument("--raw", action="store_true", help="skip non-mask compositing")

    p = sub.add_parser("ablate", help="train an ablation variant and append a results row")
    p.add_argument("--variant", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-table", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--protocol", choices=["raw", "composited"], default="raw")
    p.add_argument("--latent-channels", type=int, default=None)
    p.add_argument("--backbone-width", type=int, default=None)
    p.add_argument("--residual-blocks", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("dump-iters", help="write the per-iteration predictions")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--iters", type=int, default=None)

    p = sub.add_parser("dump-latents", help="write per-iteration latent heatmaps")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--iters", type=int, default=None)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    p.add_argument("--checkpoint", default=None, help=f"default: ${ENV_CHECKPOINT}")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=None, help=f"default: ${ENV_PORT} or 8000")
    p.add_argument("--max-side", type=int, default=1024)

    return parser


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .data import save_dataset
    from .png_io import read_image
    from .synth import make_scene, make_triplet

    backgrounds = None
    if args.background_dir:
        paths = sorted(Path(args.background_dir).glob("*"))
        paths = [p for p in paths if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")]
        if not paths:
            raise RuntimeError(f"no images found in {args.background_dir}")
        backgrounds = paths

    size_range = None
    if args.font_size_min and args.font_size_max:
        size_range = (args.font_size_min, args.font_size_max)

    triplets = []
    for i in range(args.count):
        seed = args.seed + i
        background = None
        if backgrounds:
            rng = np.random.default_rng(seed)
            img = read_image(backgrounds[int(rng.integers(0, len(backgrounds)))])
            y = int(rng.integers(0, max(1, img.shape[0] - args.height + 1)))
            x = int(rng.integers(0, max(1, img.shape[1] - args.width + 1)))
            background = img[y : y + args.height, x : x + args.width]
            if background.shape[:2] != (args.height, args.width):
                raise RuntimeError(
                    f"background {backgrounds[0]} smaller than {args.height}x{args.width}"
                )
        scene = make_scene(
            args.height,
            args.width,
            seed=seed,
            min_instances=args.min_instances,
            max_instances=args.max_instances,
            font_path=args.font,
            font_size_range=size_range,
            background=background,
        )
        # canonical on-disk form: gt has every instance removed; partial
        # masks are derived at training time
        t = make_triplet(scene, alpha=0.0, seed=seed)
        if args.dilate:
            from .synth import dilate_mask

            t.mask[:] = dilate_mask(t.mask, args.dilate)
        triplets.append(t)
    ids = save_dataset(args.out, triplets, write_masks=args.write_masks)
    print(f"wrote {len(ids)} samples under {args.out}")
    return EXIT_OK


def _train_config_from_args(args):
    from .training import TrainConfig, load_train_config

    config = load_train_config(args.config) if args.config else TrainConfig()
    overrides = {}
    for attr, flag in [
        ("epochs", "epochs"),
        ("batch_size", "batch_size"),
        ("crop", "crop"),
        ("base_lr", "base_lr"),
        ("iterations", "iterations"),
        ("alpha", "alpha"),
        ("seed", "seed"),
    ]:
        value = getattr(args, flag, None)
        if value is not None:
            overrides[attr] = value
    return replace(config, **overrides).validate()


def _model_config_from_args(args):
    from .model import ModelConfig

    kwargs = {}
    if getattr(args, "latent_channels", None) is not None:
        kwargs["latent_channels"] = args.latent_channels
    if getattr(args, "backbone_width", None) is not None:
        kwargs["backbone_width"] = args.backbone_width
    if getattr(args, "residual_blocks", None) is not None:
        kwargs["num_residual_blocks"] = args.residual_blocks
    return ModelConfig(**kwargs)


def cmd_train(args) -> int:
    from .data import load_dataset_dir
    from .model import count_parameters, save_checkpoint
    from .training import build_model, derive_mask_variant, make_optimizer, train

    config = _train_config_from_args(args)
    model_config = _model_config_from_args(args)
    triplets = load_dataset_dir(args.data)
    data = derive_mask_variant(triplets, config.mask_mode, config.alpha, config.seed)
    model = build_model(model_config, config)
    optimizer = make_optimizer(model, config)
    print(
        f"training on {len(data)} samples, {config.epochs} epochs, "
        f"{count_parameters(model, 'all')} parameters"
    )
    model, reports = train(model, data, config, optimizer=optimizer, log_path=args.log)
    save_checkpoint(args.out, model, optimizer=optimizer, extra={"steps": len(reports)})
    if reports:
        print(f"final loss {reports[-1].total:.6f} after {len(reports)} steps")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_dataset_dir
    from .metrics import evaluate_dataset

    if (args.checkpoint is None) == (args.pred_dir is None):
        raise UsageError("provide exactly one of --checkpoint or --pred-dir")
    triplets = load_dataset_dir(args.data, dilate=args.dilate)
    if args.checkpoint:
        from .model import load_checkpoint, model_predictor

        model, _meta = load_checkpoint(args.checkpoint)
        predictor = model_predictor(model, iterations=args.iters)
    else:
        predictor = args.pred_dir
    report = evaluate_dataset(predictor, triplets, protocol=args.protocol)
    print(report.format_text())
    row = [
        f"{report.psnr:.4f}",
        f"{report.mssim:.4f}",
        f"{report.mse:.6f}",
        f"{report.age:.4f}",
        f"{report.peps:.6f}",
        f"{report.pceps:.6f}",
    ]
    print("csv:", ",".join(["PSNR", "MSSIM", "MSE", "AGE", "pEPs", "pCEPS"]))
    print("csv:", ",".join(row))
    if args.csv:
        new = not Path(args.csv).exists()
        with open(args.csv, "a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(["PSNR", "MSSIM", "MSE", "AGE", "pEPs", "pCEPS"])
            writer.writerow(row)
    return EXIT_OK


def _load_image_mask(image_path, mask_path):
    from .png_io import read_image, read_mask

    image = read_image(image_path)
    try:
        mask = read_mask(mask_path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if mask.shape != image.shape[:2]:
        raise UsageError(
            f"mask {mask_path} is {mask.shape}, image {image_path} is {image.shape[:2]}"
        )
    return image, mask


def cmd_infer(args) -> int:
    from .metrics import composite_non_text
    from .model import load_checkpoint, predict_frames
    from .png_io import write_png

    image, mask = _load_image_mask(args.image, args.mask)
    model, _meta = load_checkpoint(args.checkpoint)
    iters = args.iters or model.config.iterations
    frames = predict_frames(model, image, mask, iterations=iters)
    result = frames[-1]
    if not args.raw:
        result = composite_non_text(result, image, mask)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png(out, result)
    if args.dump_every > 0:
        dump_dir = Path(args.dump_dir) if args.dump_dir else out.parent
        dump_dir.mkdir(parents=True, exist_ok=True)
        width = max(2, len(str(iters)))
        n = 0
        for k, frame in enumerate(frames, start=1):
            if k % args.dump_every == 0:
                write_png(dump_dir / f"iter_{k:0{width}d}.png", frame)
                n += 1
        print(f"wrote {n} frames to {dump_dir}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_dump_iters(args) -> int:
    from .model import load_checkpoint, predict_frames
    from .png_io import write_png

    image, mask = _load_image_mask(args.image, args.mask)
    model, _meta = load_checkpoint(args.checkpoint)
    iters = args.iters or model.config.iterations
    frames = predict_frames(model, image, mask, iterations=iters)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(2, len(str(iters)))
    for k, frame in enumerate(frames, start=1):
        write_png(out_dir / f"iter_{k:0{width}d}.png", frame)
    print(f"wrote {len(frames)} frames to {out_dir}")
    return EXIT_OK


def latent_heatmap(latent: np.ndarray) -> np.ndarray:
    """Channel-mean magnitude, min-max normalized to uint8; a constant map
    (degenerate normalization) renders as mid-gray."""
    mag = np.abs(latent).mean(axis=0)
    lo, hi = float(mag.min()), float(mag.max())
    if hi - lo < 1e-12:
        return np.full(mag.shape, 128, dtype=np.uint8)
    return np.clip(np.rint((mag - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def cmd_dump_latents(args) -> int:
    from .model import load_checkpoint, predict_frames
    from .png_io import write_png

    image, mask = _load_image_mask(args.image, args.mask)
    model, _meta = load_checkpoint(args.checkpoint)
    iters = args.iters or model.config.iterations
    _frames, latents = predict_frames(model, image, mask, iterations=iters, return_latents=True)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(2, len(str(iters)))
    for k, latent in enumerate(latents, start=1):
        write_png(out_dir / f"latent_{k:0{width}d}.png", latent_heatmap(latent))
    print(f"wrote {len(latents)} heatmaps to {out_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .data import load_dataset_dir
    from .training import ABLATION_VARIANTS, run_ablation

    if args.variant not in ABLATION_VARIANTS:
        raise UsageError(
            f"unknown variant {args.variant!r}; valid: {', '.join(sorted(ABLATION_VARIANTS))}"
        )
    config = _train_config_from_args(args)
    model_config = _model_config_from_args(args)
    triplets = load_dataset_dir(args.data)
    row, _model = run_ablation(
        args.variant, config, triplets, model_config, protocol=args.protocol
    )
    table = Path(args.out_table)
    new = not table.exists()
    with open(table, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(ABLATION_CSV_HEADER)
        writer.writerow(
            [
                row["variant"],
                f"{row['psnr']:.4f}",
                f"{row['mssim']:.4f}",
                f"{row['mse']:.6f}",
                f"{row['age']:.4f}",
                f"{row['peps']:.6f}",
                f"{row['pceps']:.6f}",
                f"{row['params_m']:.2f}",
            ]
        )
    print(f"appended {args.variant} row to {table}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    checkpoint = args.checkpoint or os.environ.get(ENV_CHECKPOINT)
    if not checkpoint:
        raise UsageError(f"provide --checkpoint or set ${ENV_CHECKPOINT}")
    port = args.port or int(os.environ.get(ENV_PORT, "8000"))
    app = create_app(checkpoint, max_side=args.max_side)
    uvicorn.run(app, host=args.host, port=port, log_level="info")
    return EXIT_OK


class UsageError(Exception):
    pass


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
    "dump-iters": cmd_dump_iters,
    "dump-latents": cmd_dump_latents,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"textscrub {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"textscrub {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
