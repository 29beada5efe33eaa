"""Single entry point: compress, decompress, train, eval, bench, bdrate.

Configuration comes from a YAML file plus ``--set dotted.key=value`` overrides;
precedence is flags > file > defaults, and unknown keys are rejected. Every
subcommand is non-interactive, exits nonzero on failure, and writes only under
its --out directory.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from .errors import BitstreamError, HeaderMismatchError, HflicError
from .losses import LossWeights
from .training import (
    Checkpoint,
    CropDataset,
    TrainConfig,
    TrainStage,
    desk_schedule,
    train_base,
    train_perceptual,
)
from .transforms import TransformConfig

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_MODEL_MISMATCH = 3
EXIT_CORRUPT = 4

DEFAULT_CONFIG: dict = {
    "model": {
        "n_channels": 32,
        "m_channels": 48,
        "z_channels": 32,
        "expansion_ratio": 2,
        "blocks_per_stage": 1,
        "use_attention": False,
        "activation": "gelu",
    },
    "entropy": {"num_groups": 5},
    "training": {
        "phase": "base",
        "lambda": 0.015,
        "batch_size": 4,
        "crop_size": 64,
        "seed": 0,
        "epoch_divisor": 100,
        "schedule": None,  # optional [[epochs, lr], ...] override
        "freeze_entropy": False,
    },
    "loss_weights": {
        "w_rec": 1.0,
        "w_lpips": 1.0,
        "w_adv": 0.01,
        "w_sty": 40.0,
        "w_face": 10.0,
        "lambda_rate": 1.0,
    },
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _merge_config(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise CliError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge_config(base[key], value, where)
        else:
            out[key] = value
    return out


def _apply_set(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise CliError(f"--set expects dotted.key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.split(".")
    node = config
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise CliError(f"unknown config key: {dotted}")
        node = node[key]
    if keys[-1] not in node:
        raise CliError(f"unknown config key: {dotted}")
    node[keys[-1]] = yaml.safe_load(raw)


def load_run_config(path: str | None, overrides: list[str] | None = None) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        file_path = Path(path)
        if not file_path.exists():
            raise CliError(f"config file not found: {file_path}")
        loaded = yaml.safe_load(file_path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise CliError("config file must contain a mapping")
        config = _merge_config(config, loaded)
    for assignment in overrides or []:
        _apply_set(config, assignment)
    return config


def _train_config(config: dict) -> TrainConfig:
    tc = config["training"]
    if tc["schedule"] is not None:
        schedule = tuple(TrainStage(int(e), float(lr)) for e, lr in tc["schedule"])
    else:
        schedule = desk_schedule(tc["epoch_divisor"], warmup=tc["phase"] == "base")
    return TrainConfig(
        phase=tc["phase"],
        lam=tc["lambda"],
        batch_size=tc["batch_size"],
        crop_size=tc["crop_size"],
        schedule=schedule,
        seed=tc["seed"],
        model=TransformConfig(**config["model"]),
        num_groups=config["entropy"]["num_groups"],
        weights=LossWeights(**config["loss_weights"]),
        freeze_entropy=tc["freeze_entropy"],
    )


def _load_model(checkpoint: str):
    path = Path(checkpoint)
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}", EXIT_INPUT)
    from .model import load_checkpoint

    model, _ = load_checkpoint(path)
    return model


def _load_image(path: Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def _save_image(path: Path, x: torch.Tensor) -> None:
    arr = (x.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def _collect_images(inputs: list[str], suffixes) -> list[Path]:
    files: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in suffixes))
        elif p.exists():
            files.append(p)
        else:
            raise CliError(f"input not found: {p}")
    if not files:
        raise CliError("no input files")
    return files


def _map_files(files, worker, workers: int):
    """Run worker over files, preserving input order in the results."""
    if workers <= 1:
        return [worker(f) for f in files]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, files))


def cmd_compress(args) -> int:
    from .bitstream import encode_image_full

    model = _load_model(args.checkpoint)
    if args.seed is not None:
        torch.manual_seed(args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = _collect_images(args.inputs, (".png", ".jpg", ".jpeg"))

    def encode_one(f: Path) -> dict:
        x = _load_image(f)
        data = encode_image_full(x, model).bitstream.to_bytes()
        (out_dir / (f.stem + ".hflc")).write_bytes(data)
        h, w = x.shape[-2:]
        return {"image": f.name, "bytes": len(data), "bpp": len(data) * 8.0 / (h * w)}

    rows = _map_files(files, encode_one, args.workers)
    with open(out_dir / "bpp.jsonl", "w") as log:
        for row in rows:
            log.write(json.dumps(row) + "\n")
            print(f"{row['image']}: {row['bytes']} bytes, {row['bpp']:.4f} bpp")
    return EXIT_OK


def cmd_decompress(args) -> int:
    from .bitstream import decode_image_full

    model = _load_model(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = _collect_images(args.inputs, (".hflc",))

    def decode_one(f: Path):
        try:
            return f, decode_image_full(f.read_bytes(), model)
        except HeaderMismatchError as exc:
            raise CliError(f"{f.name}: {exc}", EXIT_MODEL_MISMATCH) from exc
        except BitstreamError as exc:
            raise CliError(
                f"{f.name}: corrupted stream after {exc.groups_decoded} intact group(s): {exc}",
                EXIT_CORRUPT,
            ) from exc

    for f, result in _map_files(files, decode_one, args.workers):
        _save_image(out_dir / (f.stem + ".png"), result.x_hat)
        print(f"{f.name}: decoded {result.x_hat.shape[-1]}x{result.x_hat.shape[-2]}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_run_config(args.config, args.set)
    cfg = _train_config(config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    torch.set_num_threads(max(1, args.workers))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = CropDataset.from_dir(args.data, args.detections)
    if cfg.phase == "base":
        ckpt = train_base(dataset, cfg, log_path=out_dir / "train_base.jsonl")
        path = out_dir / "base.ckpt"
    else:
        if not args.base_checkpoint:
            raise CliError("perceptual phase requires --base-checkpoint")
        base = Checkpoint.load(args.base_checkpoint)
        ckpt = train_perceptual(base, dataset, cfg, log_path=out_dir / "train_perceptual.jsonl")
        path = out_dir / "perceptual.ckpt"
    ckpt.save(path)
    print(f"wrote {path} at step {ckpt.step}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import evaluate_images, write_rd_csv

    model = _load_model(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = _collect_images([args.data], (".png", ".jpg", ".jpeg"))
    images = {f.name: _load_image(f) for f in files}
    rows = evaluate_images(model, images)
    csv_path = out_dir / "eval.csv"
    write_rd_csv(csv_path, "eval", rows)
    for row in rows:
        print(
            f"{row['label']}: {row['bpp']:.4f} bpp, {row['psnr']:.2f} dB, "
            f"dec {row['dec_ms']:.1f} ms"
        )
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .evaluate import timing_bench
    from .model import build_model

    base_model = _load_model(args.checkpoint)
    group_counts = [int(g) for g in args.groups.split(",")]
    models = {}
    for g in group_counts:
        if g == base_model.num_groups:
            models[g] = base_model
        else:
            torch.manual_seed(args.seed if args.seed is not None else 0)
            models[g] = build_model(base_model.cfg, num_groups=g)
    image = _load_image(Path(args.image)) if args.image else torch.rand(3, 256, 256)
    rows = timing_bench(models, image, repetitions=args.repetitions)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "bench.csv"
    with open(table, "w") as fh:
        fh.write("groups,enc_ms,dec_ms,dec_ms_spread,sequential_passes\n")
        for row in rows:
            fh.write(
                f"{row['groups']},{row['enc_ms']:.3f},{row['dec_ms']:.3f},"
                f"{row['dec_ms_spread']:.3f},{row['sequential_passes']}\n"
            )
            print(
                f"{row['groups']} groups: enc {row['enc_ms']:.1f} ms, "
                f"dec {row['dec_ms']:.1f} ms, {row['sequential_passes']} passes"
            )
    print(f"wrote {table}")
    return EXIT_OK


def cmd_bdrate(args) -> int:
    from .evaluate import bd_rate, curve_from_rows, read_rd_csv

    rows_a = read_rd_csv(args.anchor)
    rows_b = read_rd_csv(args.test)
    curve_a = curve_from_rows("anchor", rows_a)
    curve_b = curve_from_rows("test", rows_b)
    value = bd_rate(curve_a, curve_b, quality_field=args.quality_field)
    print(f"{value:.2f}%")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hflic", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="encode images to .hflc")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode .hflc files to PNG")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("train", help="train a base or perceptual model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--detections", default=None)
    p.add_argument("--base-checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="RD metrics over a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="decode-timing benchmark across group counts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--groups", default="5,10")
    p.add_argument("--image", default=None)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("bdrate", help="BD-rate between two RD CSV files")
    p.add_argument("anchor")
    p.add_argument("test")
    p.add_argument("--quality-field", default="psnr")
    p.set_defaults(func=cmd_bdrate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except HflicError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
