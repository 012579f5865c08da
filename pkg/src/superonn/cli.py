"""``sonn`` command line: train, denoise, eval, erf and sweep.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import netpbm
from .analysis import Region, bias_sweep, effective_receptive_field, emit_heatmap
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import CheckpointError, DimensionError, ParameterError, TrainingDivergedError
from .layers import build_network
from .pipeline import (
    NoiseSpec,
    PatchSet,
    add_awgn,
    awgn_patchset,
    denoise_image,
    evaluate,
    DenoiseReport,
    ingest_pairs,
    psnr,
)
from .threads import thread_limit
from .training import TrainPlan, train

log = logging.getLogger("superonn")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    """Invalid run configuration; the message names the offending field."""


@dataclass
class RunConfig:
    model: str
    clean_dir: str
    checkpoint: str
    channels: int = 1
    noise: Any = 30.0  # sigma on the 0-255 scale, or "paired"
    noise_seed: int = 0
    noisy_dir: str | None = None
    test_dir: str | None = None
    patch_size: int = 40
    stride: int | None = None
    max_patches: int | None = None
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    split_ratio: float = 0.9
    lr_decay: bool = False
    gamma: float = 5.0
    log: str | None = None
    sweep_output: str | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        missing = [
            name for name, f in known.items()
            if f.default is dataclasses.MISSING and name not in raw
        ]
        if missing:
            raise ConfigError(f"missing required key(s): {', '.join(missing)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}")
        return cls.from_dict(raw)

    def _expect(self, name: str, kinds, allow_none: bool = False) -> None:
        value = getattr(self, name)
        if value is None and allow_none:
            return
        kinds = kinds if isinstance(kinds, tuple) else (kinds,)
        if (isinstance(value, bool) and bool not in kinds) or not isinstance(value, kinds):
            expected = " or ".join(k.__name__ for k in kinds)
            raise ConfigError(f"{name}: expected {expected}, got {value!r}")

    def validate(self) -> None:
        for name in ("model", "clean_dir", "checkpoint"):
            self._expect(name, str)
        for name in ("noisy_dir", "test_dir", "log", "sweep_output"):
            self._expect(name, str, allow_none=True)
        for name in ("channels", "noise_seed", "patch_size", "epochs", "batch_size", "seed"):
            self._expect(name, int)
        for name in ("stride", "max_patches"):
            self._expect(name, int, allow_none=True)
        for name in ("lr", "split_ratio", "gamma"):
            self._expect(name, (int, float))
        self._expect("lr_decay", bool)
        try:
            build_network(self.model, self.channels, self.gamma)
        except (ParameterError, DimensionError) as exc:
            raise ConfigError(f"model: {exc}")
        if self.noise == "paired":
            if self.noisy_dir is None:
                raise ConfigError("noisy_dir: required when noise is \"paired\"")
        elif isinstance(self.noise, bool) or not isinstance(self.noise, (int, float)) or self.noise < 0:
            raise ConfigError(f"noise: expected a non-negative sigma or \"paired\", got {self.noise!r}")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size: must be positive, got {self.patch_size}")
        if self.stride is not None and self.stride < 1:
            raise ConfigError(f"stride: must be positive, got {self.stride}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0 < self.split_ratio < 1:
            raise ConfigError(f"split_ratio: must lie in (0, 1), got {self.split_ratio}")
        if not self.lr > 0:
            raise ConfigError(f"lr: must be positive, got {self.lr}")
        for name in ("clean_dir", "noisy_dir", "test_dir"):
            value = getattr(self, name)
            if value is not None and not Path(value).is_dir():
                raise ConfigError(f"{name}: directory does not exist: {value}")
        for name in ("checkpoint", "log", "sweep_output"):
            value = getattr(self, name)
            if value is not None and not Path(value).resolve().parent.is_dir():
                raise ConfigError(f"{name}: parent directory does not exist: {value}")

    @property
    def plan(self) -> TrainPlan:
        return TrainPlan(self.epochs, self.batch_size, float(self.lr), self.seed, float(self.split_ratio), self.lr_decay)

    def network(self):
        return build_network(self.model, self.channels, self.gamma)


def _load_images(directory: str | Path, channels: int) -> list[np.ndarray]:
    paths = netpbm.list_images(directory)
    images = []
    for p in paths:
        img = netpbm.read_image(p)
        if img.shape[0] != channels:
            raise ConfigError(f"{p}: image has {img.shape[0]} channel(s), model expects {channels}")
        images.append(img)
    return images


def load_dataset(cfg: RunConfig) -> PatchSet:
    if cfg.noise == "paired":
        data = ingest_pairs(cfg.noisy_dir, cfg.clean_dir, cfg.patch_size, cfg.stride, seed=cfg.seed)
        if len(data) and data.channels != cfg.channels:
            raise ConfigError(f"paired images have {data.channels} channel(s), model expects {cfg.channels}")
        if cfg.max_patches is not None and len(data) > cfg.max_patches:
            keep = np.sort(np.random.default_rng(cfg.seed).choice(len(data), cfg.max_patches, replace=False))
            data = data.subset(keep)
    else:
        images = _load_images(cfg.clean_dir, cfg.channels)
        data = awgn_patchset(
            images, cfg.patch_size, cfg.stride, NoiseSpec(float(cfg.noise), cfg.noise_seed),
            cfg.max_patches, cfg.seed,
        )
    if len(data) == 0:
        raise ConfigError(f"clean_dir: no usable {cfg.patch_size}x{cfg.patch_size} patches in {cfg.clean_dir}")
    return data


def load_test_set(cfg: RunConfig) -> PatchSet | None:
    if cfg.test_dir is None:
        return None
    images = _load_images(cfg.test_dir, cfg.channels)
    sigma = 0.0 if cfg.noise == "paired" else float(cfg.noise)
    data = awgn_patchset(images, cfg.patch_size, None, NoiseSpec(sigma, cfg.noise_seed + 1))
    return data if len(data) else None


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}")


def _load_model(path: str) -> Checkpoint:
    try:
        ckpt = load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f"model checkpoint not found: {path}")
    except CheckpointError as exc:
        raise ConfigError(f"{path}: {exc}")
    if ckpt.config is None:
        raise ConfigError(f"{path}: checkpoint carries no network config")
    return ckpt


def _read_input(path: str) -> np.ndarray:
    try:
        return netpbm.read_image(path)
    except netpbm.ImageFormatError as exc:
        raise ConfigError(str(exc))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    data = load_dataset(cfg)
    ckpt = train(cfg.network(), data, cfg.plan, log_path=cfg.log)
    save_checkpoint(cfg.checkpoint, ckpt)
    print(f"{cfg.model}: best epoch {ckpt.epoch}, validation PSNR {ckpt.validation_psnr:.4f} dB -> {cfg.checkpoint}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    ckpt = _load_model(args.model)
    image = _read_input(args.input)
    if image.shape[0] != ckpt.config.channels:
        raise ConfigError(
            f"{args.input}: image has {image.shape[0]} channel(s), model expects {ckpt.config.channels}"
        )
    reference = _read_input(args.reference) if args.reference else None
    noisy = image
    if args.sigma is not None:
        noisy = add_awgn(image, NoiseSpec(args.sigma, args.seed))
        if reference is None:
            reference = image
    out = denoise_image(ckpt, noisy)
    netpbm.write_image(args.output, out)
    if reference is not None:
        if reference.shape != out.shape:
            raise ConfigError(f"reference shape {reference.shape} differs from output {out.shape}")
        print(f"PSNR input  {psnr(reference, noisy):.4f} dB")
        print(f"PSNR output {psnr(reference, out):.4f} dB")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _load_model(args.model)
    sigmas = _parse_floats(args.sigmas)
    report = DenoiseReport()
    for directory in args.dataset_dir:
        if not Path(directory).is_dir():
            raise ConfigError(f"dataset directory does not exist: {directory}")
        images = _load_images(directory, ckpt.config.channels)
        if not images:
            raise ConfigError(f"dataset directory has no PGM/PPM images: {directory}")
        report = report + evaluate(ckpt, images, sigmas, dataset_name=Path(directory).name, seed=args.seed)
    text = report.to_csv()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_erf(args) -> int:
    ckpt = _load_model(args.model)
    image = _read_input(args.input)
    try:
        region = Region.parse(args.region)
        erf = effective_receptive_field(ckpt, image, region, threshold=args.threshold)
    except (ValueError, DimensionError) as exc:
        raise ConfigError(str(exc))
    heat, mask = emit_heatmap(erf, f"{args.out_prefix}_heat.pgm", f"{args.out_prefix}_mask.pgm")
    print(f"support area {erf.support_area} px (threshold {erf.threshold:g}); wrote {heat} and {mask}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = RunConfig.load(args.config)
    gammas = _parse_floats(args.gammas)
    if not gammas:
        raise ConfigError("--gammas: empty list")
    data = load_dataset(cfg)
    result = bias_sweep(cfg.network(), gammas, data, cfg.plan, test_set=load_test_set(cfg))
    out = args.output or cfg.sweep_output
    if out:
        Path(out).write_text(result.to_csv())
    else:
        sys.stdout.write(result.to_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sonn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a JSON run config")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise one PGM/PPM image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--sigma", type=float, default=None, help="corrupt the input with AWGN first")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reference", default=None, help="clean image for PSNR reporting")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="average PSNR over directories of clean images")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset-dir", required=True, action="append")
    p.add_argument("--sigmas", default="30,60,90")
    p.add_argument("--seed", type=int, default=0, help="evaluation noise seed")
    p.add_argument("--output", default=None, help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("erf", help="effective receptive field heat maps")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--region", required=True, help="x,y,w,h on the output map")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--threshold", type=float, default=0.01)
    p.set_defaults(func=cmd_erf)

    p = sub.add_parser("sweep", help="retrain over hidden-layer shift bounds")
    p.add_argument("config")
    p.add_argument("--gammas", default="0,1,2.5,5,10,20")
    p.add_argument("--output", default=None, help="CSV path (default: sweep_output or stdout)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"sonn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"sonn {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"sonn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
