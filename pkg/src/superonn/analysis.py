"""Effective receptive field maps and the shift-bound sweep."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import netpbm
from .checkpoint import Checkpoint
from .errors import DimensionError
from .layers import NetworkConfig, network_backward, network_forward
from .pipeline import PatchSet, from_internal, mean_psnr, psnr, to_internal
from .training import TrainPlan, train

DEFAULT_THRESHOLD = 0.01
SWEEP_HEADER = ("gamma", "ratio", "psnr_db")


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle on the output map; ``x`` is the column."""

    x: int
    y: int
    w: int
    h: int

    @classmethod
    def parse(cls, text: str) -> "Region":
        parts = [int(p) for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"region must be x,y,w,h, got {text!r}")
        return cls(*parts)

    def check(self, height: int, width: int) -> None:
        if self.w < 1 or self.h < 1:
            raise ValueError(f"empty region {self}")
        if self.x < 0 or self.y < 0 or self.x + self.w > width or self.y + self.h > height:
            raise ValueError(f"region {self} lies outside the {height}x{width} output")


@dataclass
class ErfMap:
    heat: np.ndarray  # (H, W), max-normalised
    threshold: float = DEFAULT_THRESHOLD

    @property
    def mask(self) -> np.ndarray:
        return self.heat > self.threshold

    @property
    def support_area(self) -> int:
        return int(np.count_nonzero(self.mask))

    def bounding_box(self) -> tuple[int, int, int, int] | None:
        """(row0, col0, row1, col1) inclusive extent of the support, or None."""
        rows, cols = np.nonzero(self.mask)
        if rows.size == 0:
            return None
        return int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())


def effective_receptive_field(
    checkpoint: Checkpoint,
    image: np.ndarray,
    region: Region | Sequence[int],
    threshold: float = DEFAULT_THRESHOLD,
) -> ErfMap:
    """Input-gradient heat map for an indicator gradient on ``region``.

    ``image`` is (H, W) or (C, H, W) in [0, 1]. The heat is the absolute input
    gradient summed over channels, scaled so its maximum is 1.
    """
    if not isinstance(region, Region):
        region = Region(*region)
    config, states = checkpoint.config, checkpoint.states()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] != config.channels:
        raise DimensionError(f"model takes {config.channels} channel(s), image has shape {img.shape}")
    _, h, w = img.shape
    region.check(h, w)
    x = to_internal(img)[None]
    y, caches = network_forward(config, states, x, keep_cache=True)
    g = np.zeros_like(y)
    g[:, :, region.y : region.y + region.h, region.x : region.x + region.w] = 1.0
    _, gx = network_backward(config, states, x, caches, g, need_input=True, need_params=False)
    heat = np.abs(gx[0]).sum(axis=0)
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    return ErfMap(heat, threshold)


def emit_heatmap(erf: ErfMap, path: str | os.PathLike, mask_path: str | os.PathLike | None = None) -> tuple[Path, Path]:
    """Write the heat map and its thresholded mask as 8-bit PGMs."""
    path = Path(path)
    mask_path = Path(mask_path) if mask_path is not None else path.with_name(f"{path.stem}_mask{path.suffix or '.pgm'}")
    netpbm.write_image(path, erf.heat)
    netpbm.write_image(mask_path, erf.mask.astype(np.float64))
    return path, mask_path


@dataclass
class SweepResult:
    rows: list[tuple[float, float, float]] = field(default_factory=list)  # gamma, ratio, psnr

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for gamma, ratio, value in self.rows:
            writer.writerow([f"{gamma:g}", f"{ratio:g}", "inf" if math.isinf(value) else f"{value:.4f}"])
        return buf.getvalue()

    def write_csv(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_csv())

    def psnr_at(self, gamma: float) -> float:
        for g, _, value in self.rows:
            if g == gamma:
                return value
        raise KeyError(gamma)


def patchset_psnr(checkpoint: Checkpoint, data: PatchSet) -> float:
    config, states = checkpoint.config, checkpoint.states()
    scores = []
    for start in range(0, len(data), 64):
        noisy = data.noisy[start : start + 64]
        est = np.clip(from_internal(network_forward(config, states, to_internal(noisy)), noisy), 0.0, 1.0)
        scores.extend(psnr(c, e) for c, e in zip(data.clean[start : start + 64], est))
    return mean_psnr(scores)


def bias_sweep(
    base_config: NetworkConfig,
    gammas: Sequence[float],
    dataset: PatchSet,
    plan: TrainPlan,
    test_set: PatchSet | None = None,
    checkpoints: dict | None = None,
) -> SweepResult:
    """Retrain with each hidden-layer shift bound from the same seed.

    PSNR is measured on ``test_set`` when given, otherwise it is the best
    validation PSNR reached in training. Trained checkpoints are stored in
    ``checkpoints`` keyed by gamma when a dict is passed.
    """
    if len(gammas) == 0:
        raise ValueError("gamma list is empty")
    result = SweepResult()
    for gamma in gammas:
        config = base_config.with_hidden_gamma(gamma)
        ckpt = train(config, dataset, plan)
        value = patchset_psnr(ckpt, test_set) if test_set is not None else ckpt.validation_psnr
        result.rows.append((float(gamma), float(gamma) / dataset.patch_size, value))
        if checkpoints is not None:
            checkpoints[float(gamma)] = ckpt
    return result
