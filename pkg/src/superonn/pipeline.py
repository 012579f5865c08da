"""Noise synthesis, patch datasets, inference and PSNR reporting."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import netpbm
from .checkpoint import Checkpoint
from .errors import DimensionError
from .layers import LayerState, NetworkConfig, network_forward

log = logging.getLogger(__name__)

REPORT_HEADER = ("dataset", "sigma", "model", "psnr_db")
DEFAULT_EVAL_SEED = 0

# Full-scale average PSNR (dB) for the 4-layer networks after 100 epochs on
# ~200k patches. Desk-scale runs are not expected to reach these; they are
# kept so reports can be put side by side with them.
REFERENCE_PSNR: dict[tuple[str, str, object], float] = {}
for _model, _vals in {
    "CNN-128": (28.47, 25.08, 23.11, 29.28, 25.73, 23.55, 27.47, 24.28, 22.43),
    "Self-ONN-3-64": (28.54, 25.09, 23.12, 29.39, 25.77, 23.66, 27.55, 24.31, 22.47),
    "Self-ONN-5-64": (28.56, 25.10, 23.12, 29.40, 25.81, 23.65, 27.55, 24.34, 22.46),
    "Self-ONN-7-64": (28.54, 25.12, 23.12, 29.40, 25.77, 23.64, 27.56, 24.33, 22.46),
    "Super-ONN-3-64": (28.84, 26.18, 24.51, 29.58, 26.13, 24.13, 27.90, 24.93, 23.38),
    "Super-ONN-5-64": (29.06, 26.21, 24.53, 29.51, 26.29, 23.90, 27.76, 24.93, 23.14),
    "Super-ONN-7-64": (29.05, 26.20, 24.42, 29.45, 26.08, 23.73, 27.72, 24.86, 23.20),
}.items():
    for _i, _ds in enumerate(("Kodak", "McMaster", "CBSD68")):
        for _j, _s in enumerate((30, 60, 90)):
            REFERENCE_PSNR[(_model, _ds, _s)] = _vals[3 * _i + _j]
for _model, _v in {
    "CNN-64": 35.167, "Self-ONN-3-64": 35.47, "Self-ONN-5-64": 35.52, "Self-ONN-7-64": 35.34,
    "Super-ONN-3-64": 37.28, "Super-ONN-5-64": 37.01, "Super-ONN-7-64": 37.1,
}.items():
    REFERENCE_PSNR[(_model, "SIDD", "real")] = _v


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float  # on the 0-255 scale
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def add_awgn(clean: np.ndarray, spec: NoiseSpec, clip: bool = True) -> np.ndarray:
    """``clean + N(0, (sigma/255)^2)`` per pixel, clipped to [0, 1] unless ``clip`` is False."""
    clean = np.asarray(clean, dtype=np.float64)
    if spec.sigma == 0:
        return clean.copy()
    rng = np.random.default_rng(spec.seed)
    noisy = clean + rng.normal(0.0, spec.sigma / 255.0, size=clean.shape)
    return np.clip(noisy, 0.0, 1.0) if clip else noisy


def psnr(reference: np.ndarray, test: np.ndarray, peak: float = 1.0) -> float:
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise DimensionError(f"shape mismatch: {reference.shape} vs {test.shape}")
    mse = float(np.mean((reference - test) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def _as_chw(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise DimensionError(f"expected (H, W) or (C, H, W) image, got {image.shape}")
    return image


def patch_positions(height: int, width: int, size: int, stride: int) -> list[tuple[int, int]]:
    if height < size or width < size:
        return []
    rows = range(0, height - size + 1, stride)
    cols = range(0, width - size + 1, stride)
    return [(r, c) for r in rows for c in cols]


def _select(positions: list, cap: int | None, seed) -> list:
    if cap is None or len(positions) <= cap:
        return positions
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(positions), size=cap, replace=False))
    return [positions[i] for i in keep]


def extract_patches(
    image: np.ndarray,
    size: int,
    stride: int | None = None,
    seed: int | None = 0,
    max_patches: int | None = None,
) -> list[np.ndarray]:
    """Crops of ``size x size`` on a regular grid, optionally subsampled to ``max_patches``."""
    image = _as_chw(image)
    stride = size if stride is None else stride
    _, h, w = image.shape
    positions = patch_positions(h, w, size, stride)
    if not positions:
        log.warning("image of size %dx%d is smaller than the %d-pixel patch; skipped", h, w, size)
        return []
    positions = _select(positions, max_patches, seed)
    return [image[:, r : r + size, c : c + size].copy() for r, c in positions]


@dataclass
class PatchSet:
    """Noisy/clean training pairs stored as stacked ``(N, C, h, w)`` arrays."""

    noisy: np.ndarray
    clean: np.ndarray
    patch_size: int

    def __post_init__(self):
        if self.noisy.shape != self.clean.shape:
            raise DimensionError(f"noisy {self.noisy.shape} and clean {self.clean.shape} differ")

    def __len__(self) -> int:
        return self.noisy.shape[0]

    @property
    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.noisy, self.clean))

    @property
    def channels(self) -> int:
        return self.noisy.shape[1]

    @classmethod
    def empty(cls, channels: int, patch_size: int) -> "PatchSet":
        z = np.zeros((0, channels, patch_size, patch_size))
        return cls(z, z.copy(), patch_size)

    def subset(self, index) -> "PatchSet":
        return PatchSet(self.noisy[index], self.clean[index], self.patch_size)


def awgn_patchset(
    images: Iterable[np.ndarray],
    size: int = 40,
    stride: int | None = None,
    noise: NoiseSpec = NoiseSpec(30.0),
    max_patches: int | None = None,
    seed: int = 0,
) -> PatchSet:
    """Crop clean patches from ``images`` and pair each with an AWGN copy."""
    patches = []
    for image in images:
        patches.extend(extract_patches(image, size, stride, seed=None))
    if not patches:
        return PatchSet.empty(1, size)
    clean = np.stack(patches)
    if max_patches is not None and len(clean) > max_patches:
        keep = np.sort(np.random.default_rng(seed).choice(len(clean), size=max_patches, replace=False))
        clean = clean[keep]
    noisy = add_awgn(clean, noise)
    return PatchSet(noisy, clean, size)


class UnmatchedPairsError(ValueError):
    def __init__(self, noisy_only: Sequence[str], clean_only: Sequence[str]):
        parts = []
        if noisy_only:
            parts.append("no clean match for: " + ", ".join(noisy_only))
        if clean_only:
            parts.append("no noisy match for: " + ", ".join(clean_only))
        super().__init__("; ".join(parts))
        self.noisy_only = list(noisy_only)
        self.clean_only = list(clean_only)


def ingest_pairs(
    noisy_dir: str | os.PathLike,
    clean_dir: str | os.PathLike,
    size: int = 40,
    stride: int | None = None,
    max_patches_per_image: int | None = None,
    seed: int = 0,
) -> PatchSet:
    """Load same-named noisy/clean images and crop aligned patch pairs."""
    noisy_files = {p.name: p for p in netpbm.list_images(noisy_dir)}
    clean_files = {p.name: p for p in netpbm.list_images(clean_dir)}
    noisy_only = sorted(set(noisy_files) - set(clean_files))
    clean_only = sorted(set(clean_files) - set(noisy_files))
    if noisy_only or clean_only:
        raise UnmatchedPairsError(noisy_only, clean_only)
    if not noisy_files:
        log.warning("no images found in %s / %s", noisy_dir, clean_dir)
        return PatchSet.empty(1, size)
    stride = size if stride is None else stride
    noisy_patches, clean_patches = [], []
    for i, name in enumerate(sorted(noisy_files)):
        noisy = netpbm.read_image(noisy_files[name])
        clean = netpbm.read_image(clean_files[name])
        if noisy.shape != clean.shape:
            raise DimensionError(f"{name}: noisy {noisy.shape} vs clean {clean.shape}")
        positions = patch_positions(noisy.shape[1], noisy.shape[2], size, stride)
        if not positions:
            log.warning("%s is smaller than the %d-pixel patch; skipped", name, size)
            continue
        positions = _select(positions, max_patches_per_image, [seed, i])
        for r, c in positions:
            noisy_patches.append(noisy[:, r : r + size, c : c + size])
            clean_patches.append(clean[:, r : r + size, c : c + size])
    if not noisy_patches:
        return PatchSet.empty(1, size)
    return PatchSet(np.stack(noisy_patches), np.stack(clean_patches), size)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def to_internal(x: np.ndarray) -> np.ndarray:
    return 2.0 * x - 1.0


def from_internal(y: np.ndarray, x: np.ndarray | None = None) -> np.ndarray:
    """Inverse of :func:`to_internal`.

    Given the [0, 1] input ``x`` the inverse is taken relative to it, which is
    the same map in exact arithmetic but returns ``x`` bit-for-bit when the
    network output equals its mapped input.
    """
    if x is None:
        return (y + 1.0) / 2.0
    return x + 0.5 * (y - to_internal(x))


def denoise_batch(config: NetworkConfig, states: Sequence[LayerState], noisy: np.ndarray) -> np.ndarray:
    """``(N, C, H, W)`` noisy batch in [0, 1] to clipped estimates in [0, 1]."""
    if noisy.ndim != 4 or noisy.shape[1] != config.channels:
        raise DimensionError(
            f"model {config.name} takes {config.channels} channel(s), got batch of shape {noisy.shape}"
        )
    y = network_forward(config, states, to_internal(noisy))
    return np.clip(from_internal(y, noisy), 0.0, 1.0)


def denoise_image(checkpoint: Checkpoint, noisy: np.ndarray) -> np.ndarray:
    """Whole-image inference; output has the same shape as ``noisy``."""
    noisy = np.asarray(noisy, dtype=np.float64)
    chw = _as_chw(noisy)
    out = denoise_batch(checkpoint.config, checkpoint.states(), chw[None])[0]
    return out.reshape(noisy.shape)


@dataclass(frozen=True)
class ReportRow:
    dataset: str
    sigma: object  # float, or the string "real" for paired data
    model: str
    psnr: float


def _fmt_sigma(x) -> str:
    return x if isinstance(x, str) else f"{float(x):g}"


@dataclass
class DenoiseReport:
    rows: list[ReportRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for row in self.rows:
            psnr_tok = "inf" if math.isinf(row.psnr) and row.psnr > 0 else f"{row.psnr:.4f}"
            writer.writerow([row.dataset, _fmt_sigma(row.sigma), row.model, psnr_tok])
        return buf.getvalue()

    def write_csv(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_csv())

    def __add__(self, other: "DenoiseReport") -> "DenoiseReport":
        return DenoiseReport(self.rows + other.rows)


def mean_psnr(values: Sequence[float]) -> float:
    if any(math.isinf(v) for v in values):
        return math.inf
    return float(np.mean(values))


def evaluate(
    checkpoint: Checkpoint,
    dataset: Sequence[np.ndarray],
    sigmas: Sequence[float],
    dataset_name: str = "dataset",
    seed: int = DEFAULT_EVAL_SEED,
    model_name: str | None = None,
) -> DenoiseReport:
    """Average PSNR over ``dataset`` for each noise level, one row per sigma."""
    if len(dataset) == 0:
        raise ValueError("evaluation dataset is empty")
    config, states = checkpoint.config, checkpoint.states()
    model = model_name or config.name
    rows = []
    for j, sigma in enumerate(sigmas):
        scores = []
        for i, clean in enumerate(dataset):
            chw = _as_chw(clean)
            noisy = add_awgn(chw, NoiseSpec(float(sigma), seed=_eval_seed(seed, i, sigma)))
            estimate = denoise_batch(config, states, noisy[None])[0]
            scores.append(psnr(chw, estimate))
        rows.append(ReportRow(dataset_name, sigma, model, mean_psnr(scores)))
    return DenoiseReport(rows)


def _eval_seed(seed: int, index: int, sigma: float) -> list[int]:
    return [int(seed), int(index), int(round(float(sigma) * 1000))]


def evaluate_datasets(
    checkpoint: Checkpoint,
    datasets: Mapping[str, Sequence[np.ndarray]],
    sigmas: Sequence[float],
    seed: int = DEFAULT_EVAL_SEED,
) -> DenoiseReport:
    report = DenoiseReport()
    for name, images in datasets.items():
        report = report + evaluate(checkpoint, images, sigmas, dataset_name=name, seed=seed)
    return report


def evaluate_pairs(checkpoint: Checkpoint, pairs: PatchSet | Sequence, dataset_name: str = "paired") -> DenoiseReport:
    """Real-noise evaluation on (noisy, clean) pairs; sigma is reported as ``real``."""
    items = pairs.pairs if isinstance(pairs, PatchSet) else list(pairs)
    if not items:
        raise ValueError("evaluation dataset is empty")
    config, states = checkpoint.config, checkpoint.states()
    scores = [psnr(clean, denoise_batch(config, states, _as_chw(noisy)[None])[0].reshape(clean.shape))
              for noisy, clean in items]
    return DenoiseReport([ReportRow(dataset_name, "real", config.name, mean_psnr(scores))])
