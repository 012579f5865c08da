"""MSE loss, Adam, the training loop and a finite-difference gradient check."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .errors import DimensionError, TrainingDivergedError
from .layers import LayerState, NetworkConfig, init_network, network_backward, network_forward
from .pipeline import PatchSet, from_internal, mean_psnr, psnr, to_internal

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "train_loss", "val_psnr")


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise DimensionError(f"pred {pred.shape} and target {target.shape} differ")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]
) -> tuple[Sequence[np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameter tensors but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"parameter {p.shape} / gradient {g.shape} mismatch")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass
class TrainPlan:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    split_ratio: float = 0.9
    lr_decay: bool = False  # halve lr every 30 epochs

    def __post_init__(self):
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError(f"split_ratio must be in (0, 1), got {self.split_ratio}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError(f"invalid plan {self}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        if not self.lr_decay:
            return self.lr
        return self.lr * 0.5 ** ((epoch - 1) // 30)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_psnr: float


def split_indices(n: int, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled train/validation split. With fewer than two samples both share everything."""
    perm = rng.permutation(n)
    if n < 2:
        return perm, perm
    n_train = min(max(int(round(n * ratio)), 1), n - 1)
    return perm[:n_train], perm[n_train:]


def flat_params(states: Sequence[LayerState]) -> list[np.ndarray]:
    out = []
    for s in states:
        out.extend((s.weight, s.bias))
    return out


def flat_grads(grads) -> list[np.ndarray]:
    out = []
    for gw, gb in grads:
        out.extend((gw, gb))
    return out


def batch_loss_and_grads(config, states, noisy, clean):
    """MSE in the internal [-1, 1] domain and its parameter gradients."""
    x = to_internal(noisy)
    y, caches = network_forward(config, states, x, keep_cache=True)
    loss, g = mse_loss(y, to_internal(clean))
    grads, _ = network_backward(config, states, x, caches, g)
    return loss, grads


def validation_psnr(config, states, data: PatchSet, chunk: int = 64) -> float:
    scores = []
    for start in range(0, len(data), chunk):
        noisy = data.noisy[start : start + chunk]
        clean = data.clean[start : start + chunk]
        est = np.clip(from_internal(network_forward(config, states, to_internal(noisy)), noisy), 0.0, 1.0)
        scores.extend(psnr(c, e) for c, e in zip(clean, est))
    return mean_psnr(scores)


def write_log(path: str | os.PathLike, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.train_loss), "inf" if math.isinf(rec.val_psnr) else repr(rec.val_psnr)])


def train(
    config: NetworkConfig,
    dataset: PatchSet,
    plan: TrainPlan = TrainPlan(),
    log_path: str | os.PathLike | None = None,
    on_step: Callable[[int, float], None] | None = None,
    history: list[EpochRecord] | None = None,
) -> Checkpoint:
    """Mini-batch Adam on MSE; returns the best-validation-PSNR checkpoint.

    ``on_step(step, loss)`` is called after every optimizer step. Per-epoch
    records are appended to ``history`` when given, and written to
    ``log_path`` as CSV.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if dataset.channels != config.channels:
        raise DimensionError(f"dataset has {dataset.channels} channel(s), model {config.channels}")
    rng = np.random.default_rng(plan.seed)
    train_idx, val_idx = split_indices(len(dataset), plan.split_ratio, rng)
    if len(dataset) < 2:
        log.warning("single-sample dataset: validating on the training sample")
    train_set, val_set = dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(val_idx))

    states = init_network(config, plan.seed)
    params = flat_params(states)
    opt = AdamState(lr=plan.lr)
    records = history if history is not None else []

    best_psnr = validation_psnr(config, states, val_set)
    best = Checkpoint.from_states(config, states, epoch=0, validation_psnr=best_psnr)
    step = 0
    for epoch in range(1, plan.epochs + 1):
        opt.lr = plan.lr_at(epoch)
        order = rng.permutation(len(train_set))
        losses = []
        for b, start in enumerate(range(0, len(order), plan.batch_size)):
            idx = np.sort(order[start : start + plan.batch_size])
            loss, grads = batch_loss_and_grads(config, states, train_set.noisy[idx], train_set.clean[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss)
            adam_step(opt, params, flat_grads(grads))
            step += 1
            losses.append(loss)
            if on_step is not None:
                on_step(step, loss)
        val = validation_psnr(config, states, val_set)
        rec = EpochRecord(epoch, float(np.mean(losses)), val)
        records.append(rec)
        log.info("epoch %d  train_loss %.6g  val_psnr %.4f", epoch, rec.train_loss, val)
        if val > best_psnr:
            best_psnr = val
            best = Checkpoint.from_states(config, states, epoch=epoch, validation_psnr=val)
    if log_path is not None:
        write_log(log_path, records)
    return best


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute discrepancy over the larger of the two max-magnitudes."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of ``f()`` with respect to ``x`` (perturbed in place).

    ``index`` restricts probing to the given flat indices; other entries are 0.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if index is None else index:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


@dataclass
class GradCheckReport:
    layers: list[tuple[int, float, float]]  # (layer, weight error, bias error)
    tolerance: float

    @property
    def max_error(self) -> float:
        return max((max(w, b) for _, w, b in self.layers), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self) -> str:
        lines = [f"layer {i}: weight {w:.3e}  bias {b:.3e}" for i, w, b in self.layers]
        lines.append(f"max {self.max_error:.3e} ({'pass' if self.passed else 'FAIL'} at {self.tolerance:g})")
        return "\n".join(lines)


def grad_check(
    config: NetworkConfig,
    seed: int = 0,
    tolerance: float = 1e-4,
    size: int = 8,
    batch: int = 2,
    step: float = 1e-5,
    max_probes: int | None = None,
) -> GradCheckReport:
    """Compare backprop gradients of MSE against central differences, per layer.

    ``max_probes`` caps the number of randomly chosen entries checked per
    tensor; by default every entry is probed.
    """
    rng = np.random.default_rng(seed)
    states = init_network(config, seed)
    # nonzero biases so the bias path is exercised away from init
    for s in states:
        s.bias[:] = rng.uniform(-0.1, 0.1, size=s.bias.shape)
    x = rng.uniform(-1.0, 1.0, size=(batch, config.channels, size, size))
    target = rng.uniform(-1.0, 1.0, size=x.shape)

    def loss() -> float:
        return mse_loss(network_forward(config, states, x), target)[0]

    y, caches = network_forward(config, states, x, keep_cache=True)
    _, g = mse_loss(y, target)
    grads, _ = network_backward(config, states, x, caches, g)

    rows = []
    for i, (s, (gw, gb)) in enumerate(zip(states, grads)):
        errs = []
        for param, analytic in ((s.weight, gw), (s.bias, gb)):
            index = None
            if max_probes is not None and param.size > max_probes:
                index = rng.choice(param.size, size=max_probes, replace=False)
            numeric = numeric_gradient(loss, param, step, index)
            if index is not None:
                mask = np.zeros(param.size, dtype=bool)
                mask[index] = True
                analytic = np.where(mask.reshape(param.shape), analytic, 0.0)
            errs.append(relative_error(analytic, numeric))
        rows.append((i, errs[0], errs[1]))
    return GradCheckReport(rows, tolerance)
