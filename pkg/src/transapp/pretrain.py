"""Masked-reconstruction pretraining on unlabeled windows.

Random segments of the load channel are zeroed; the reconstruction head learns
to recover them under a mean absolute error restricted to masked positions.
Time channels are never masked. Nothing in this module reads labels: it only
accepts :class:`UnlabeledWindows`, which has no label field.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Tensor, backward, tabs
from .errors import ConfigError, DivergenceError, EmptyMaskError
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class MaskSpec:
    ratio: float = 0.5
    mean_masked_len: float = 24.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"mask ratio must lie in (0, 1), got {self.ratio}")
        if self.mean_masked_len < 1:
            raise ConfigError(f"mean masked length must be >= 1, got {self.mean_masked_len}")

    @property
    def mean_unmasked_len(self) -> float:
        return self.mean_masked_len * (1.0 - self.ratio) / self.ratio


def generate_mask(w: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask (True = masked) from an alternating two-state process.

    Masked and unmasked run lengths are geometric with means ``l_m`` and
    ``l_m * (1 - r) / r``; the first state is masked with probability ``r``.
    """
    mask = np.zeros(w, dtype=bool)
    p_masked = 1.0 / spec.mean_masked_len
    p_unmasked = min(1.0, 1.0 / spec.mean_unmasked_len)
    state = rng.random() < spec.ratio
    pos = 0
    while pos < w:
        run = int(rng.geometric(p_masked if state else p_unmasked))
        if state:
            mask[pos:pos + run] = True
        pos += run
        state = not state
    return mask


def generate_masks(n: int, w: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    return np.stack([generate_mask(w, spec, rng) for _ in range(n)]) if n else np.zeros((0, w), bool)


@dataclass
class MaskedBatch:
    corrupted: np.ndarray   # (batch, w, m)
    target: np.ndarray      # (batch, w, 1), original load
    mask: np.ndarray        # (batch, w) bool


def apply_mask(data: np.ndarray, mask: np.ndarray, load_channel: int = 0) -> MaskedBatch:
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[None]
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, data.shape[:2])
    if mask.shape != data.shape[:2]:
        raise ConfigError(f"mask shape {mask.shape} does not match windows {data.shape[:2]}")
    if not 0 <= load_channel < data.shape[2]:
        raise ConfigError(f"load channel {load_channel} out of range for {data.shape[2]} channels")
    corrupted = data.copy()
    corrupted[..., load_channel][mask] = 0.0
    target = data[..., load_channel:load_channel + 1].copy()
    return MaskedBatch(corrupted, target, np.array(mask))


def masked_mae(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean |pred - target| over masked positions only."""
    m = np.asarray(mask, dtype=bool).reshape(pred.shape)
    count = int(m.sum())
    if count == 0:
        raise EmptyMaskError("no masked position in batch")
    weights = m.astype(pred.dtype) / count
    return (tabs(pred - np.asarray(target, dtype=pred.dtype)) * weights).sum()


@dataclass
class UnlabeledWindows:
    """Windows for pretraining. Carries no labels by construction."""

    data: np.ndarray  # (n, w, m)

    def __len__(self) -> int:
        return self.data.shape[0]


@dataclass
class PretrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0


def pretrain(model, windows: UnlabeledWindows, spec: MaskSpec, cfg: PretrainConfig | None = None,
             optimizer: Adam | None = None, on_epoch=None):
    """Minimise masked MAE for ``cfg.epochs`` epochs.

    Returns ``(model, trace)`` where ``trace`` holds the mean train loss per epoch.
    """
    cfg = cfg or PretrainConfig()
    if not isinstance(windows, UnlabeledWindows):
        raise TypeError("pretrain takes UnlabeledWindows")
    if len(windows) == 0:
        raise ConfigError("no windows to pretrain on")
    rng = np.random.default_rng([cfg.seed, spec.seed])
    model.reseed(int(rng.integers(2**63)))
    opt = optimizer or Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    model.train()
    trace = []
    n, w = windows.data.shape[:2]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = apply_mask(windows.data[idx], generate_masks(len(idx), w, spec, rng))
            if not batch.mask.any():
                log.debug("skipping batch without masked positions")
                continue
            opt.zero_grad()
            loss = masked_mae(model.forward_reconstruction(batch.corrupted), batch.target, batch.mask)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"pretraining loss became {value} at epoch {epoch + 1}")
            backward(loss)
            opt.step()
            total += value * len(idx)
            seen += len(idx)
        trace.append(total / max(seen, 1))
        log.info("pretrain epoch %d: masked MAE %.5f", epoch + 1, trace[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, trace[-1])
    return model, trace


def write_trace(trace: list[float], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_mae"])
        for i, v in enumerate(trace, 1):
            writer.writerow([i, f"{v:.8g}"])
