"""Supervised training of the classification head and encoder on labeled windows."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .adf import ALPHA_GRID, WindowSpec, predict_many, slice_series, tune_alpha_from_probs, usable_series
from .autograd import backward
from .data import ConsumptionSeries, propagate_labels
from .errors import BalanceError, DivergenceError
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class LabeledWindows:
    data: np.ndarray        # (n, w, m)
    labels: np.ndarray      # (n,)
    series_ids: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.labels)


def build_windows(series: list[ConsumptionSeries], spec: WindowSpec, dtype=np.float32) -> LabeledWindows:
    """Slice every labeled series; each window carries its series label."""
    series = usable_series(series, spec.window)
    blocks, labels, ids = [], [], []
    for s in series:
        batch = slice_series(s, spec.window, spec, dtype)
        blocks.append(batch.data)
        labels.append(propagate_labels(s, len(batch)))
        ids.append(np.full(len(batch), s.series_id, dtype=object))
    if not blocks:
        return LabeledWindows(np.zeros((0, spec.window, spec.channels), dtype), np.zeros(0, np.int64),
                              np.zeros(0, object))
    return LabeledWindows(np.concatenate(blocks), np.concatenate(labels), np.concatenate(ids))


@dataclass
class FinetuneConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    stop_at_perfect: bool = True


@dataclass
class FinetuneResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = -math.inf
    stopped_early: bool = False


def validation_score(model, val: list[ConsumptionSeries], spec: WindowSpec, grid=ALPHA_GRID, jobs: int = 1):
    """Best series-level Macro F1 over the alpha grid, and the alpha reaching it."""
    val = usable_series(val, spec.window)
    probs = [r.probs for r in predict_many(model, val, spec, jobs)]
    alpha = tune_alpha_from_probs(probs, [s.label for s in val], grid)
    return alpha.tuning_score, alpha.alpha_star


def finetune(model, train: LabeledWindows, val: list[ConsumptionSeries], spec: WindowSpec,
             cfg: FinetuneConfig | None = None, grid=ALPHA_GRID, jobs: int = 1, on_epoch=None) -> FinetuneResult:
    """Cross-entropy training with early stopping on validation Macro F1.

    The parameters of the best validation epoch are restored at the end.
    """
    cfg = cfg or FinetuneConfig()
    if len(np.unique(train.labels)) < 2:
        raise BalanceError("training windows contain a single class")
    rng = np.random.default_rng(cfg.seed)
    model.reseed(int(rng.integers(2**63)))
    opt = Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    result = FinetuneResult()
    best_state = {k: v.copy() for k, v in model.state_dict().items()}
    stale = 0
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(model.forward_classification(train.data[idx]), train.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"finetuning loss became {value} at epoch {epoch}")
            backward(loss)
            opt.step()
            total += value * len(idx)
        score, alpha = validation_score(model, val, spec, grid, jobs)
        result.history.append({"epoch": epoch, "train_loss": total / n, "val_macro_f1": score, "val_alpha": alpha})
        log.info("finetune epoch %d: loss %.5f, val macro F1 %.4f (alpha %.2f)", epoch, total / n, score, alpha)
        if on_epoch is not None:
            on_epoch(result.history[-1])
        # ties keep the later (longer trained) state; only a strict gain resets the patience
        stale = 0 if score > result.best_score else stale + 1
        if score >= result.best_score:
            result.best_score, result.best_epoch = score, epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        # a perfect score cannot be improved on, so waiting out the patience is wasted work
        if stale >= cfg.patience or (cfg.stop_at_perfect and result.best_score >= 1.0):
            result.stopped_early = epoch < cfg.max_epochs
            break
    model.load_state_dict(best_state)
    model.eval()
    return result


HISTORY_FIELDS = ("epoch", "train_loss", "val_macro_f1", "val_alpha")


def write_history(history: list[dict], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        writer.writerows(history)
