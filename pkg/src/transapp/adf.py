"""Appliance detection over whole series.

A series is cut into non-overlapping windows, each window gets four cyclic
time channels, the classifier scores every window, and the window
probabilities are merged by a quantile whose level is tuned on validation data.
"""
from __future__ import annotations

import contextlib
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import no_grad
from .data import ConsumptionSeries
from .errors import IngestionError, MergeError, SeriesTooShortError, TuningError
from .metrics import macro_f1

log = logging.getLogger(__name__)

HOURS_PER_DAY = 24
DAYS_PER_WEEK = 7
ALPHA_GRID = tuple(round(0.05 * i, 2) for i in range(21))


def cyclic(index, period: int):
    """(sin, cos) of ``2*pi*index/period``."""
    angle = 2.0 * np.pi * np.asarray(index, dtype=np.float64) / period
    return np.sin(angle), np.cos(angle)


def hour_and_day(timestamps) -> tuple[np.ndarray, np.ndarray]:
    """Hour of day in 1..24 (midnight is 24) and ISO weekday in 1..7 (Sunday is 7)."""
    ts = np.asarray(timestamps, dtype="datetime64[s]")
    days = ts.astype("datetime64[D]")
    hour = ((ts - days) // np.timedelta64(1, "h")).astype(np.int64)
    hour = np.where(hour == 0, HOURS_PER_DAY, hour)
    # 1970-01-01 was a Thursday
    weekday = (days.astype(np.int64) + 3) % DAYS_PER_WEEK + 1
    return hour, weekday


def time_encode(timestamp) -> tuple[float, float, float, float]:
    """(sin hour, cos hour, sin day, cos day) for one timestamp."""
    try:
        ts = np.datetime64(timestamp, "s")
    except (ValueError, TypeError) as exc:
        raise IngestionError(f"cannot read timestamp {timestamp!r}: {exc}") from None
    hour, day = hour_and_day(np.array([ts]))
    sh, ch = cyclic(hour[0], HOURS_PER_DAY)
    sd, cd = cyclic(day[0], DAYS_PER_WEEK)
    return float(sh), float(ch), float(sd), float(cd)


def time_features(timestamps) -> np.ndarray:
    """(l, 4) array of the cyclic hour and weekday channels."""
    hour, day = hour_and_day(timestamps)
    sh, ch = cyclic(hour, HOURS_PER_DAY)
    sd, cd = cyclic(day, DAYS_PER_WEEK)
    return np.stack([sh, ch, sd, cd], axis=1)


@dataclass
class WindowSpec:
    """How a series becomes model input: window length, channels, load scaling."""

    window: int = 1024
    time_channels: bool = True
    load_mean: float = 0.0
    load_std: float = 1.0

    @property
    def channels(self) -> int:
        return 5 if self.time_channels else 1

    def fitted(self, series: list[ConsumptionSeries]) -> "WindowSpec":
        """Copy with load scaling fitted on ``series`` (train-split statistics)."""
        values = np.concatenate([s.values for s in series])
        std = float(values.std())
        return WindowSpec(self.window, self.time_channels, float(values.mean()), std if std > 0 else 1.0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SubsequenceBatch:
    data: np.ndarray          # (n, w, m); channel 0 is load
    series_id: str
    window_index: np.ndarray

    def __len__(self) -> int:
        return self.data.shape[0]


def slice_series(series: ConsumptionSeries, w: int, spec: WindowSpec | None = None,
                 dtype=np.float32) -> SubsequenceBatch:
    """Tumbling windows ``[k*w, (k+1)*w)``; the tail shorter than ``w`` is dropped."""
    spec = spec or WindowSpec(window=w)
    length = len(series)
    if w < 1:
        raise ValueError(f"window must be positive, got {w}")
    if length < w:
        raise SeriesTooShortError(f"series {series.series_id}: length {length} < window {w}")
    n = length // w
    used = n * w
    load = (series.values[:used] - spec.load_mean) / spec.load_std
    cols = [load[:, None]]
    if spec.time_channels:
        cols.append(time_features(series.timestamps[:used]))
    data = np.concatenate(cols, axis=1).reshape(n, w, -1).astype(dtype)
    return SubsequenceBatch(data, series.series_id, np.arange(n))


def usable_series(series: list[ConsumptionSeries], w: int) -> list[ConsumptionSeries]:
    """Drop (and count) series shorter than one window."""
    kept = [s for s in series if len(s) >= w]
    if len(kept) < len(series):
        log.warning("skipped %d series shorter than window %d", len(series) - len(kept), w)
    return kept


# -- prediction --------------------------------------------------------------

def _window_probs(model, data: np.ndarray, batch_size: int) -> np.ndarray:
    probs = []
    for start in range(0, data.shape[0], batch_size):
        logits = model.forward_classification(data[start:start + batch_size]).data.astype(np.float64)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs.append(e[:, 1] / e.sum(axis=1))
    return np.concatenate(probs) if probs else np.zeros(0)


@contextlib.contextmanager
def inference(model):
    """Eval mode without graph recording; restores the previous mode."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            yield model
    finally:
        model.train(was_training)


def predict_windows(model, data: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Class-1 probability of every window."""
    with inference(model):
        return _window_probs(model, data, batch_size)


@dataclass
class DetectionResult:
    series_id: str
    probs: np.ndarray
    merged: float | None = None
    label: int | None = None
    alpha: float | None = None

    @property
    def n_windows(self) -> int:
        return len(self.probs)


def _series_probs(model, series: ConsumptionSeries, spec: WindowSpec, batch_size: int) -> DetectionResult:
    batch = slice_series(series, spec.window, spec, dtype=model.dtype)
    return DetectionResult(series.series_id, _window_probs(model, batch.data, batch_size))


def predict_series(model, series: ConsumptionSeries, spec: WindowSpec, batch_size: int = 32) -> DetectionResult:
    """Window probabilities of one series; ``merged`` and ``label`` stay unset."""
    with inference(model):
        return _series_probs(model, series, spec, batch_size)


def predict_many(model, series: list[ConsumptionSeries], spec: WindowSpec, jobs: int = 1,
                 batch_size: int = 32) -> list[DetectionResult]:
    """Per-series window probabilities, fanned out over a thread pool."""
    with inference(model):
        if jobs <= 1 or len(series) <= 1:
            return [_series_probs(model, s, spec, batch_size) for s in series]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda s: _series_probs(model, s, spec, batch_size), series))


# -- merging -----------------------------------------------------------------

def merge_quantile(probs, alpha: float) -> float:
    """Empirical ``alpha``-quantile with linear interpolation between order statistics."""
    p = np.sort(np.asarray(probs, dtype=np.float64).reshape(-1))
    if p.size == 0:
        raise MergeError("cannot merge an empty probability vector")
    if not 0.0 <= alpha <= 1.0:
        raise MergeError(f"alpha must lie in [0, 1], got {alpha}")
    pos = alpha * (p.size - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, p.size - 1)
    frac = pos - lo
    return float(p[lo] + (p[hi] - p[lo]) * frac)


def round_label(value: float) -> int:
    """Half rounds up: 0.5 -> 1."""
    return 1 if value >= 0.5 else 0


@dataclass
class AlphaParameter:
    appliance: str
    alpha_star: float
    grid: tuple[float, ...] = ALPHA_GRID
    tuning_score: float = float("nan")
    scores: tuple[float, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["scores"] = list(self.scores)
        return d


def tune_alpha_from_probs(probs: list[np.ndarray], y_true, grid=ALPHA_GRID,
                          appliance: str = "appliance", score=macro_f1) -> AlphaParameter:
    """Pick the grid level whose merged labels maximise ``score``; ties go to the smallest level."""
    y_true = np.asarray(y_true, dtype=np.int64)
    if len(probs) != len(y_true):
        raise TuningError(f"{len(probs)} probability vectors for {len(y_true)} labels")
    if len(np.unique(y_true)) < 2:
        raise TuningError("validation set must contain both classes to tune alpha")
    grid = tuple(sorted(float(a) for a in grid))
    if not grid:
        raise TuningError("empty alpha grid")
    scores = []
    for a in grid:
        pred = [round_label(merge_quantile(p, a)) for p in probs]
        scores.append(float(score(y_true, pred)))
    best = int(np.argmax(scores))  # first maximum, i.e. the smallest alpha
    assert all(scores[best] >= s for s in scores)
    return AlphaParameter(appliance, grid[best], grid, scores[best], tuple(scores))


def tune_alpha(model, validation: list[ConsumptionSeries], spec: WindowSpec, grid=ALPHA_GRID,
               appliance: str = "appliance", jobs: int = 1) -> AlphaParameter:
    """Window probabilities are computed once and re-merged for every grid level."""
    validation = usable_series(validation, spec.window)
    results = predict_many(model, validation, spec, jobs)
    return tune_alpha_from_probs([r.probs for r in results], [s.label for s in validation], grid, appliance)


def finish(result: DetectionResult, alpha: float) -> DetectionResult:
    result.merged = merge_quantile(result.probs, alpha)
    result.label = round_label(result.merged)
    result.alpha = alpha
    return result


def detect(model, series: ConsumptionSeries, alpha: AlphaParameter | float, spec: WindowSpec) -> DetectionResult:
    a = alpha.alpha_star if isinstance(alpha, AlphaParameter) else float(alpha)
    return finish(predict_series(model, series, spec), a)


RESULT_FIELDS = ("series_id", "appliance", "merged_prob", "label", "n_windows", "alpha_used")


def write_results(results: list[DetectionResult], path, appliance: str) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_FIELDS)
        for r in results:
            writer.writerow([r.series_id, appliance, f"{r.merged:.10g}", r.label, r.n_windows, r.alpha])
