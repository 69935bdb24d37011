"""Consumption series, CSV ingestion, splitting, balancing and a synthetic generator."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import BalanceError, ConfigError, IngestionError, SplitError

log = logging.getLogger(__name__)


@dataclass
class ConsumptionSeries:
    """One household's load readings at a fixed sampling period."""

    series_id: str
    timestamps: np.ndarray
    values: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.series_id = str(self.series_id)
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.shape != self.values.shape or self.values.ndim != 1:
            raise IngestionError(f"series {self.series_id}: {self.timestamps.shape[0]} timestamps "
                                 f"for {self.values.shape[0]} values")
        if len(self.values) == 0:
            raise IngestionError(f"series {self.series_id}: empty")
        if len(self.timestamps) > 1:
            steps = np.diff(self.timestamps).astype(np.int64)
            if np.any(steps <= 0):
                raise IngestionError(f"series {self.series_id}: timestamps are not strictly increasing")
            if np.any(steps != steps[0]):
                raise IngestionError(f"series {self.series_id}: irregular sampling or missing slots")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise IngestionError(f"series {self.series_id}: values must be finite and non-negative")
        if self.label is not None:
            if self.label not in (0, 1):
                raise IngestionError(f"series {self.series_id}: label must be 0 or 1, got {self.label}")
            self.label = int(self.label)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def period(self) -> np.timedelta64 | None:
        return self.timestamps[1] - self.timestamps[0] if len(self) > 1 else None


@dataclass
class LabeledDataset:
    series: list[ConsumptionSeries]
    appliance: str
    unlabeled: list[ConsumptionSeries] = field(default_factory=list)

    def __post_init__(self):
        for s in self.series:
            if s.label is None:
                raise IngestionError(f"series {s.series_id} has no label for {self.appliance}")

    def __len__(self) -> int:
        return len(self.series)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.series], dtype=np.int64)

    @property
    def counts(self) -> dict[int, int]:
        y = self.labels
        return {0: int(np.sum(y == 0)), 1: int(np.sum(y == 1))}

    def subset(self, series: list[ConsumptionSeries]) -> "LabeledDataset":
        return LabeledDataset(list(series), self.appliance)

    def all_series(self) -> list[ConsumptionSeries]:
        return list(self.series) + list(self.unlabeled)


# -- CSV ---------------------------------------------------------------------

def _parse_timestamps(raw: pd.Series) -> pd.Series:
    try:
        ts = pd.to_datetime(raw, format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise IngestionError(f"unparseable timestamp: {exc}") from None
    if getattr(ts.dt, "tz", None) is not None:
        ts = ts.dt.tz_localize(None)  # keep local wall-clock time
    return ts


def load_csv(series_path, labels_path, appliance: str) -> LabeledDataset:
    """Read ``series_id,timestamp,value`` rows and ``series_id,appliance,label`` rows.

    Series without a label for ``appliance`` are kept in ``unlabeled``.
    """
    series_path, labels_path = Path(series_path), Path(labels_path) if labels_path else None
    if not series_path.exists():
        raise IngestionError(f"series file not found: {series_path}")
    frame = pd.read_csv(series_path, dtype={"series_id": str})
    missing = {"series_id", "timestamp", "value"} - set(frame.columns)
    if missing:
        raise IngestionError(f"{series_path}: missing columns {sorted(missing)}")
    frame["timestamp"] = _parse_timestamps(frame["timestamp"])

    labels: dict[str, int] = {}
    if labels_path is not None:
        if not labels_path.exists():
            raise IngestionError(f"labels file not found: {labels_path}")
        lab = pd.read_csv(labels_path, dtype={"series_id": str, "appliance": str})
        missing = {"series_id", "appliance", "label"} - set(lab.columns)
        if missing:
            raise IngestionError(f"{labels_path}: missing columns {sorted(missing)}")
        lab = lab[lab["appliance"] == appliance]
        for sid, y in zip(lab["series_id"], lab["label"]):
            labels[str(sid)] = int(y)

    labeled, unlabeled = [], []
    for sid, group in frame.groupby("series_id", sort=False):
        s = ConsumptionSeries(sid, group["timestamp"].to_numpy(), group["value"].to_numpy(), labels.get(sid))
        (labeled if s.label is not None else unlabeled).append(s)
    return LabeledDataset(labeled, appliance, unlabeled)


def write_csv(dataset: LabeledDataset, series_path, labels_path) -> None:
    """Write every series (labeled and unlabeled) and the labels of the labeled ones."""
    frames = []
    for s in dataset.all_series():
        frames.append(pd.DataFrame({
            "series_id": s.series_id,
            "timestamp": np.datetime_as_string(s.timestamps, unit="s"),
            "value": s.values,
        }))
    Path(series_path).parent.mkdir(parents=True, exist_ok=True)
    pd.concat(frames, ignore_index=True).to_csv(series_path, index=False, float_format="%.10g")
    pd.DataFrame({
        "series_id": [s.series_id for s in dataset.series],
        "appliance": dataset.appliance,
        "label": [s.label for s in dataset.series],
    }).to_csv(labels_path, index=False)


# -- split / balance ---------------------------------------------------------

_SPLIT_SALT = 0x5B17
_SYNTH_SALT = 0x5E7D


@dataclass
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0 or not math.isclose(self.train + self.val + self.test, 1.0):
            raise SplitError(f"split fractions must be non-negative and sum to 1, got "
                             f"{self.train}/{self.val}/{self.test}")


def split(ds: LabeledDataset, spec: SplitSpec | None = None):
    """Seeded random partition by series into train/val/test."""
    spec = spec or SplitSpec()
    n = len(ds)
    if n < 10:
        raise SplitError(f"need at least 10 series to split, got {n}")
    # salted stream: a bare default_rng(seed) would replay the permutation of any other consumer of the seed
    order = np.random.default_rng([spec.seed, _SPLIT_SALT]).permutation(n)
    n_train = math.floor(spec.train * n + 1e-9)
    n_val = math.floor(spec.val * n + 1e-9)
    parts = order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]
    return tuple(ds.subset([ds.series[i] for i in part]) for part in parts)


def undersample(ds: LabeledDataset, rng: np.random.Generator) -> LabeledDataset:
    """Randomly drop majority-class series until both classes have equal counts."""
    y = ds.labels
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise BalanceError(f"undersampling needs both classes, got counts {ds.counts}")
    keep_n = min(len(pos), len(neg))
    major = pos if len(pos) > len(neg) else neg
    minor = neg if major is pos else pos
    kept = np.sort(np.concatenate([minor, rng.choice(major, size=keep_n, replace=False)]))
    return ds.subset([ds.series[i] for i in kept])


def propagate_labels(series: ConsumptionSeries, n_windows: int) -> np.ndarray:
    """Every window of a series inherits the series label."""
    if series.label is None:
        raise ValueError(f"series {series.series_id} is unlabeled")
    return np.full(n_windows, series.label, dtype=np.int64)


# -- synthetic households ----------------------------------------------------

@dataclass
class SyntheticConfig:
    """Households with a daily base-load curve plus an optional rectangular appliance pulse."""

    n_households: int = 200
    length: int = 9600
    period_minutes: int = 30
    start: str = "2023-01-02T00:00:00"
    base_level: tuple[float, float] = (0.3, 1.0)
    daily_amplitude: float = 0.3
    noise_sigma: float = 0.1
    amplitude: float = 2.0
    duration: int = 3
    occurrences_per_day: int = 1
    hour_band: tuple[float, float] = (17.0, 22.0)
    positive_fraction: float = 0.5
    appliance: str = "appliance"
    seed: int = 0

    def __post_init__(self):
        if self.n_households < 1 or self.length < 1 or self.period_minutes < 1:
            raise ConfigError("n_households, length and period_minutes must be positive")
        if (24 * 60) % self.period_minutes:
            raise ConfigError("period_minutes must divide a day")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ConfigError("positive_fraction must lie in [0, 1]")
        lo, hi = self.hour_band
        if not 0 <= lo < hi <= 24:
            raise ConfigError(f"bad hour band {self.hour_band}")
        band = (hi - lo) * 60 / self.period_minutes
        if self.occurrences_per_day > 0 and band / self.occurrences_per_day < self.duration:
            raise ConfigError("hour band too narrow for the requested pulses")

    @property
    def slots_per_day(self) -> int:
        return 24 * 60 // self.period_minutes


def _pulse_starts(cfg: SyntheticConfig, rng: np.random.Generator, start_slot: int) -> np.ndarray:
    spd = cfg.slots_per_day
    lo = cfg.hour_band[0] * spd / 24
    width = (cfg.hour_band[1] - cfg.hour_band[0]) * spd / 24 / cfg.occurrences_per_day
    n_days = math.ceil((cfg.length + start_slot) / spd)
    starts = []
    for day in range(n_days):
        for k in range(cfg.occurrences_per_day):
            seg = lo + k * width
            first, last = math.ceil(seg), math.floor(seg + width) - cfg.duration
            starts.append(day * spd + int(rng.integers(first, last + 1)) - start_slot)
    return np.asarray(starts, dtype=np.int64)


def synthesize(cfg: SyntheticConfig) -> LabeledDataset:
    rng = np.random.default_rng([cfg.seed, _SYNTH_SALT])
    n = cfg.n_households
    n_pos = int(round(cfg.positive_fraction * n))
    labels = np.zeros(n, dtype=np.int64)
    labels[rng.permutation(n)[:n_pos]] = 1

    # stratified base levels inside each class, so classes differ only by the appliance
    levels = np.empty(n)
    lo, hi = cfg.base_level
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        strata = (rng.permutation(len(idx)) + rng.random(len(idx))) / max(len(idx), 1)
        levels[idx] = lo + (hi - lo) * strata

    t0 = np.datetime64(cfg.start, "s")
    step = np.timedelta64(cfg.period_minutes * 60, "s")
    timestamps = t0 + step * np.arange(cfg.length)
    start_slot = int((t0 - t0.astype("datetime64[D]")) // step)
    hours = ((np.arange(cfg.length) + start_slot) % cfg.slots_per_day) * (24 / cfg.slots_per_day)

    series = []
    for i in range(n):
        phase = rng.uniform(-2.0, 2.0)
        base = levels[i] + cfg.daily_amplitude * np.sin(2 * np.pi * (hours - 12.0 + phase) / 24)
        values = np.clip(base + rng.normal(0.0, cfg.noise_sigma, cfg.length), 0.0, None)
        if labels[i] == 1 and cfg.amplitude > 0 and cfg.occurrences_per_day > 0:
            for s in _pulse_starts(cfg, rng, start_slot):
                a, b = max(s, 0), min(s + cfg.duration, cfg.length)
                if a < b:
                    values[a:b] += cfg.amplitude
        series.append(ConsumptionSeries(f"h{i:04d}", timestamps, values, int(labels[i])))
    return LabeledDataset(series, cfg.appliance)
