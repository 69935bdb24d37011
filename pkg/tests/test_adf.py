import logging
import math

import numpy as np
import pytest

from transapp.adf import (ALPHA_GRID, DetectionResult, WindowSpec, detect, finish, hour_and_day, merge_quantile,
                          predict_many, predict_series, predict_windows, round_label, slice_series, time_encode,
                          time_features, tune_alpha, tune_alpha_from_probs, usable_series, write_results)
from transapp.data import ConsumptionSeries
from transapp.errors import IngestionError, MergeError, SeriesTooShortError, TuningError
from transapp.metrics import macro_f1
from transapp.model import TransAppConfig, TransAppModel

from oracles import quantile_sort


def series(length, sid="s", label=None, start="2023-01-02T00:00:00", seed=0):
    ts = np.datetime64(start, "s") + np.timedelta64(1800, "s") * np.arange(length)
    vals = np.random.default_rng(seed).uniform(0, 3, length)
    return ConsumptionSeries(sid, ts, vals, label)


# -- time encoding -----------------------------------------------------------

def test_alpha_grid():
    assert len(ALPHA_GRID) == 21 and ALPHA_GRID[0] == 0.0 and ALPHA_GRID[-1] == 1.0
    np.testing.assert_allclose(np.diff(ALPHA_GRID), 0.05, atol=1e-12)


def test_hour_six():
    sh, ch, _, _ = time_encode("2023-01-02T06:00:00")
    assert abs(sh - 1.0) <= 1e-12 and abs(ch) <= 1e-12


def test_hour_twenty_four_is_midnight():
    sh, ch, _, _ = time_encode("2023-01-02T00:00:00")
    assert abs(sh) <= 1e-12 and abs(ch - 1.0) <= 1e-12


def test_day_seven_is_sunday():
    _, _, sd, cd = time_encode("2023-01-08T12:00:00")  # a Sunday
    assert abs(sd) <= 1e-12 and abs(cd - 1.0) <= 1e-12


def test_hour_and_weekday_indices():
    ts = np.array(["2023-01-02T00:00", "2023-01-02T00:30", "2023-01-02T13:59", "2023-01-07T23:30",
                   "2023-01-08T01:00", "1970-01-01T05:00"], dtype="datetime64[s]")
    hour, day = hour_and_day(ts)
    assert hour.tolist() == [24, 24, 13, 23, 1, 5]
    assert day.tolist() == [1, 1, 1, 6, 7, 4]  # Monday .. Sunday; 1970-01-01 was a Thursday


def test_weekday_matches_python_calendar():
    import datetime as dt
    days = np.datetime64("2020-02-20") + np.arange(400)
    _, wd = hour_and_day(days.astype("datetime64[s]"))
    expected = [dt.date.fromisoformat(str(d)).isoweekday() for d in days]
    assert wd.tolist() == expected


def test_time_encode_rejects_garbage():
    with pytest.raises(IngestionError):
        time_encode("not a time")


def test_time_features_in_unit_range():
    f = time_features(series(500).timestamps)
    assert f.shape == (500, 4) and np.abs(f).max() <= 1.0


# -- slicing -----------------------------------------------------------------

@pytest.mark.parametrize("length,w", [(25728, 1024), (1024, 1024), (2500, 1024), (100, 7), (9600, 256), (31, 2)])
def test_window_count_is_floor(length, w):
    batch = slice_series(series(length), w)
    assert len(batch) == length // w
    assert batch.data.shape == (length // w, w, 5)


def test_slice_positions_and_channels():
    s = series(2500)
    batch = slice_series(s, 1024, WindowSpec(1024, load_mean=1.0, load_std=2.0), dtype=np.float64)
    assert batch.window_index.tolist() == [0, 1]
    np.testing.assert_allclose(batch.data[1, :, 0], (s.values[1024:2048] - 1.0) / 2.0)
    np.testing.assert_allclose(batch.data[1, :, 1:], time_features(s.timestamps[1024:2048]))


def test_slice_without_time_channels():
    assert slice_series(series(64), 16, WindowSpec(16, time_channels=False)).data.shape == (4, 16, 1)


def test_too_short_series(caplog):
    with pytest.raises(SeriesTooShortError):
        slice_series(series(10), 16)
    with caplog.at_level(logging.WARNING):
        kept = usable_series([series(10, "a"), series(16, "b")], 16)
    assert [s.series_id for s in kept] == ["b"]
    assert "skipped 1" in caplog.text


# -- merging -----------------------------------------------------------------

def test_merge_extremes_and_labels():
    p = [0.1, 0.9, 0.2]
    assert merge_quantile(p, 1.0) == 0.9 and round_label(merge_quantile(p, 1.0)) == 1
    assert merge_quantile(p, 0.0) == 0.1 and round_label(merge_quantile(p, 0.0)) == 0
    assert merge_quantile(p, 0.5) == 0.2


def test_merge_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        p = rng.random(int(rng.integers(1, 13)))
        for a in ALPHA_GRID:
            assert abs(merge_quantile(p, a) - quantile_sort(p, a)) <= 1e-12


def test_merge_matches_numpy_linear_quantile():
    p = np.random.default_rng(1).random(37)
    for a in ALPHA_GRID:
        assert merge_quantile(p, a) == pytest.approx(np.quantile(p, a, method="linear"), abs=1e-12)


def test_merge_errors():
    with pytest.raises(MergeError):
        merge_quantile([], 0.5)
    with pytest.raises(MergeError):
        merge_quantile([0.3], 1.5)


def test_round_half_up():
    assert round_label(0.5) == 1 and round_label(0.4999999) == 0
    r = finish(DetectionResult("x", np.array([0.5, 0.5])), 0.3)
    assert r.merged == 0.5 and r.label == 1


# -- tuning ------------------------------------------------------------------

def one_window_fires(n_pos=5, n_neg=5, n_windows=10):
    probs, y = [], []
    for _ in range(n_pos):
        p = np.full(n_windows, 0.1)
        p[3] = 0.9
        probs.append(p)
        y.append(1)
    for _ in range(n_neg):
        probs.append(np.full(n_windows, 0.1))
        y.append(0)
    return probs, y


def test_tune_alpha_prefers_high_quantile_when_one_window_fires():
    probs, y = one_window_fires()
    a = tune_alpha_from_probs(probs, y)
    median_score = macro_f1(y, [round_label(merge_quantile(p, 0.5)) for p in probs])
    assert a.tuning_score == 1.0 > median_score
    # the top interpolation segment crosses 0.5 at alpha = 8.5/9 = 0.944..., so 0.95 is the first grid hit
    assert a.alpha_star == 0.95
    assert a.scores[ALPHA_GRID.index(0.95)] == 1.0 and a.scores[ALPHA_GRID.index(0.9)] < 1.0


def test_tune_alpha_ties_go_to_smallest_alpha():
    probs = [np.full(4, 0.9)] * 3 + [np.full(4, 0.1)] * 3
    a = tune_alpha_from_probs(probs, [1, 1, 1, 0, 0, 0])
    assert a.alpha_star == 0.0 and all(s == 1.0 for s in a.scores)


def test_tune_alpha_unsorted_grid_and_singleton():
    probs, y = one_window_fires()
    assert tune_alpha_from_probs(probs, y, grid=[1.0, 0.95, 0.0]).alpha_star == 0.95
    assert tune_alpha_from_probs(probs, y, grid=[0.3]).alpha_star == 0.3


def test_tune_alpha_is_argmax_on_random_fixtures():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = 8
        y = np.array([0, 1] * (n // 2))
        probs = [rng.random(int(rng.integers(1, 9))) for _ in range(n)]
        a = tune_alpha_from_probs(probs, y)
        scores = [macro_f1(y, [round_label(quantile_sort(p, g)) for p in probs]) for g in ALPHA_GRID]
        best = max(scores)
        assert a.tuning_score == best
        assert a.alpha_star == ALPHA_GRID[scores.index(best)]
        # order of validation series does not matter
        perm = rng.permutation(n)
        assert tune_alpha_from_probs([probs[i] for i in perm], y[perm]).alpha_star == a.alpha_star


def test_tune_alpha_errors():
    with pytest.raises(TuningError):
        tune_alpha_from_probs([np.ones(2)] * 2, [1, 1])
    with pytest.raises(TuningError):
        tune_alpha_from_probs([np.ones(2)] * 2, [0, 1, 1])


# -- prediction --------------------------------------------------------------

def tiny_model(seed=0):
    return TransAppModel(TransAppConfig(d_model=8, n_heads=2, n_layers=1), seed=seed)


def test_zero_class_head_gives_half():
    model = tiny_model()
    model.class_head.weight.data[:] = 0
    model.class_head.bias.data[:] = 0
    r = predict_series(model, series(100), WindowSpec(16))
    assert r.n_windows == 6
    np.testing.assert_allclose(r.probs, 0.5)
    assert detect(model, series(100), 0.5, WindowSpec(16)).label == 1


def test_probabilities_in_unit_interval_and_mode_restored():
    model = tiny_model().train()
    r = predict_series(model, series(300), WindowSpec(32))
    assert r.n_windows == 9 and np.all((r.probs >= 0) & (r.probs <= 1))
    assert model.training


def test_batched_equals_one_at_a_time():
    model = tiny_model(3)
    data = slice_series(series(640), 32).data
    batched = predict_windows(model, data, batch_size=32)
    single = np.concatenate([predict_windows(model, data[i:i + 1], batch_size=1) for i in range(len(data))])
    np.testing.assert_allclose(batched, single, atol=1e-6)


def test_threaded_prediction_matches_serial():
    model = tiny_model(4)
    many = [series(200, f"s{i}", seed=i) for i in range(6)]
    spec = WindowSpec(32)
    a = predict_many(model, many, spec, jobs=1)
    b = predict_many(model, many, spec, jobs=3)
    for x, y in zip(a, b):
        assert x.series_id == y.series_id
        np.testing.assert_array_equal(x.probs, y.probs)


class ConstantModel:
    """Stand-in classifier emitting fixed class-1 probabilities."""

    training = False
    dtype = np.float32

    def __init__(self, p):
        self.logit = math.log(p / (1 - p))

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def forward_classification(self, x):
        from transapp.autograd import Tensor
        out = np.zeros((x.shape[0], 2), np.float32)
        out[:, 1] = self.logit
        return Tensor(out)


@pytest.mark.parametrize("p,label", [(0.9, 1), (0.1, 0)])
def test_detect_constant_probabilities(p, label):
    for a in (0.0, 0.35, 1.0):
        r = detect(ConstantModel(p), series(64), a, WindowSpec(16))
        assert r.label == label and r.alpha == a
        np.testing.assert_allclose(r.probs, p, atol=1e-6)


def test_detect_is_deterministic():
    model = tiny_model(5)
    a = detect(model, series(300), 0.4, WindowSpec(32))
    b = detect(model, series(300), 0.4, WindowSpec(32))
    assert a.merged == b.merged and np.array_equal(a.probs, b.probs)


def test_tune_alpha_on_model_and_results_csv(tmp_path):
    model = tiny_model(6)
    val = [series(128, f"v{i}", label=i % 2, seed=i) for i in range(6)]
    a = tune_alpha(model, val, WindowSpec(32), appliance="kettle")
    assert a.alpha_star in a.grid and a.appliance == "kettle"
    results = [detect(model, s, a, WindowSpec(32)) for s in val[:1]]
    write_results(results, tmp_path / "r.csv", "kettle")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "series_id,appliance,merged_prob,label,n_windows,alpha_used"
    assert len(lines) == 2 and lines[1].startswith("v0,kettle,")
