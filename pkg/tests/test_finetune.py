import numpy as np
import pytest

from transapp.adf import WindowSpec
from transapp.data import SplitSpec, SyntheticConfig, split, synthesize, undersample
from transapp.errors import BalanceError
from transapp.finetune import FinetuneConfig, LabeledWindows, build_windows, finetune, validation_score, write_history
from transapp.model import TransAppConfig, TransAppModel

W = 64


@pytest.fixture(scope="module")
def splits():
    ds = synthesize(SyntheticConfig(n_households=40, length=512, seed=2))
    train, val, test = split(ds, SplitSpec(seed=2))
    return undersample(train, np.random.default_rng(0)), val, test


def model(seed=0):
    return TransAppModel(TransAppConfig(d_model=16, n_heads=2, n_layers=1), seed=seed)


def test_build_windows_propagates_labels(splits):
    train, _, _ = splits
    spec = WindowSpec(W).fitted(train.series)
    windows = build_windows(train.series, spec)
    assert len(windows) == len(train) * (512 // W)
    for s in train.series:
        assert set(windows.labels[windows.series_ids == s.series_id]) == {s.label}


def test_separable_data_reaches_high_validation_score(splits, tmp_path):
    train, val, _ = splits
    spec = WindowSpec(W).fitted(train.series)
    m = model()
    result = finetune(m, build_windows(train.series, spec), val.series, spec, FinetuneConfig(lr=1e-3, max_epochs=10))
    assert 1 <= len(result.history) <= 10
    assert result.best_score > 0.9
    # the restored parameters are the ones that produced the best score
    assert validation_score(m, val.series, spec)[0] == result.best_score
    assert not m.training
    write_history(result.history, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().startswith("epoch,train_loss,val_macro_f1,val_alpha")


def test_patience_stops_training(splits):
    train, val, _ = splits
    spec = WindowSpec(W).fitted(train.series)
    # a vanishing learning rate leaves the validation score flat
    cfg = FinetuneConfig(lr=1e-12, max_epochs=20, patience=2, stop_at_perfect=False)
    result = finetune(model(), build_windows(train.series, spec), val.series, spec, cfg)
    assert len(result.history) == 3 and result.stopped_early
    assert result.best_epoch == 3  # equal scores keep the latest state


def test_single_class_training_windows_rejected(splits):
    train, val, _ = splits
    spec = WindowSpec(W).fitted(train.series)
    w = build_windows(train.series, spec)
    ones = LabeledWindows(w.data, np.ones_like(w.labels), w.series_ids)
    with pytest.raises(BalanceError):
        finetune(model(), ones, val.series, spec)


def test_finetune_is_deterministic(splits):
    train, val, _ = splits
    spec = WindowSpec(W).fitted(train.series)
    windows = build_windows(train.series, spec)
    cfg = FinetuneConfig(lr=1e-3, max_epochs=2, stop_at_perfect=False)
    a = finetune(model(), windows, val.series, spec, cfg).history
    b = finetune(model(), windows, val.series, spec, cfg).history
    assert a == b
