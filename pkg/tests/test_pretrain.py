import dataclasses

import numpy as np
import pytest

from transapp.adf import WindowSpec, slice_series
from transapp.autograd import Tensor, backward
from transapp.data import SyntheticConfig, synthesize
from transapp.errors import ConfigError, DivergenceError, EmptyMaskError
from transapp.finetune import LabeledWindows
from transapp.model import TransAppConfig, TransAppModel
from transapp.pretrain import (MaskSpec, PretrainConfig, UnlabeledWindows, apply_mask, generate_mask,
                               generate_masks, masked_mae, pretrain, write_trace)

from oracles import numeric_grad, runs


def test_mask_spec_validation_and_unmasked_mean():
    assert MaskSpec().mean_unmasked_len == 24
    assert MaskSpec(ratio=0.25, mean_masked_len=10).mean_unmasked_len == pytest.approx(30)
    for bad in (dict(ratio=0.0), dict(ratio=1.0), dict(mean_masked_len=0.5)):
        with pytest.raises(ConfigError):
            MaskSpec(**bad)


def test_mask_statistics_monte_carlo():
    rng = np.random.default_rng(0)
    masks = generate_masks(1000, 4096, MaskSpec(0.5, 24), rng)
    assert 0.45 <= masks.mean() <= 0.55
    masked_runs = [n for m in masks for v, n in runs(m) if v]
    assert 21 <= np.mean(masked_runs) <= 27


def test_mask_statistics_other_ratio():
    masks = generate_masks(300, 4096, MaskSpec(0.3, 8), np.random.default_rng(1))
    assert abs(masks.mean() - 0.3) < 0.02
    unmasked = [n for m in masks for v, n in runs(m) if not v]
    assert abs(np.mean(unmasked) - 8 * 0.7 / 0.3) < 1.5


def test_mask_of_length_one():
    m = generate_mask(1, MaskSpec(), np.random.default_rng(0))
    assert m.shape == (1,) and m.dtype == bool


def test_first_state_masked_with_probability_ratio():
    rng = np.random.default_rng(2)
    first = [generate_mask(50, MaskSpec(0.3, 24), rng)[0] for _ in range(4000)]
    assert abs(np.mean(first) - 0.3) < 0.03


def windows(n=4, w=16, seed=0):
    return np.random.default_rng(seed).normal(size=(n, w, 5))


def test_apply_mask_all_false_and_all_true():
    x = windows()
    none = apply_mask(x, np.zeros(x.shape[:2], bool))
    np.testing.assert_array_equal(none.corrupted, x)
    full = apply_mask(x, np.ones(x.shape[:2], bool))
    assert np.all(full.corrupted[..., 0] == 0)
    np.testing.assert_array_equal(full.corrupted[..., 1:], x[..., 1:])
    np.testing.assert_array_equal(full.target[..., 0], x[..., 0])


def test_apply_mask_elementwise():
    x = windows() + 5.0  # no natural zeros in the load channel
    mask = np.random.default_rng(3).random(x.shape[:2]) < 0.5
    batch = apply_mask(x, mask)
    for b in range(x.shape[0]):
        for t in range(x.shape[1]):
            assert (batch.corrupted[b, t, 0] == 0) == mask[b, t]
            if not mask[b, t]:
                assert batch.corrupted[b, t, 0] == x[b, t, 0]
    np.testing.assert_array_equal(batch.corrupted[..., 1:], x[..., 1:])
    assert batch.corrupted is not x and x[..., 0].min() > 0  # input untouched


def test_apply_mask_errors():
    x = windows()
    with pytest.raises(ConfigError):
        apply_mask(x, np.zeros((4, 15), bool))
    with pytest.raises(ConfigError):
        apply_mask(x, np.zeros((4, 16), bool), load_channel=5)


def test_masked_mae_values():
    t = np.ones((1, 4, 1))
    assert masked_mae(Tensor(t.copy()), t, np.ones((1, 4), bool)).item() == 0.0
    pred = t.copy()
    pred[0, 2, 0] += 0.7
    mask = np.zeros((1, 4), bool)
    mask[0, 2] = True
    assert masked_mae(Tensor(pred), t, mask).item() == pytest.approx(0.7, abs=1e-12)
    with pytest.raises(EmptyMaskError):
        masked_mae(Tensor(pred), t, np.zeros((1, 4), bool))


def test_masked_mae_gradient_zero_off_mask():
    rng = np.random.default_rng(4)
    pred = rng.normal(size=(3, 20, 1))
    target = rng.normal(size=(3, 20, 1))
    mask = rng.random((3, 20)) < 0.5
    pt = Tensor(pred, requires_grad=True)
    g = backward(masked_mae(pt, target, mask))[pt][..., 0]
    assert np.all(g[~mask] == 0.0)
    np.testing.assert_allclose(np.abs(g[mask]), 1.0 / mask.sum())
    num = numeric_grad(lambda: masked_mae(Tensor(pred), target, mask).item(), pred)[..., 0]
    assert np.all(num[~mask] == 0.0)


def test_masked_mae_ignores_target_off_mask():
    rng = np.random.default_rng(5)
    pred, target = rng.normal(size=(2, 10, 1)), rng.normal(size=(2, 10, 1))
    mask = rng.random((2, 10)) < 0.5
    other = target.copy()
    other[~mask] += 100.0
    assert masked_mae(Tensor(pred), target, mask).item() == masked_mae(Tensor(pred), other, mask).item()


def tiny_model(in_channels=5, seed=0):
    return TransAppModel(TransAppConfig(in_channels=in_channels, d_model=8, n_heads=2, n_layers=1), seed=seed)


def synthetic_windows(seed, n_households=8, w=48):
    ds = synthesize(SyntheticConfig(n_households=n_households, length=w * 4, seed=seed))
    spec = WindowSpec(w).fitted(ds.series)
    return UnlabeledWindows(np.concatenate([slice_series(s, w, spec).data for s in ds.series]))


def test_pretrain_smoke_one_epoch(tmp_path):
    data = synthetic_windows(0, n_households=8, w=32)
    assert len(data) == 32
    model, trace = pretrain(tiny_model(), data, MaskSpec(), PretrainConfig(epochs=1))
    assert len(trace) == 1 and np.isfinite(trace[0])
    write_trace(trace, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "epoch,train_mae"


def test_pretrain_is_label_blind():
    labeled = LabeledWindows(np.zeros((2, 8, 5), np.float32), np.array([0, 1]), np.array(["a", "b"], object))
    with pytest.raises(TypeError):
        pretrain(tiny_model(), labeled, MaskSpec())
    assert [f.name for f in dataclasses.fields(UnlabeledWindows)] == ["data"]


def test_pretrain_constant_zero_signal_converges():
    data = UnlabeledWindows(np.zeros((32, 32, 1), np.float32))
    _, trace = pretrain(tiny_model(in_channels=1), data, MaskSpec(0.5, 4),
                        PretrainConfig(lr=1e-2, batch_size=8, epochs=50))
    assert trace[-1] < 1e-3


def test_pretrain_loss_decreases_over_epochs():
    first, last = [], []
    for seed in (0, 1, 2):
        _, trace = pretrain(tiny_model(seed=seed), synthetic_windows(seed), MaskSpec(0.5, 6),
                            PretrainConfig(lr=1e-3, batch_size=8, epochs=20, seed=seed))
        first.append(trace[0])
        last.append(trace[-1])
    assert np.mean(last) < np.mean(first)


def test_pretrain_is_deterministic():
    traces = [pretrain(tiny_model(), synthetic_windows(0), MaskSpec(), PretrainConfig(epochs=2))[1] for _ in range(2)]
    assert traces[0] == traces[1]


def test_pretrain_divergence_is_reported():
    data = synthetic_windows(0)
    data.data[0, 0, 0] = np.nan
    with pytest.raises(DivergenceError):
        pretrain(tiny_model(), data, MaskSpec(0.9, 100), PretrainConfig(epochs=1, batch_size=64))
