import numpy as np
import pytest

from transapp.errors import MetricError
from transapp.metrics import REPORT_FIELDS, confusion, f1, macro_f1, precision, recall, report_row, write_report

from oracles import f1_for_class, macro_f1_oracle


def test_hand_computed_example():
    cm = confusion([1, 1, 0, 0], [1, 0, 0, 0])
    assert (cm.tp, cm.fn, cm.tn, cm.fp) == (1, 1, 2, 0)
    # class 1: P=1, R=1/2 -> 2/3; class 0: P=2/3, R=1 -> 4/5
    assert f1(cm) == pytest.approx(2 / 3, abs=1e-15)
    assert f1(cm.flipped()) == pytest.approx(0.8, abs=1e-15)
    assert abs(macro_f1([1, 1, 0, 0], [1, 0, 0, 0]) - 11 / 15) <= 1e-12


def test_perfect_prediction():
    y = [0, 1, 1, 0, 1]
    cm = confusion(y, y)
    assert cm.fp == cm.fn == 0
    assert macro_f1(y, y) == 1.0


def test_single_class_prediction_on_balanced_set():
    y = [1, 1, 1, 0, 0, 0]
    # all-ones: class-1 P=1/2, R=1 -> F1 = 2/3; class 0 never predicted -> 0
    assert macro_f1(y, [1] * 6) == pytest.approx((2 / 3) / 2, abs=1e-15)
    assert macro_f1(y, [0] * 6) == pytest.approx((2 / 3) / 2, abs=1e-15)


def test_zero_division_convention():
    cm = confusion([0, 0], [0, 0])
    assert precision(cm) == 0.0 and recall(cm) == 0.0 and f1(cm) == 0.0
    assert macro_f1([0, 0], [0, 0]) == 0.5


def test_agreement_with_per_class_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        t, p = rng.integers(0, 2, n), rng.integers(0, 2, n)
        assert abs(macro_f1(t, p) - macro_f1_oracle(t.tolist(), p.tolist())) <= 1e-12
        cm = confusion(t, p)
        assert cm.n == n
        assert abs(f1(cm) - f1_for_class(t.tolist(), p.tolist(), 1)) <= 1e-12


def test_errors():
    with pytest.raises(MetricError):
        macro_f1([1, 0], [1])
    with pytest.raises(MetricError):
        macro_f1([], [])
    with pytest.raises(MetricError):
        macro_f1([2, 0], [1, 0])


def test_report_row_and_csv(tmp_path):
    row = report_row([1, 1, 0, 0], [1, 0, 0, 0], "kettle", "test", alpha=0.35)
    assert row["macro_f1"] == pytest.approx(11 / 15) and row["n"] == 4 and row["alpha"] == 0.35
    write_report([row], tmp_path / "m.csv")
    header = (tmp_path / "m.csv").read_text().splitlines()[0].split(",")
    assert header == list(REPORT_FIELDS)
    assert header[:8] == ["appliance", "split", "macro_f1", "f1_pos", "f1_neg", "precision_pos", "recall_pos", "n"]
