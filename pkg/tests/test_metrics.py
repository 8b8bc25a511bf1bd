import math

import numpy as np
import pytest
from scipy import stats

import oracles
from dplab.metrics import (
    MetricsError,
    accuracy_loss,
    attribute_advantage,
    mean_se,
    membership_advantage,
    overlap_analysis,
    ppv,
)


def test_worked_leakage_example():
    truth = [True] * 100 + [False] * 100
    dec = [True] * 100 + [True] * 30 + [False] * 70
    rep = membership_advantage(dec, truth, epsilon=1.0)
    assert (rep.tp, rep.fp, rep.tn, rep.fn) == (100, 30, 70, 0)
    assert rep.tpr == 1.0 and rep.fpr == 0.3
    assert rep.advantage == pytest.approx(0.7, abs=1e-15)
    assert rep.bound == pytest.approx(math.e - 1)
    assert rep.bound_clamped == 1.0


def test_advantage_extremes():
    truth = np.array([True, False, True, False])
    assert membership_advantage(truth, truth).advantage == 1.0
    none = membership_advantage(np.zeros(4, bool), truth)
    assert none.advantage == 0.0 and none.ppv is None
    allm = membership_advantage(np.ones(4, bool), truth)
    assert allm.ppv == 0.5
    with pytest.raises(MetricsError):
        membership_advantage([True, False], [True, True])
    with pytest.raises(MetricsError):
        membership_advantage([True], [True, False])


def test_advantage_null_distribution():
    rng = np.random.default_rng(0)
    truth = np.repeat([True, False], 500)
    dec = rng.random(1000) < 0.4
    advs = [membership_advantage(dec, rng.permutation(truth)).advantage for _ in range(1000)]
    assert abs(np.mean(advs)) < 0.02
    assert all(-1 <= a <= 1 for a in advs)


def test_ppv_examples():
    assert ppv(5084, 4112) == pytest.approx(0.5529, abs=1e-4)
    assert ppv(0, 0) is None
    assert ppv(17, 17) == 0.5
    with pytest.raises(MetricsError):
        ppv(-1, 2)


def test_accuracy_loss_examples():
    assert accuracy_loss(0.155, 0.155) == 0.0
    assert accuracy_loss(0.0, 0.4) == 1.0
    assert accuracy_loss(0.14, 0.155) == pytest.approx(0.0968, abs=1e-4)
    assert accuracy_loss(0.5, 0.4) < 0
    with pytest.raises(MetricsError):
        accuracy_loss(0.3, 0.0)


def test_attribute_advantage_examples():
    assert attribute_advantage(0.9, 0.9) == 0.0
    assert attribute_advantage(1.0, 0.5) == 0.5
    assert attribute_advantage(0.2, 0.6) == pytest.approx(-0.4)
    with pytest.raises(MetricsError):
        attribute_advantage(1.2, 0.5)


def test_mean_se_hand_computed():
    m, se = mean_se([0.2, 0.5, 0.8])
    assert m == pytest.approx(0.5)
    assert se == pytest.approx(0.3 / math.sqrt(3), rel=1e-12)
    assert se == pytest.approx(oracles.sample_se([0.2, 0.5, 0.8]), rel=1e-12)
    assert math.isnan(mean_se([1.0])[1])
    assert all(math.isnan(v) for v in mean_se([]))


def test_overlap_identical_runs():
    truth = np.array([True, True, False, False, True])
    run = np.array([True, False, True, False, True])
    rep = overlap_analysis([run, run, run], truth)
    counts = [lv.predicted for lv in rep.levels]
    assert counts == [3, 3, 3]
    assert all(lv.ppv == pytest.approx(2 / 3) for lv in rep.levels)
    assert np.array_equal(rep.pairwise, np.full((3, 3), 3))
    assert np.array_equal(rep.pairwise_true, np.full((3, 3), 2))


def test_overlap_spot_counts():
    # two runs whose intersection has 8,673 records, 4,805 of them members
    n_true, n_false = 4805, 8673 - 4805
    truth = np.concatenate([np.ones(n_true + 1000, bool), np.zeros(n_false + 1000, bool)])
    r1 = np.zeros(truth.size, bool)
    r2 = np.zeros(truth.size, bool)
    r1[:n_true] = r2[:n_true] = True
    r1[n_true + 1000 : n_true + 1000 + n_false] = r2[n_true + 1000 : n_true + 1000 + n_false] = True
    r1[n_true : n_true + 500] = True
    rep = overlap_analysis([r1, r2], truth)
    assert rep.pairwise[0, 1] == 8673 and rep.pairwise_true[0, 1] == 4805
    assert rep.levels[1].predicted == 8673
    assert rep.levels[1].ppv == pytest.approx(0.554, abs=5e-4)


def test_overlap_coin_flip_baseline():
    rng = np.random.default_rng(7)
    n, r = 20000, 5
    truth = rng.random(n) < 0.5
    runs = [rng.random(n) < 0.5 for _ in range(r)]
    rep = overlap_analysis(runs, truth)
    counts = [lv.predicted for lv in rep.levels]
    assert counts == sorted(counts, reverse=True)
    top = rep.levels[-1]
    assert top.random_predicted == pytest.approx(n / 32)
    p = stats.binomtest(top.predicted, n, 1 / 32).pvalue
    assert p > 0.01
    assert top.ppv == pytest.approx(truth.mean(), abs=4 * math.sqrt(0.25 / top.predicted))
    assert top.random_ppv == pytest.approx(truth.mean())


def test_overlap_errors():
    with pytest.raises(MetricsError):
        overlap_analysis([[True, False]], [True, False])
    with pytest.raises(MetricsError):
        overlap_analysis([[True, False], [True]], [True, False])
