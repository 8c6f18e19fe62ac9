import numpy as np
import pytest
from sklearn.metrics import balanced_accuracy_score, roc_auc_score

from mixalign.metrics import balanced_accuracy, confusion_rates, evaluate_scores, roc_auc, roc_auc_pairs


def test_results_table_rows_round_as_reported():
    assert round(balanced_accuracy(0.8873, 0.8651), 4) == 0.8762
    assert round(balanced_accuracy(0.9014, 0.6851), 4) == 0.7933


def test_four_point_auc():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_ties_count_half():
    assert roc_auc([0.5, 0.5], [0, 1]) == 0.5
    assert roc_auc_pairs([0.5, 0.5], [0, 1]) == 0.5


def test_rank_auc_equals_pair_count_exactly():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 6, n) / 5.0 if rng.random() < 0.5 else rng.random(n)
        assert roc_auc(s, y) == roc_auc_pairs(s, y)


def test_confusion_rates_and_threshold_inclusive():
    sens, spec = confusion_rates([0.5, 0.2, 0.9, 0.6], [1, 0, 0, 0])
    assert sens == 1.0 and spec == pytest.approx(1 / 3)


def test_agrees_with_sklearn():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 300)
    s = np.clip(rng.normal(0.4 + 0.2 * y, 0.2), 0, 1)
    report = evaluate_scores(s, y)
    assert report.balanced_accuracy == pytest.approx(balanced_accuracy_score(y, s >= 0.5), abs=1e-12)
    assert report.roc_auc == pytest.approx(roc_auc_score(y, s), abs=1e-12)
    assert report.n_pos + report.n_neg == 300


def test_degenerate_inputs_rejected():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        confusion_rates([0.1], [2])
    with pytest.raises(ValueError):
        balanced_accuracy(1.2, 0.5)
