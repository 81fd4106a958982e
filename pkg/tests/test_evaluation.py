import numpy as np
import pytest
from sklearn import metrics

from vitlab.common import MetricError, PatchSpec, ShapeError, ViTConfig
from vitlab.evaluation import (
    MetricsReport,
    PredictionSet,
    accuracy,
    aggregate_runs,
    auc_one_vs_rest,
    balanced_accuracy,
    confusion_matrix,
    ensemble_average,
    per_class_auc,
    predict,
)
from vitlab.model import VisionTransformer


def _binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    return PredictionSet(np.stack([1 - scores, scores], axis=1), labels)


def _onehot(predicted, K):
    return np.eye(K)[np.asarray(predicted)]


def _pair_count_auc(labels, scores):
    pos, neg = scores[labels], scores[~labels]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def _report(value):
    return MetricsReport(value, value, value, np.eye(2, dtype=np.int64))


def test_confusion_matrix_counts():
    labels = np.array([0] * 10 + [1] * 10)
    predicted = np.array([0] * 8 + [1] * 2 + [1] * 7 + [0] * 3)
    cm = confusion_matrix(PredictionSet(_onehot(predicted, 2), labels))
    np.testing.assert_array_equal(cm, [[8, 2], [3, 7]])
    assert balanced_accuracy(cm) == pytest.approx(0.75)


def test_perfect_predictions():
    labels = np.array([0, 1, 2, 2, 1, 2])
    preds = PredictionSet(_onehot(labels, 3), labels)
    cm = confusion_matrix(preds)
    np.testing.assert_array_equal(cm, np.diag([1, 2, 3]))
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(labels))
    assert accuracy(preds) == 1.0
    assert balanced_accuracy(cm) == 1.0
    assert auc_one_vs_rest(preds) == 1.0


def test_balanced_accuracy_equals_accuracy_on_equal_support():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(4), 25)
    preds = PredictionSet(_onehot(rng.integers(0, 4, size=100), 4), labels)
    assert balanced_accuracy(confusion_matrix(preds)) == pytest.approx(accuracy(preds))


def test_confusion_matrix_includes_absent_predictions():
    preds = PredictionSet(_onehot([0, 0, 0], 3), [0, 1, 2])
    assert confusion_matrix(preds).shape == (3, 3)


def test_balanced_accuracy_needs_every_class():
    with pytest.raises(MetricError, match="Class 1 has no samples"):
        balanced_accuracy(np.array([[3, 1], [0, 0]]))


def test_binary_auc_example():
    preds = _binary([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert auc_one_vs_rest(preds) == pytest.approx(0.75)
    reversed_preds = _binary([0.9, 0.6, 0.65, 0.2], [0, 0, 1, 1])
    assert auc_one_vs_rest(reversed_preds) == pytest.approx(0.25)


def test_auc_gives_half_credit_to_ties():
    assert auc_one_vs_rest(_binary([0.5, 0.5], [0, 1])) == pytest.approx(0.5)


def test_auc_needs_two_classes():
    with pytest.raises(MetricError):
        auc_one_vs_rest(_binary([0.2, 0.7], [1, 1]))


def test_multiclass_auc_needs_every_class():
    preds = PredictionSet(np.full((4, 3), 1 / 3), [0, 1, 0, 1])
    with pytest.raises(MetricError, match="Class 2 never occurs"):
        auc_one_vs_rest(preds)


def test_auc_rejects_unknown_average():
    with pytest.raises(MetricError):
        auc_one_vs_rest(_binary([0.2, 0.7], [0, 1]), average="micro")


def test_binary_auc_matches_pair_counting():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        labels = rng.permutation(np.concatenate([[0, 1], rng.integers(0, 2, size=n - 2)]))
        scores = np.round(rng.random(n), 1)
        expected = _pair_count_auc(labels == 1, scores)
        assert abs(auc_one_vs_rest(_binary(scores, labels)) - expected) < 1e-12


def test_multiclass_auc_and_balanced_accuracy_match_oracles():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        K = int(rng.integers(3, 6))
        n = int(rng.integers(K, 40))
        labels = rng.permutation(np.concatenate([np.arange(K), rng.integers(0, K, size=n - K)]))
        weights = rng.integers(1, 5, size=(n, K)).astype(np.float64)
        preds = PredictionSet(weights / weights.sum(axis=1, keepdims=True), labels)

        per_class = [_pair_count_auc(labels == c, preds.probabilities[:, c]) for c in range(K)]
        support = np.bincount(labels, minlength=K)
        assert abs(auc_one_vs_rest(preds) - np.mean(per_class)) < 1e-12
        assert abs(
            auc_one_vs_rest(preds, average="weighted") - np.dot(per_class, support) / n
        ) < 1e-12
        np.testing.assert_allclose(per_class_auc(preds), per_class, atol=1e-12)

        recalls = [(preds.predictions[labels == c] == c).mean() for c in range(K)]
        cm = confusion_matrix(preds)
        assert abs(balanced_accuracy(cm) - np.mean(recalls)) < 1e-12
        assert balanced_accuracy(cm) == pytest.approx(
            metrics.balanced_accuracy_score(labels, preds.predictions)
        )


def test_prediction_set_validation():
    with pytest.raises(MetricError):
        PredictionSet(np.array([[0.5, 0.6]]), [0])
    with pytest.raises(MetricError):
        PredictionSet(np.array([[0.5, 0.5]]), [2])
    with pytest.raises(ShapeError):
        PredictionSet(np.array([[0.5, 0.5]]), [0, 1])


def test_predictions_break_ties_toward_lower_class():
    preds = PredictionSet(np.array([[0.5, 0.5], [0.25, 0.75]]), [0, 1])
    np.testing.assert_array_equal(preds.predictions, [0, 1])


def test_aggregate_runs():
    summary = aggregate_runs([_report(1.0), _report(2.0), _report(3.0)])
    assert summary["acc"].mean == pytest.approx(2.0)
    assert summary["acc"].std == pytest.approx(1.0)
    assert set(summary) == {"acc", "bal_acc", "auc"}


def test_aggregate_identical_and_single_runs():
    assert aggregate_runs([_report(0.7)] * 3)["auc"].std == 0.0
    single = aggregate_runs([_report(0.8)])["bal_acc"]
    assert (single.mean, single.std) == (0.8, 0.0)
    with pytest.raises(MetricError):
        aggregate_runs([])


def test_aggregate_keeps_identical_runs_exact():
    runs = [MetricsReport(0.7, 0.1, 0.3, np.eye(2, dtype=np.int64)) for _ in range(3)]
    summary = aggregate_runs(runs)
    assert {name: (s.mean, s.std) for name, s in summary.items()} == {
        "acc": (0.7, 0.0),
        "bal_acc": (0.1, 0.0),
        "auc": (0.3, 0.0),
    }


def test_report_round_trip():
    preds = _binary([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    report = MetricsReport.from_predictions(preds)
    assert report.acc == pytest.approx(0.75)
    assert report.auc == pytest.approx(0.75)
    restored = MetricsReport.from_dict(report.to_dict())
    assert restored.bal_acc == report.bal_acc
    np.testing.assert_array_equal(restored.confusion, report.confusion)


def test_ensemble_average_example():
    labels = [0]
    members = [
        PredictionSet(np.array([[0.9, 0.1]]), labels),
        PredictionSet(np.array([[0.6, 0.4]]), labels),
        PredictionSet(np.array([[0.3, 0.7]]), labels),
    ]
    fused = ensemble_average(members, patch_size="1+2+4")
    np.testing.assert_allclose(fused.probabilities, [[0.6, 0.4]])
    assert fused.tag == {"patch_size": "1+2+4"}


def test_ensemble_of_identical_members_is_identity():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(4), size=50)
    member = PredictionSet(probs, rng.integers(0, 4, size=50))
    fused = ensemble_average([member] * 3)
    np.testing.assert_allclose(fused.probabilities, probs, atol=1e-15)
    np.testing.assert_array_equal(fused.predictions, member.predictions)
    np.testing.assert_allclose(fused.probabilities.sum(axis=1), 1.0, atol=1e-12)


def test_ensemble_members_must_agree():
    a = PredictionSet(np.array([[0.5, 0.5]]), [0])
    with pytest.raises(ShapeError):
        ensemble_average([a, PredictionSet(np.array([[0.5, 0.5], [0.5, 0.5]]), [0, 1])])
    with pytest.raises(MetricError):
        ensemble_average([a, PredictionSet(np.array([[0.5, 0.5]]), [1])])
    with pytest.raises(MetricError):
        ensemble_average([])


def test_ensemble_members_must_list_samples_in_the_same_order():
    probs = np.array([[0.9, 0.1], [0.2, 0.8]])
    a = PredictionSet(probs, [0, 0], indices=[0, 1])
    b = PredictionSet(probs[::-1], [0, 0], indices=[1, 0])
    with pytest.raises(MetricError, match="sample order"):
        ensemble_average([a, b])
    fused = ensemble_average([a, PredictionSet(probs, [0, 0], indices=[0, 1])])
    np.testing.assert_array_equal(fused.indices, [0, 1])


def test_prediction_set_indices():
    np.testing.assert_array_equal(PredictionSet(np.eye(3), [0, 1, 2]).indices, [0, 1, 2])
    with pytest.raises(ShapeError):
        PredictionSet(np.eye(2), [0, 1], indices=[0])
    with pytest.raises(MetricError, match="unique"):
        PredictionSet(np.eye(2), [0, 1], indices=[3, 3])


def test_predict_wraps_model_probabilities():
    config = ViTConfig(L=1, d=8, h=2, num_classes=3, patch=PatchSpec(p=14))
    model = VisionTransformer(config, seed=0)
    images = np.random.default_rng(0).random((5, 28, 28, 3)).astype(np.float32)
    preds = predict(model, images, np.array([0, 1, 2, 0, 1]), batch_size=2, patch_size=14)
    assert preds.probabilities.shape == (5, 3)
    assert preds.tag == {"patch_size": 14}


def test_predict_carries_sample_indices():
    config = ViTConfig(L=1, d=8, h=2, num_classes=2, patch=PatchSpec(p=14))
    model = VisionTransformer(config, seed=0)
    images = np.zeros((3, 28, 28, 3), dtype=np.float32)
    preds = predict(model, images, np.array([0, 1, 0]), indices=np.array([4, 9, 2]))
    np.testing.assert_array_equal(preds.indices, [4, 9, 2])
    assert preds.tag == {}
