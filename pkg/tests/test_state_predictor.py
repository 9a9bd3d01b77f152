"""Tests for the logistic shortage/surplus predictor."""

import numpy as np
import pytest

from powerarb.config import PredictorConfig
from powerarb.errors import DegenerateLabels, DimensionMismatch, NonFiniteFeature
from powerarb.state_predictor import (
    StatePredictor,
    fit_logistic_arrays,
    fit_state_predictor,
    labelled_rows,
    logistic_loss_and_gradient,
    predict_state_prob,
    predictor_accuracy,
    sigmoid,
)


def hand_predictor(weight: float = 1.0, bias: float = 0.0) -> StatePredictor:
    return StatePredictor(
        weights=np.array([weight]), bias=bias, feature_names=["x"], means=np.zeros(1), stds=np.ones(1)
    )


class TestPrediction:
    """Probabilities from a fixed predictor."""

    def test_zero_weights_give_one_half(self):
        predictor = hand_predictor(weight=0.0)

        assert predict_state_prob(predictor, [123.0]) == 0.5
        assert sigmoid(0.0) == 0.5

    def test_hand_predictor(self):
        assert predict_state_prob(hand_predictor(), [np.log(3.0)]) == pytest.approx(0.75, abs=1e-12)

    def test_saturated_bias(self):
        assert predict_state_prob(hand_predictor(weight=0.0, bias=50.0), [0.0]) > 1 - 1e-9

    def test_sigmoid_is_stable_for_large_inputs(self):
        values = sigmoid(np.array([-1000.0, 1000.0]))

        assert np.all(np.isfinite(values))
        assert values[0] == 0.0 and values[1] == 1.0

    def test_wrong_feature_count(self):
        with pytest.raises(DimensionMismatch):
            predict_state_prob(hand_predictor(), [1.0, 2.0])


class TestFitLogistic:
    """Batch gradient descent on raw arrays."""

    def test_separable_blobs(self):
        rng = np.random.default_rng(0)

        def blobs(n):
            x = np.vstack([rng.normal(-3.0, 1.0, (n, 2)), rng.normal(3.0, 1.0, (n, 2))])
            return x, np.r_[np.zeros(n), np.ones(n)]

        x, y = blobs(500)
        predictor = fit_logistic_arrays(x, y, ["a", "b"], PredictorConfig(iterations=2000))

        held_x, held_y = blobs(500)
        calls = np.array([predict_state_prob(predictor, row) >= 0.5 for row in held_x])
        assert np.mean(calls == (held_y > 0.5)) >= 0.99

    def test_one_dimensional_separator(self):
        predictor = fit_logistic_arrays(
            np.array([[-1.0], [1.0]]), np.array([0.0, 1.0]), ["x"], PredictorConfig(iterations=500, l2=0.0)
        )

        assert predictor.weights[0] > 0
        assert predict_state_prob(predictor, [-1.0]) < 0.5 < predict_state_prob(predictor, [1.0])

    def test_loss_decreases(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(200, 3))
        y = (x[:, 0] + 0.5 * rng.normal(size=200) > 0).astype(float)

        predictor = fit_logistic_arrays(x, y, ["a", "b", "c"], PredictorConfig(iterations=100))

        assert predictor.training_losses[-1] < predictor.training_losses[0]
        assert predictor.training_losses[0] == pytest.approx(np.log(2.0))

    @pytest.mark.parametrize("seed", range(100))
    def test_gradient_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(30, 4))
        y = (rng.random(30) > 0.5).astype(float)
        weights = rng.normal(size=4)
        bias = float(rng.normal())
        l2 = 0.01

        _, grad_w, grad_b = logistic_loss_and_gradient(weights, bias, x, y, l2)

        h = 1e-6
        numeric_w = np.empty(4)
        for i in range(4):
            step = np.zeros(4)
            step[i] = h
            plus = logistic_loss_and_gradient(weights + step, bias, x, y, l2)[0]
            minus = logistic_loss_and_gradient(weights - step, bias, x, y, l2)[0]
            numeric_w[i] = (plus - minus) / (2 * h)
        plus = logistic_loss_and_gradient(weights, bias + h, x, y, l2)[0]
        minus = logistic_loss_and_gradient(weights, bias - h, x, y, l2)[0]

        np.testing.assert_allclose(grad_w, numeric_w, rtol=1e-4, atol=1e-7)
        assert grad_b == pytest.approx((plus - minus) / (2 * h), rel=1e-4, abs=1e-7)

    def test_single_class_labels(self):
        with pytest.raises(DegenerateLabels):
            fit_logistic_arrays(np.ones((4, 1)), np.ones(4), ["x"])

    def test_non_finite_feature(self):
        x = np.ones((4, 2))
        x[2, 1] = np.inf

        with pytest.raises(NonFiniteFeature) as exc_info:
            fit_logistic_arrays(x, np.array([0.0, 1.0, 0.0, 1.0]), ["a", "b"])

        assert exc_info.value.key == "b"

    def test_key_value_round_trip(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(50, 2))
        predictor = fit_logistic_arrays(x, (x[:, 1] > 0).astype(float), ["a", "b"], PredictorConfig(iterations=50))

        restored = StatePredictor.from_key_value_text(predictor.to_key_value_text())

        assert restored == predictor


class TestFitStatePredictor:
    """Fitting on market tables."""

    def test_balanced_rows_excluded(self, feature_table):
        _, y = labelled_rows(feature_table, ["da_price"])
        codes = feature_table.column("regulation_code")

        assert len(y) == np.count_nonzero(codes)
        assert set(np.unique(y)) <= {0.0, 1.0}

    def test_out_of_sample_accuracy_on_synthetic_market(self, feature_table, small_config, train_period, test_period):
        predictor = fit_state_predictor(
            feature_table.slice_period(*train_period), small_config.predictor.features, small_config.predictor
        )

        accuracy = predictor_accuracy(predictor, feature_table.slice_period(*test_period))

        assert accuracy >= 0.55
