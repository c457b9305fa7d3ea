"""Tests for the twin model kernels."""

import numpy as np
import pytest

from src.core.errors import InvalidInput
from src.data.twin_model import (
    Gradient,
    ModelArch,
    SampleBatch,
    TrafficSample,
    TwinModel,
    clip,
    gradient,
    init_model,
    loss,
    parameter_count,
    predict,
    predict_batch,
    sgd_step,
)

from .conftest import random_batch


def finite_difference(model: TwinModel, batch: SampleBatch, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros(model.dimension)
    for i in range(model.dimension):
        up = model.params.copy()
        down = model.params.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (loss(model.with_params(up), batch) - loss(model.with_params(down), batch)) / (2 * step)
    return grad


class TestTwinModel:
    """Test the parameter container."""

    def test_parameter_counts(self):
        """Test dimensions implied by each architecture."""
        assert parameter_count(ModelArch.LINEAR, 6) == 7
        assert parameter_count(ModelArch.LINEAR, 6, bias=False) == 6
        assert parameter_count(ModelArch.MLP, 6, hidden=4) == 4 * 6 + 4 + 4 + 1

    def test_wrong_length_rejected(self):
        """Test a parameter vector that does not fit the architecture."""
        with pytest.raises(InvalidInput, match="needs 3 parameters"):
            TwinModel(np.zeros(2), ModelArch.LINEAR, input_dim=2)

    def test_non_finite_rejected(self):
        """Test NaN parameters are refused."""
        with pytest.raises(InvalidInput, match="finite"):
            TwinModel(np.array([np.nan, 0.0]), ModelArch.LINEAR, input_dim=1)

    def test_with_params_bumps_version(self):
        """Test every new parameter vector increments the version."""
        model = TwinModel(np.zeros(2), input_dim=1)
        assert model.with_params(np.ones(2)).version == model.version + 1

    def test_sample_rejects_negative_time(self):
        """Test TrafficSample validation."""
        with pytest.raises(InvalidInput, match="time_index"):
            TrafficSample([1.0], 1.0, time_index=-1)


class TestPredict:
    """Test predictions."""

    def test_zero_linear_model(self):
        """Test zero weights predict zero."""
        model = TwinModel(np.zeros(4), input_dim=3)
        assert predict(model, [5.0, -2.0, 7.0]) == 0.0

    def test_bias_free_dot_product(self):
        """Test a bias-free linear model is a dot product."""
        model = TwinModel(np.array([1.0, 1.0]), input_dim=2, bias=False)
        assert predict(model, [2.0, 3.0]) == 5.0

    def test_dimension_mismatch(self):
        """Test window length must equal the model input."""
        model = TwinModel(np.zeros(3), input_dim=2)
        with pytest.raises(InvalidInput, match="Expected 2 features"):
            predict(model, [1.0, 2.0, 3.0])

    def test_mlp_matches_hand_forward_pass(self):
        """Test the MLP against an explicit two-layer computation."""
        model = init_model(ModelArch.MLP, 6, np.random.default_rng(0), hidden=4)
        x = np.array([1.0, 0, 0, 0, 0, 0])
        p = model.params
        w1 = p[:24].reshape(4, 6)
        b1 = p[24:28]
        w2 = p[28:32]
        b2 = p[32]
        expected = float(np.tanh(w1 @ x + b1) @ w2 + b2)
        assert predict(model, x) == pytest.approx(expected, abs=1e-12)

    def test_predict_is_pure(self):
        """Test repeated calls return bit-identical values."""
        model = init_model(ModelArch.MLP, 3, np.random.default_rng(5), hidden=2)
        x = np.array([0.3, -0.1, 0.8])
        before = model.params.copy()
        assert predict(model, x) == predict(model, x)
        np.testing.assert_array_equal(model.params, before)


class TestLoss:
    """Test the mean squared error."""

    def test_perfect_predictor(self):
        """Test zero loss on exactly predicted labels."""
        model = TwinModel(np.array([2.0, 1.0]), input_dim=1)
        batch = SampleBatch(np.array([[0.0], [1.0], [2.0]]), np.array([1.0, 3.0, 5.0]))
        assert loss(model, batch) == 0.0

    def test_zero_model_single_sample(self):
        """Test (0 - 2)^2."""
        model = TwinModel(np.zeros(2), input_dim=1)
        assert loss(model, [TrafficSample([1.0], 2.0)]) == 4.0

    def test_two_residuals(self):
        """Test residuals 1 and 3 average to 5."""
        model = TwinModel(np.zeros(2), input_dim=1)
        assert loss(model, [TrafficSample([0.0], 1.0), TrafficSample([0.0], 3.0)]) == 5.0

    def test_empty_batch(self):
        """Test an empty batch is invalid."""
        model = TwinModel(np.zeros(2), input_dim=1)
        with pytest.raises(InvalidInput):
            loss(model, [])


class TestGradient:
    """Test analytic gradients against finite differences."""

    def test_single_weight(self):
        """Test d/dw (w - 1)^2 at w = 0."""
        model = TwinModel(np.zeros(1), input_dim=1, bias=False)
        g = gradient(model, [TrafficSample([1.0], 1.0)])
        np.testing.assert_allclose(g.values, [-2.0])

    def test_zero_at_minimum(self):
        """Test the gradient vanishes on consistent data at the solution."""
        model = TwinModel(np.array([2.0, 1.0]), input_dim=1)
        batch = SampleBatch(np.array([[0.0], [1.0], [2.0]]), np.array([1.0, 3.0, 5.0]))
        np.testing.assert_allclose(gradient(model, batch).values, 0.0, atol=1e-15)

    def test_linear_matches_finite_differences(self, rng):
        """Test linear gradients on 100 random probes."""
        for _ in range(100):
            batch = random_batch(rng)
            model = TwinModel(rng.normal(size=4), input_dim=3)
            analytic = gradient(model, batch).values
            numeric = finite_difference(model, batch)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)

    def test_mlp_matches_finite_differences(self, rng):
        """Test MLP gradients on 100 random probes within 1e-4 relative."""
        for _ in range(100):
            batch = random_batch(rng)
            model = init_model(ModelArch.MLP, 3, rng, hidden=4)
            analytic = gradient(model, batch).values
            numeric = finite_difference(model, batch)
            scale = max(np.linalg.norm(numeric), 1e-8)
            assert np.linalg.norm(analytic - numeric) / scale < 1e-4


class TestClipAndStep:
    """Test clipping and the SGD update."""

    def test_clip_under_threshold(self):
        """Test a short gradient is unchanged."""
        np.testing.assert_array_equal(clip(Gradient([3.0, 4.0]), 10.0).values, [3.0, 4.0])

    def test_clip_at_threshold(self):
        """Test a gradient of norm exactly the threshold is unchanged."""
        np.testing.assert_array_equal(clip(Gradient([3.0, 4.0]), 5.0).values, [3.0, 4.0])

    def test_clip_scales_down(self):
        """Test scaling to the threshold norm."""
        np.testing.assert_allclose(clip(Gradient([3.0, 4.0]), 1.0).values, [0.6, 0.8])

    def test_clip_idempotent(self, rng):
        """Test clip(clip(g)) == clip(g)."""
        g = Gradient(rng.normal(size=5) * 10)
        once = clip(g, 2.0)
        np.testing.assert_allclose(clip(once, 2.0).values, once.values)

    def test_clip_threshold_positive(self):
        """Test a non-positive threshold is invalid."""
        with pytest.raises(InvalidInput, match="positive"):
            clip(Gradient([1.0]), 0.0)

    def test_step_examples(self):
        """Test hand-computed SGD steps."""
        model = TwinModel(np.array([1.0, 1.0]), input_dim=1)
        np.testing.assert_array_equal(sgd_step(model, Gradient([2.0, 2.0]), 0.5).params, [0.0, 0.0])
        single = TwinModel(np.array([1.0]), input_dim=1, bias=False)
        np.testing.assert_array_equal(sgd_step(single, Gradient([-4.0]), 0.25).params, [2.0])

    def test_zero_learning_rate(self):
        """Test eta = 0 keeps the parameters."""
        model = TwinModel(np.array([0.5, -0.5]), input_dim=1)
        stepped = sgd_step(model, Gradient([9.0, 9.0]), 0.0)
        np.testing.assert_array_equal(stepped.params, model.params)
        assert stepped.version == model.version + 1

    def test_length_mismatch(self):
        """Test gradient and model dimensions must agree."""
        model = TwinModel(np.zeros(2), input_dim=1)
        with pytest.raises(InvalidInput, match="does not match"):
            sgd_step(model, Gradient([1.0]), 0.1)

    def test_small_step_never_increases_loss(self, rng):
        """Test descent for the linear model with a conservative learning rate."""
        for _ in range(20):
            batch = random_batch(rng, size=16)
            model = TwinModel(rng.normal(size=4), input_dim=3)
            x = np.hstack([batch.features, np.ones((len(batch), 1))])
            bound = 2.0 * np.linalg.eigvalsh(x.T @ x / len(batch)).max()
            stepped = sgd_step(model, gradient(model, batch), 1.0 / (10 * bound))
            assert loss(stepped, batch) <= loss(model, batch)

    def test_predict_batch_matches_predict(self, rng):
        """Test vectorised and single predictions agree."""
        model = init_model(ModelArch.MLP, 3, rng, hidden=3)
        x = rng.normal(size=(5, 3))
        expected = [predict(model, row) for row in x]
        np.testing.assert_allclose(predict_batch(model, x), expected)


class TestLinearGradientClosedForm:
    """Test the linear gradient against the normal-equation form."""

    def test_matches_closed_form(self, rng):
        """Test 2/m X^T (Xw - y) on 100 random probes within 1e-10."""
        for _ in range(100):
            batch = random_batch(rng)
            w = rng.normal(size=4)
            x = np.hstack([batch.features, np.ones((len(batch), 1))])
            expected = 2.0 / len(batch) * x.T @ (x @ w - batch.labels)
            analytic = gradient(TwinModel(w, input_dim=3), batch).values
            np.testing.assert_allclose(analytic, expected, rtol=1e-10, atol=1e-12)
