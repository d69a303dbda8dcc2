"""
Unit tests for the toy depth-completion network.

Convolutions are checked against a nested-loop reference and every gradient
against central finite differences on a small scene.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from app.services.dc_codec import BinGrid
from app.services.depth_io import decode_tensors, encode_tensors
from app.services.scene_service import (
    PlanarField,
    RectObject,
    build_pattern,
    build_scene_spec,
    generate_dataset,
    make_scene_sample,
)
from app.services.toy_model import (
    ToyModelParams,
    ToyTrainer,
    TrainConfig,
    backward,
    batch_loss_and_gradients,
    build_input,
    conv2d_same,
    conv2d_same_backward,
    forward,
    head_loss,
    init_params,
    loss_and_gradients,
    params_from_tensors,
    params_to_tensors,
    predict_coefficients,
    predict_depth,
    prepare_example,
    stack_examples,
    train,
)
from app.utils import ConfigurationError, FormatError, TrainingDivergedError

MODES = [("sp", "mse"), ("dc", "mse"), ("sp", "ce"), ("dc", "ce")]


# Test fixtures

@pytest.fixture
def small_grid():
    return BinGrid(d_min=0.0, d_max=8.0, n_bins=8)


@pytest.fixture
def small_scene(small_grid):
    """8 x 8 step scene (6 m background, 2 m block) sampled on every second row."""
    spec = build_scene_spec(
        height=8,
        width=8,
        background=PlanarField(base=6.0, slope_x=0.05),
        objects=(RectObject(top=1, left=2, height=4, width=3, surface=PlanarField(base=2.0)),),
        guide_blur=0.5,
    )
    return make_scene_sample(spec, build_pattern(kind="rows", step=2), small_grid)


@pytest.fixture
def scenes(small_grid):
    return generate_dataset(4, 3, small_grid, build_pattern(kind="rows", step=2), 8, 8)


def conv_reference(x, w, b):
    """Nested-loop same-padded 3x3 cross-correlation."""
    height, width, c_in = x.shape
    c_out = w.shape[3]
    out = np.zeros((height, width, c_out))
    for r in range(height):
        for c in range(width):
            for o in range(c_out):
                total = b[o]
                for i in range(3):
                    for j in range(3):
                        rr, cc = r + i - 1, c + j - 1
                        if 0 <= rr < height and 0 <= cc < width:
                            for k in range(c_in):
                                total += x[rr, cc, k] * w[i, j, k, o]
                out[r, c, o] = total
    return out


def example_loss(params, example):
    out, _ = forward(params, example.x)
    return head_loss(params, out, example)[0]


class TestConvolution:
    """Tests for the 3x3 same-padded layer."""

    def test_matches_nested_loops(self, rng):
        x = rng.normal(size=(5, 6, 3))
        w = rng.normal(size=(3, 3, 3, 4))
        b = rng.normal(size=4)
        np.testing.assert_allclose(conv2d_same(x, w, b), conv_reference(x, w, b), atol=1e-12)

    def test_backward_matches_finite_differences(self, rng):
        x = rng.normal(size=(4, 5, 2))
        w = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=3)
        dout = rng.normal(size=(4, 5, 3))
        dw, db, dx = conv2d_same_backward(x, w, dout)

        def f(x_, w_, b_):
            return float(np.sum(conv2d_same(x_, w_, b_) * dout))

        h = 1e-6
        for array, grad, pick in ((x, dx, lambda a: f(a, w, b)), (w, dw, lambda a: f(x, a, b)),
                                  (b, db, lambda a: f(x, w, a))):
            numeric = np.zeros_like(array)
            for i in range(array.size):
                step = np.zeros_like(array)
                step.flat[i] = h
                numeric.flat[i] = (pick(array + step) - pick(array - step)) / (2 * h)
            np.testing.assert_allclose(grad, numeric, atol=1e-6)

    def test_stacked_inputs(self, rng):
        """Test that a stacked batch convolves each image independently and sums gradients."""
        x = rng.normal(size=(3, 5, 6, 2))
        w = rng.normal(size=(3, 3, 2, 4))
        b = rng.normal(size=4)
        dout = rng.normal(size=(3, 5, 6, 4))
        out = conv2d_same(x, w, b)
        dw, db, dx = conv2d_same_backward(x, w, dout)
        single = [conv2d_same_backward(x[k], w, dout[k]) for k in range(3)]
        for k in range(3):
            np.testing.assert_allclose(out[k], conv_reference(x[k], w, b), atol=1e-12)
            np.testing.assert_allclose(dx[k], single[k][2], atol=1e-12)
        np.testing.assert_allclose(dw, sum(s[0] for s in single), atol=1e-12)
        np.testing.assert_allclose(db, sum(s[1] for s in single), atol=1e-12)


class TestForward:
    """Tests for the three-layer forward pass."""

    def test_zero_parameters(self, small_grid, small_scene, rng):
        params = init_params("dc", "ce", small_grid, rng, hidden_channels=4)
        for array in params.arrays():
            array[...] = 0.0
        x = build_input(small_scene.sparse, small_grid, "dc", small_scene.guide)
        out, _ = forward(params, x)
        assert out.shape == (8, 8, 8)
        assert not np.any(out)

    def test_identity_kernel(self, small_grid, small_scene, rng):
        """Test that center taps on channel 0 pass the normalized depth through."""
        params = init_params("sp", "mse", small_grid, rng, hidden_channels=4)
        for array in params.arrays():
            array[...] = 0.0
        for w in params.weights:
            w[1, 1, 0, 0] = 1.0
        x = build_input(small_scene.sparse, small_grid, "sp", small_scene.guide)
        out, _ = forward(params, x)
        np.testing.assert_allclose(out[..., 0], x[..., 0])

    def test_matches_nested_loop_network(self, small_grid, small_scene, rng):
        params = init_params("sp", "ce", small_grid, rng, hidden_channels=4)
        x = build_input(small_scene.sparse, small_grid, "sp", small_scene.guide)
        h = np.maximum(conv_reference(x, params.weights[0], params.biases[0]), 0.0)
        h = np.maximum(conv_reference(h, params.weights[1], params.biases[1]), 0.0)
        expected = conv_reference(h, params.weights[2], params.biases[2])
        np.testing.assert_allclose(forward(params, x)[0], expected, atol=1e-12)

    def test_channel_mismatch(self, small_grid, rng):
        params = init_params("sp", "mse", small_grid, rng)
        with pytest.raises(ConfigurationError):
            forward(params, np.zeros((8, 8, 5)))

    def test_inconsistent_params(self, small_grid, rng):
        params = init_params("sp", "mse", small_grid, rng, hidden_channels=4)
        with pytest.raises(ConfigurationError):
            ToyModelParams(params.weights, params.biases, "dc", "mse", small_grid)

    def test_input_channels(self, small_grid, small_scene):
        assert build_input(small_scene.sparse, small_grid, "sp").shape == (8, 8, 2)
        assert build_input(small_scene.sparse, small_grid, "dc", small_scene.guide).shape == (8, 8, 9)
        with pytest.raises(ConfigurationError):
            build_input(small_scene.sparse, small_grid, "sp", np.zeros((4, 4)))


class TestBackward:
    """Tests for end-to-end parameter gradients."""

    @pytest.mark.parametrize("input_mode,loss_mode", MODES)
    def test_matches_finite_differences(self, small_grid, small_scene, input_mode, loss_mode):
        """Test every parameter of every configuration against central differences."""
        rng = np.random.default_rng(7)
        params = init_params(input_mode, loss_mode, small_grid, rng, hidden_channels=4)
        example = prepare_example(small_scene, small_grid, input_mode, loss_mode)
        _, grads = loss_and_gradients(params, example)

        h = 1e-6
        analytic, numeric = [], []
        for array, grad in zip(params.arrays(), grads):
            for i in range(array.size):
                original = array.flat[i]
                array.flat[i] = original + h
                up = example_loss(params, example)
                array.flat[i] = original - h
                down = example_loss(params, example)
                array.flat[i] = original
                numeric.append((up - down) / (2 * h))
                analytic.append(grad.flat[i])
        analytic, numeric = np.array(analytic), np.array(numeric)
        assert len(analytic) >= 100
        assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-3

    def test_zero_upstream(self, small_grid, small_scene, rng):
        params = init_params("dc", "ce", small_grid, rng, hidden_channels=4)
        x = build_input(small_scene.sparse, small_grid, "dc", small_scene.guide)
        grads = backward(params, x, np.zeros((8, 8, 8)))
        assert all(not np.any(g) for g in grads)

    def test_linear_in_upstream(self, small_grid, small_scene, rng):
        params = init_params("sp", "mse", small_grid, rng, hidden_channels=4)
        x = build_input(small_scene.sparse, small_grid, "sp", small_scene.guide)
        upstream = rng.normal(size=(8, 8, 1))
        once = backward(params, x, upstream)
        twice = backward(params, x, 2.0 * upstream)
        for a, b in zip(once, twice):
            np.testing.assert_allclose(b, 2.0 * a, rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("input_mode,loss_mode", MODES)
    def test_stacked_batch_sums_scene_gradients(self, small_grid, scenes, rng, input_mode, loss_mode):
        params = init_params(input_mode, loss_mode, small_grid, rng, hidden_channels=4)
        examples = [prepare_example(s, small_grid, input_mode, loss_mode) for s in scenes]
        losses, grads = batch_loss_and_gradients(params, stack_examples(examples))
        per_scene = [loss_and_gradients(params, ex) for ex in examples]
        np.testing.assert_allclose(losses, [loss for loss, _ in per_scene], rtol=1e-12)
        for k, grad in enumerate(grads):
            np.testing.assert_allclose(grad, sum(g[k] for _, g in per_scene), rtol=1e-9, atol=1e-12)

    def test_stacking_needs_one_shape(self, small_grid, small_scene):
        example = prepare_example(small_scene, small_grid, "sp", "mse")
        cropped = type(example)(x=example.x[:4], target=example.target[:4], mask=example.mask[:4])
        with pytest.raises(ConfigurationError):
            stack_examples([example, cropped])

    def test_upstream_shape(self, small_grid, small_scene, rng):
        params = init_params("sp", "mse", small_grid, rng, hidden_channels=4)
        x = build_input(small_scene.sparse, small_grid, "sp", small_scene.guide)
        with pytest.raises(ConfigurationError):
            backward(params, x, np.zeros((8, 8, 3)))


class TestTraining:
    """Tests for the mini-batch trainer."""

    def test_deterministic(self, small_grid, scenes):
        config = TrainConfig(input_mode="dc", loss_mode="ce", epochs=3, batch_size=2, hidden_channels=4, seed=5)
        first = train(config, scenes, small_grid)
        second = train(config, scenes, small_grid)
        assert first.curve == second.curve
        for a, b in zip(first.params.arrays(), second.params.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_workers_match_serial(self, small_grid, scenes):
        """Test that the thread pool reduces gradients in the serial order."""
        serial = TrainConfig(input_mode="sp", loss_mode="ce", epochs=2, batch_size=4, hidden_channels=4,
                             shard_size=1)
        parallel = serial.model_copy(update={"workers": 3})
        a = train(serial, scenes, small_grid)
        b = train(parallel, scenes, small_grid)
        assert a.curve == b.curve
        for x, y in zip(a.params.arrays(), b.params.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_shard_size_only_changes_rounding(self, small_grid, scenes):
        per_scene = TrainConfig(input_mode="dc", loss_mode="mse", optimizer="sgd", learning_rate=1e-2,
                                epochs=3, batch_size=4, hidden_channels=4, shard_size=1)
        stacked = per_scene.model_copy(update={"shard_size": 4})
        a = train(per_scene, scenes, small_grid)
        b = train(stacked, scenes, small_grid)
        np.testing.assert_allclose(a.curve, b.curve, rtol=1e-9)
        for x, y in zip(a.params.arrays(), b.params.arrays()):
            np.testing.assert_allclose(x, y, rtol=1e-7, atol=1e-10)

    def test_small_steps_decrease_loss(self, small_grid, scenes):
        """Test that full-batch SGD with a small step never increases the training loss."""
        config = TrainConfig(input_mode="sp", loss_mode="mse", optimizer="sgd", learning_rate=5e-3,
                             epochs=15, batch_size=len(scenes), hidden_channels=4)
        curve = train(config, scenes, small_grid).curve
        assert len(curve) == 15
        assert np.all(np.diff(curve) <= 1e-12)
        assert curve[-1] < curve[0]

    def test_adam_reduces_loss(self, small_grid, scenes):
        config = TrainConfig(input_mode="dc", loss_mode="ce", epochs=30, batch_size=2, hidden_channels=4,
                             learning_rate=1e-2)
        curve = train(config, scenes, small_grid).curve
        assert curve[-1] < curve[0]

    def test_divergence_reports_epoch(self, small_grid, scenes):
        config = TrainConfig(input_mode="sp", loss_mode="mse", optimizer="sgd", learning_rate=1e12,
                             epochs=20, batch_size=len(scenes), hidden_channels=4)
        with np.errstate(all="ignore"):
            with pytest.raises(TrainingDivergedError) as info:
                train(config, scenes, small_grid)
        assert info.value.epoch >= 1
        assert "epoch" in str(info.value)

    def test_learning_rate_halving(self):
        config = TrainConfig(input_mode="sp", loss_mode="mse", learning_rate=1e-3, lr_halving_epochs=5)
        assert config.learning_rate_at(0) == 1e-3
        assert config.learning_rate_at(4) == 1e-3
        assert config.learning_rate_at(5) == 5e-4
        assert config.learning_rate_at(10) == 2.5e-4
        assert config.name == "SP/MSE"

    def test_invalid_config(self):
        with pytest.raises(ValidationError):
            TrainConfig(input_mode="sp", loss_mode="mse", learning_rate=0.0)
        with pytest.raises(ValidationError):
            TrainConfig(input_mode="rgb", loss_mode="mse")

    def test_no_scenes(self, small_grid):
        config = TrainConfig(input_mode="sp", loss_mode="mse")
        with pytest.raises(ConfigurationError):
            ToyTrainer(config, small_grid).train([])


class TestPrediction:
    """Tests for dense predictions and coefficients."""

    def test_coefficients_sum_to_one(self, small_grid, small_scene, rng):
        params = init_params("dc", "ce", small_grid, rng)
        x = build_input(small_scene.sparse, small_grid, "dc", small_scene.guide)
        coefficients = predict_coefficients(params, x)
        np.testing.assert_allclose(coefficients.data.sum(axis=2), 1.0)
        assert np.all(coefficients.data >= 0)

    @pytest.mark.parametrize("input_mode,loss_mode", MODES)
    def test_predictions_inside_grid(self, small_grid, small_scene, rng, input_mode, loss_mode):
        params = init_params(input_mode, loss_mode, small_grid, rng)
        params.biases[-1][...] += 50.0
        x = build_input(small_scene.sparse, small_grid, input_mode, small_scene.guide)
        depth = predict_depth(params, x)
        assert depth.valid.all()
        assert depth.depth.min() >= small_grid.centers[0] - 1e-12
        assert depth.depth.max() <= small_grid.centers[-1] + 1e-12

    def test_coefficients_need_ce_head(self, small_grid, small_scene, rng):
        params = init_params("sp", "mse", small_grid, rng)
        x = build_input(small_scene.sparse, small_grid, "sp", small_scene.guide)
        with pytest.raises(ConfigurationError):
            predict_coefficients(params, x)


class TestSerialization:
    """Tests for storing parameters in the tensor format."""

    def test_round_trip(self, small_grid, rng):
        params = init_params("dc", "ce", small_grid, rng, hidden_channels=4, use_guide=False)
        restored = params_from_tensors(decode_tensors(encode_tensors(params_to_tensors(params))))
        assert (restored.input_mode, restored.loss_mode, restored.use_guide) == ("dc", "ce", False)
        assert restored.grid == small_grid
        for a, b in zip(params.arrays(), restored.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_bad_header(self, small_grid, rng):
        tensors = params_to_tensors(init_params("sp", "mse", small_grid, rng, hidden_channels=4))
        tensors[0] = tensors[0].copy()
        tensors[0][0] = 9.0
        with pytest.raises(FormatError):
            params_from_tensors(tensors)
        with pytest.raises(FormatError):
            params_from_tensors(tensors[:3])
