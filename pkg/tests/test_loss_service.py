"""
Unit tests for the loss service: softmax, cross-entropy and its gradient,
reference MSE/MAE, two-point landscapes and the free-logit fit.
"""

import numpy as np
import pytest

from app.services.dc_codec import BinGrid, DepthImage, decode_3coeff, decode_all, encode_pixel
from app.services.loss_service import (
    LogitImage,
    ce_gradient_logits,
    cross_entropy_image,
    cross_entropy_pixel,
    fit_free_logits,
    mae_loss,
    mse_loss,
    softmax,
    softmax_pixel,
    two_point_loss,
    two_point_loss_landscape,
)
from app.utils import ConfigurationError, EmptyMaskError, InvalidInputError, MissingPixelError


def numeric_gradient(f, x, h=1e-6):
    """Central finite differences of a scalar function."""
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        grad.flat[i] = (f(x + step) - f(x - step)) / (2 * h)
    return grad


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


class TestSoftmax:
    """Tests for logit normalization."""

    def test_zero_logits_uniform(self):
        np.testing.assert_allclose(softmax_pixel([0, 0, 0, 0]), [0.25] * 4)

    @pytest.mark.parametrize("c", [-800.0, 0.0, 3.7, 1000.0])
    def test_shift_invariance(self, c):
        """Test that constant logits give a uniform vector even for huge values."""
        np.testing.assert_allclose(softmax_pixel([c] * 5), [0.2] * 5)

    def test_log_ratios(self):
        np.testing.assert_allclose(softmax_pixel(np.log([1.0, 2.0, 5.0])), [0.125, 0.25, 0.625])

    def test_non_finite(self):
        with pytest.raises(InvalidInputError):
            softmax_pixel([0.0, np.nan])

    def test_logit_image_probabilities(self):
        grid = BinGrid(d_min=0.0, d_max=4.0, n_bins=4)
        image = LogitImage(np.random.default_rng(0).normal(size=(2, 3, 4)), grid)
        np.testing.assert_allclose(image.probabilities().sum(axis=2), 1.0)
        with pytest.raises(ConfigurationError):
            LogitImage(np.zeros((2, 3, 5)), grid)


class TestCrossEntropy:
    """Tests for per-pixel cross-entropy and its logit gradient."""

    def test_self_entropy(self):
        c = np.array([0.25, 0.5, 0.25])
        expected = -(2 * 0.25 * np.log(0.25) + 0.5 * np.log(0.5))
        assert cross_entropy_pixel(c, c) == pytest.approx(expected)
        assert expected == pytest.approx(1.0397, abs=1e-4)

    def test_one_hot_against_uniform(self):
        gt = np.zeros(80)
        gt[17] = 1.0
        assert cross_entropy_pixel(gt, np.full(80, 1 / 80)) == pytest.approx(np.log(80))

    def test_triplet_against_uniform(self):
        assert cross_entropy_pixel([0.25, 0.5, 0.25, 0.0], [0.25] * 4) == pytest.approx(np.log(4))

    def test_zero_probability_is_floored(self):
        loss = cross_entropy_pixel([0.0, 1.0], [1.0, 0.0])
        assert np.isfinite(loss)
        assert loss == pytest.approx(-np.log(1e-12))

    def test_missing_ground_truth(self):
        with pytest.raises(MissingPixelError):
            cross_entropy_pixel(np.zeros(4), [0.25] * 4)

    def test_gradient_example(self):
        grad = ce_gradient_logits([0.25, 0.5, 0.25, 0.0], np.zeros(4))
        np.testing.assert_allclose(grad, [0.0, -0.25, 0.0, 0.25], atol=1e-15)

    def test_gradient_vanishes_at_target(self):
        target = softmax_pixel([0.3, -1.2, 2.0, 0.1])
        np.testing.assert_allclose(ce_gradient_logits(target, np.log(target)), 0.0, atol=1e-15)

    def test_gradient_matches_finite_differences(self, rng):
        """Test the closed-form gradient at 100 random logit vectors."""
        grid = BinGrid(d_min=0.0, d_max=16.0, n_bins=16)
        for _ in range(100):
            gt = encode_pixel(rng.uniform(grid.encodable_min, grid.encodable_max), grid)
            logits = rng.normal(scale=2.0, size=16)
            numeric = numeric_gradient(lambda z: cross_entropy_pixel(gt, softmax(z)), logits)
            assert relative_error(ce_gradient_logits(gt, logits), numeric) < 1e-5

    def test_ground_truth_is_the_minimum(self, rng):
        """Test that no softmax prediction beats the ground truth itself (Gibbs' inequality)."""
        grid = BinGrid(d_min=0.0, d_max=16.0, n_bins=16)
        for _ in range(200):
            gt = encode_pixel(rng.uniform(grid.encodable_min, grid.encodable_max), grid)
            floor = cross_entropy_pixel(gt, gt)
            support = gt[gt > 0]
            assert floor == pytest.approx(-np.sum(support * np.log(support)))
            pred = softmax(rng.normal(scale=2.0, size=16))
            assert cross_entropy_pixel(gt, pred) >= floor - 1e-12
            blended = 0.5 * gt + 0.5 * pred
            assert cross_entropy_pixel(gt, blended) <= cross_entropy_pixel(gt, pred) + 1e-12


class TestCrossEntropyImage:
    """Tests for the masked image loss used by the toy network."""

    @pytest.fixture
    def setup(self, rng):
        grid = BinGrid(d_min=0.0, d_max=6.0, n_bins=6)
        gt = np.zeros((3, 4, 6))
        mask = rng.random((3, 4)) < 0.6
        mask[0, 0] = True
        for r, c in zip(*np.nonzero(mask)):
            gt[r, c] = encode_pixel(rng.uniform(1.0, 5.0), grid)
        logits = rng.normal(size=(3, 4, 6))
        return gt, logits, mask

    def test_report_matches_pixel_loss(self, setup):
        gt, logits, mask = setup
        report, _ = cross_entropy_image(gt, logits, mask)
        expected = [cross_entropy_pixel(gt[r, c], softmax(logits[r, c])) for r, c in zip(*np.nonzero(mask))]
        assert report.n_pixels == int(mask.sum())
        assert report.total == pytest.approx(sum(expected))
        assert report.per_pixel_mean == pytest.approx(np.mean(expected))

    def test_gradient(self, setup):
        gt, logits, mask = setup
        _, grad = cross_entropy_image(gt, logits, mask)
        numeric = numeric_gradient(lambda z: cross_entropy_image(gt, z, mask)[0].per_pixel_mean, logits)
        assert relative_error(grad, numeric) < 1e-5
        assert not np.any(grad[~mask])

    def test_empty_mask(self, setup):
        gt, logits, mask = setup
        with pytest.raises(EmptyMaskError):
            cross_entropy_image(gt, logits, np.zeros_like(mask))


class TestReferenceLosses:
    """Tests for masked MSE and MAE."""

    def test_identical(self):
        img = DepthImage(np.array([[1.0, 2.0], [3.0, 0.0]]))
        assert mse_loss(img, img) == 0.0
        assert mae_loss(img, img) == 0.0

    def test_two_errors(self):
        pred = DepthImage(np.array([[3.0, 7.0]]))
        gt = DepthImage(np.array([[2.0, 4.0]]))
        assert mse_loss(pred, gt) == pytest.approx(5.0)
        assert mae_loss(pred, gt) == pytest.approx(2.0)

    def test_mask_selects_pixels(self):
        pred = DepthImage(np.array([[3.0, 7.0]]))
        gt = DepthImage(np.array([[1.0, 4.0]]))
        mask = np.array([[True, False]])
        assert mse_loss(pred, gt, mask) == pytest.approx(4.0)
        assert mae_loss(pred, gt, mask) == pytest.approx(2.0)

    def test_empty_mask(self):
        pred = DepthImage(np.array([[0.0, 7.0]]))
        gt = DepthImage(np.array([[2.0, 0.0]]))
        with pytest.raises(EmptyMaskError):
            mse_loss(pred, gt)


class TestTwoPointLandscape:
    """Tests for the ambiguity landscapes."""

    def test_mse_argmin_at_midpoint(self):
        landscape = two_point_loss_landscape(2.0, 6.0, "mse")
        step = landscape.depths[1] - landscape.depths[0]
        assert landscape.argmin_depth == pytest.approx(4.0, abs=step)
        assert landscape.depths[0] == pytest.approx(1.0)
        assert landscape.depths[-1] == pytest.approx(7.0)

    def test_mae_flat_between_targets(self):
        landscape = two_point_loss_landscape(2.0, 6.0, "mae")
        inside = (landscape.depths >= 2.0) & (landscape.depths <= 6.0)
        np.testing.assert_allclose(landscape.losses[inside], 2.0, atol=1e-9)

    def test_tmae_saturates_at_midpoint(self):
        losses = two_point_loss(np.array([2.0, 4.0, 6.0]), 2.0, 6.0, "tmae", t=1.0)
        np.testing.assert_allclose(losses, [0.5, 1.0, 0.5])

    def test_random_pairs(self, rng):
        """Test 100 random pairs: midpoint argmin, flat MAE, tMAE gap of t / 2."""
        for _ in range(100):
            d1 = rng.uniform(1.0, 50.0)
            d2 = d1 + rng.uniform(0.5, 30.0)
            mse = two_point_loss_landscape(d1, d2, "mse")
            step = mse.depths[1] - mse.depths[0]
            assert abs(mse.argmin_depth - 0.5 * (d1 + d2)) <= step

            mae = two_point_loss_landscape(d1, d2, "mae")
            inside = (mae.depths >= d1) & (mae.depths <= d2)
            np.testing.assert_allclose(mae.losses[inside], 0.5 * (d2 - d1), atol=1e-9)

            t = rng.uniform(0.05, 0.45) * (d2 - d1)
            mid, start = two_point_loss(np.array([0.5 * (d1 + d2), d1]), d1, d2, "tmae", t)
            assert mid == pytest.approx(t)
            assert mid - start == pytest.approx(0.5 * t)

    def test_rows(self):
        landscape = two_point_loss_landscape(2.0, 6.0, "tmse", t=1.0, samples=5)
        assert len(landscape.rows()) == 5

    def test_invalid_arguments(self):
        with pytest.raises(InvalidInputError):
            two_point_loss_landscape(6.0, 2.0)
        with pytest.raises(InvalidInputError):
            two_point_loss_landscape(2.0, 6.0, samples=2)
        with pytest.raises(InvalidInputError):
            two_point_loss_landscape(2.0, 6.0, "tmae", t=0.0)
        with pytest.raises(ConfigurationError):
            two_point_loss(np.array([1.0]), 2.0, 6.0, "huber")


class TestFreeLogitFit:
    """Tests for gradient descent on a single logit vector (the degenerate network)."""

    def test_single_target_reaches_entropy(self):
        grid = BinGrid(d_min=0.0, d_max=8.0, n_bins=8)
        target = encode_pixel(3.5, grid)
        logits, curve = fit_free_logits([target], steps=20_000)
        entropy = cross_entropy_pixel(target, target)
        assert curve[-1] == pytest.approx(entropy, abs=1e-3)
        assert curve[-1] < curve[0]

    def test_two_targets_multimodal(self):
        """Test that two conflicting targets give the average density and an unmixed peak."""
        grid = BinGrid(d_min=0.0, d_max=16.0, n_bins=16)
        near, far = encode_pixel(3.5, grid), encode_pixel(11.5, grid)
        logits, _ = fit_free_logits([near, far])
        density = softmax(logits)
        np.testing.assert_allclose(density, 0.5 * (near + far), atol=1e-3)

        peak = decode_3coeff(density, grid)
        assert peak == pytest.approx(3.5, abs=1e-9)
        assert decode_all(density, grid) == pytest.approx(7.5, abs=1e-2)

    def test_target_without_mass(self):
        with pytest.raises(MissingPixelError):
            fit_free_logits([np.zeros(4)], steps=1)
