"""Photometric losses and the combined objective vs longhand oracles."""

import numpy as np
import pytest

from meshsplat import (LossWeights, l1_loss, rasterize, ssim_loss,
                       total_loss)
from meshsplat.errors import ContractError
from conftest import (assert_grad_close, fd_scalar, make_camera,
                      random_surfels)


def _scene(seed, size=16):
    rng = np.random.default_rng(seed)
    cam = make_camera(size, distance=0.32)
    surfels = random_surfels(rng, 6, spread=0.05)
    out = rasterize(surfels, cam, rng.uniform(0, 1, size=3))
    target = rng.uniform(0, 1, size=(size, size, 3))
    return out, target


class TestL1:
    def test_identical_images_zero(self):
        img = np.random.default_rng(0).uniform(0, 1, size=(8, 8, 3))
        loss, grad = l1_loss(img, img.copy())
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_constant_offset(self):
        img = np.full((6, 6, 3), 0.5)
        loss, grad = l1_loss(img, img - 0.1)
        assert loss == pytest.approx(0.1, abs=1e-12)
        assert np.allclose(grad, 1.0 / img.size)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 1, size=(7, 5, 3))
        tgt = rng.uniform(0, 1, size=(7, 5, 3))
        oracle = float(np.mean(np.abs(img - tgt)))
        loss, grad = l1_loss(img, tgt)
        assert loss == pytest.approx(oracle, rel=1e-12)
        assert np.allclose(grad, np.sign(img - tgt) / img.size)

    def test_masked_mean_counts_only_kept_pixels(self):
        img = np.zeros((4, 4, 3))
        tgt = np.ones((4, 4, 3))
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0] = True
        loss, grad = l1_loss(img, tgt, mask)
        assert loss == pytest.approx(1.0, abs=1e-12)
        assert np.all(grad[0, 0] == -1.0 / 3)
        assert np.all(grad[1:] == 0.0)

    def test_all_masked_is_zero(self):
        img = np.ones((4, 4, 3))
        loss, grad = l1_loss(img, np.zeros_like(img),
                             np.zeros((4, 4), dtype=bool))
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            l1_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestSSIM:
    def test_identical_images_zero(self):
        img = np.random.default_rng(1).uniform(0, 1, size=(16, 16, 3))
        loss, grad = ssim_loss(img, img.copy())
        assert abs(loss) < 1e-12
        # at x == y the SSIM surface is at its maximum: gradient ~ 0
        assert np.abs(grad).max() < 1e-10

    def test_inverted_image_scores_worse(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 1, size=(16, 16, 3))
        same, _ = ssim_loss(img, img.copy())
        flipped, _ = ssim_loss(1.0 - img, img)
        assert flipped > same + 0.5

    def test_image_below_window_is_zero(self):
        img = np.random.default_rng(3).uniform(0, 1, size=(8, 8, 3))
        loss, grad = ssim_loss(img, img * 0.5)
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_grayscale_input_supported(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 1, size=(16, 16))
        tgt = rng.uniform(0, 1, size=(16, 16))
        loss, grad = ssim_loss(img, tgt)
        assert 0.0 < loss < 2.0
        assert grad.shape == img.shape

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_matches_fd(self, seed):
        rng = np.random.default_rng(seed)
        img = rng.uniform(0.2, 0.8, size=(14, 14, 3))
        tgt = rng.uniform(0.2, 0.8, size=(14, 14, 3))
        _, grad = ssim_loss(img, tgt)
        for _ in range(12):
            i, j, c = (int(rng.integers(0, s)) for s in img.shape)
            fd = fd_scalar(lambda: ssim_loss(img, tgt)[0], img, (i, j, c))
            assert_grad_close(grad[i, j, c], fd,
                              label=f"ssim grad[{i},{j},{c}]")

    def test_masked_gradient_matches_fd(self):
        rng = np.random.default_rng(11)
        img = rng.uniform(0.2, 0.8, size=(14, 14, 3))
        tgt = rng.uniform(0.2, 0.8, size=(14, 14, 3))
        mask = rng.uniform(size=(14, 14)) > 0.3
        _, grad = ssim_loss(img, tgt, mask)
        for _ in range(8):
            i, j, c = (int(rng.integers(0, s)) for s in img.shape)
            fd = fd_scalar(lambda: ssim_loss(img, tgt, mask)[0],
                           img, (i, j, c))
            assert_grad_close(grad[i, j, c], fd,
                              label=f"masked ssim grad[{i},{j},{c}]")


class TestTotalLoss:
    def test_zero_weights_reduce_to_l1(self):
        out, target = _scene(0)
        zero = LossWeights(perceptual=0.0, depth_distortion=0.0,
                           normal_consistency=0.0)
        report, grads = total_loss(out, target, zero)
        l1_only, l1_grad = l1_loss(out.rgb, target)
        assert report.total == pytest.approx(l1_only, rel=1e-12)
        assert report.l1 == pytest.approx(l1_only, rel=1e-12)
        np.testing.assert_allclose(grads.rgb, l1_grad, atol=1e-15)
        assert np.all(grads.rec_omega == 0.0)
        assert np.all(grads.rec_z == 0.0)
        assert np.all(grads.rec_normal == 0.0)
        assert np.all(grads.depth == 0.0)

    def test_report_identity(self):
        out, target = _scene(1)
        w = LossWeights(perceptual=0.3, depth_distortion=40.0,
                        normal_consistency=0.02)
        report, _ = total_loss(out, target, w)
        recon = (report.l1 + 0.3 * report.perceptual
                 + 40.0 * report.depth_distortion
                 + 0.02 * report.normal_consistency)
        assert report.total == pytest.approx(recon, rel=1e-9, abs=1e-12)

    @pytest.mark.parametrize("lam", [0.0, 0.5, 3.0])
    def test_weight_linearity(self, lam):
        # each term enters the total linearly in its weight
        out, target = _scene(2)
        base = total_loss(out, target, LossWeights(
            perceptual=0.0, depth_distortion=0.0,
            normal_consistency=0.0))[0]
        rep = total_loss(out, target, LossWeights(
            perceptual=lam, depth_distortion=lam,
            normal_consistency=lam))[0]
        expect = (base.l1 + lam * (rep.perceptual + rep.depth_distortion
                                   + rep.normal_consistency))
        assert rep.total == pytest.approx(expect, rel=1e-9, abs=1e-12)
        assert rep.l1 == pytest.approx(base.l1, rel=1e-12)

    def test_negative_weights_rejected(self):
        with pytest.raises(ContractError):
            LossWeights(perceptual=-0.1)

    def test_mask_respected_by_photometric_terms(self):
        out, target = _scene(3)
        mask = np.zeros(out.rgb.shape[:2], dtype=bool)
        mask[4:12, 4:12] = True
        rep_m, grads_m = total_loss(out, target, LossWeights(), mask)
        rep_f, _ = total_loss(out, target, LossWeights())
        assert rep_m.l1 != pytest.approx(rep_f.l1, rel=1e-6)
        # geometric regularizers ignore the mask entirely
        assert rep_m.depth_distortion == rep_f.depth_distortion
        assert rep_m.normal_consistency == rep_f.normal_consistency
        # L1 is pixelwise, so masked pixels get no L1 gradient (SSIM
        # windows centered on kept pixels may still overlap masked ones)
        l1_only = LossWeights(perceptual=0.0, depth_distortion=0.0,
                              normal_consistency=0.0)
        _, grads_l1 = total_loss(out, target, l1_only, mask)
        assert np.all(grads_l1.rgb[~mask] == 0.0)
        assert np.any(grads_l1.rgb[mask] != 0.0)

    def test_target_shape_checked(self):
        out, target = _scene(4)
        with pytest.raises(ContractError):
            total_loss(out, target[:-1], LossWeights())

    def test_custom_perceptual_fn_slot(self):
        out, target = _scene(5)

        def l2_term(img, tgt, mask=None):
            diff = img - tgt
            return float(np.mean(diff ** 2)), 2.0 * diff / diff.size

        w = LossWeights(perceptual=1.0, depth_distortion=0.0,
                        normal_consistency=0.0)
        rep, grads = total_loss(out, target, w, perceptual_fn=l2_term)
        expect = float(np.mean((out.rgb - target) ** 2))
        assert rep.perceptual == pytest.approx(expect, rel=1e-12)
        l1_grad = l1_loss(out.rgb, target)[1]
        np.testing.assert_allclose(
            grads.rgb, l1_grad + 2.0 * (out.rgb - target) / out.rgb.size,
            atol=1e-15)
