import math

import numpy as np
import pytest

from trifield import DomainError
from trifield.metrics import (DepthPair, SimilarityTransform2D,
                              depth_si_errors, evaluate_pair, landmark_lattice,
                              misalignment_sweep, procrustes_2d, psnr, ssim,
                              fixture_image, warp_image)


class TestPsnr:
    def test_identical_is_infinite(self):
        img = fixture_image(32)
        assert psnr(img, img) == math.inf

    def test_uniform_difference_closed_form(self):
        a = np.full((16, 16), 0.5)
        b = a + 1.0 / 255.0
        expected = 20.0 * math.log10(255.0)
        assert psnr(a, b) == pytest.approx(expected, rel=1e-12)

    def test_mask_equals_cropped(self):
        img = fixture_image(32, seed=1)
        other = fixture_image(32, seed=2)
        mask = np.zeros((32, 32), bool)
        mask[:16] = True
        assert psnr(img, other, mask=mask) == pytest.approx(
            psnr(img[:16], other[:16]), rel=1e-12)

    def test_symmetric(self):
        a, b = fixture_image(24, 3), fixture_image(24, 4)
        assert psnr(a, b) == psnr(b, a)

    def test_empty_mask_rejected(self):
        with pytest.raises(DomainError):
            psnr(np.ones((4, 4)), np.ones((4, 4)), mask=np.zeros((4, 4), bool))


def _ssim_direct_oracle(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Independent per-window SSIM: explicit 2-d Gaussian, python loops."""
    x = np.arange(window) - (window - 1) / 2
    g1 = np.exp(-0.5 * (x / sigma) ** 2)
    g1 /= g1.sum()
    kernel = np.outer(g1, g1)
    h, w = a.shape
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            wa = a[i:i + window, j:j + window]
            wb = b[i:i + window, j:j + window]
            mu_a = (kernel * wa).sum()
            mu_b = (kernel * wb).sum()
            va = (kernel * wa * wa).sum() - mu_a ** 2
            vb = (kernel * wb * wb).sum() - mu_b ** 2
            cov = (kernel * wa * wb).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestSsim:
    def test_identical_is_one(self):
        img = fixture_image(32)
        assert ssim(img, img) == 1.0

    def test_anticorrelated_strongly_negative(self):
        img = fixture_image(32, seed=5)
        assert ssim(img, 1.0 - img) < -0.2

    def test_against_direct_convolution_oracle(self):
        rng = np.random.default_rng(0)
        cases = [
            (fixture_image(16, 1), fixture_image(16, 2)),
            (rng.uniform(0, 1, (16, 16)), rng.uniform(0, 1, (16, 16))),
            (fixture_image(16, 3), np.clip(fixture_image(16, 3) + 0.05, 0, 1)),
        ]
        for a, b in cases:
            assert ssim(a, b) == pytest.approx(_ssim_direct_oracle(a, b), abs=1e-6)

    def test_symmetric(self):
        a, b = fixture_image(24, 6), fixture_image(24, 7)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_too_small_rejected(self):
        with pytest.raises(DomainError):
            ssim(np.ones((8, 8)), np.ones((8, 8)))

    def test_masked_windows(self):
        a, b = fixture_image(32, 8), fixture_image(32, 9)
        mask = np.ones((32, 32), bool)
        full = ssim(a, b, mask=mask)
        assert full == pytest.approx(ssim(a, b), abs=1e-12)
        with pytest.raises(DomainError):
            ssim(a, b, mask=np.zeros((32, 32), bool))


class TestDepthSiErrors:
    def test_affine_invariance_is_numerically_zero(self):
        gt = np.random.default_rng(0).uniform(0, 1, (24, 24))
        for a in (0.5, 2.0):
            for b in (-0.3, 0.3):
                l1, rmse = depth_si_errors(DepthPair(a * gt + b, gt))
                assert l1 <= 1e-12 and rmse <= 1e-12

    def test_balanced_noise_residuals(self):
        # +-c noise, balanced and independent of gt: after the fit the
        # residuals are c up to the small attenuation c^2/var(gt)
        rng = np.random.default_rng(1)
        gt = rng.uniform(0, 1, (64, 64))
        c = 0.01
        noise = c * np.where(np.indices(gt.shape).sum(0) % 2 == 0, 1.0, -1.0)
        l1, rmse = depth_si_errors(DepthPair(gt + noise, gt))
        assert l1 == pytest.approx(c, rel=2e-2)
        assert rmse == pytest.approx(c, rel=2e-2)

    def test_mask_recovers_clean_error(self):
        gt = np.random.default_rng(2).uniform(0, 1, (32, 32))
        pred = gt.copy()
        pred[:4] = 99.0  # corrupted band
        mask = np.ones(gt.shape, bool)
        mask[:4] = False
        l1, rmse = depth_si_errors(DepthPair(pred, gt, mask))
        assert l1 <= 1e-12 and rmse <= 1e-12

    def test_constant_prediction_degenerates_to_offset_fit(self):
        gt = np.random.default_rng(3).uniform(0, 1, (16, 16))
        l1, rmse = depth_si_errors(DepthPair(np.full(gt.shape, 7.0), gt))
        gt_n = (gt - gt.min()) / (gt.max() - gt.min())
        res = gt_n.mean() - gt_n
        assert l1 == pytest.approx(np.abs(res).mean(), rel=1e-9)

    def test_preconditions(self):
        with pytest.raises(DomainError):
            depth_si_errors(DepthPair(np.ones((4, 4)), np.ones((4, 4))))
        mask = np.zeros((4, 4), bool)
        mask[0, 0] = True
        with pytest.raises(DomainError):
            depth_si_errors(DepthPair(np.ones((4, 4)),
                                      np.random.default_rng(0).random((4, 4)), mask))

    def test_ground_truth_normalized_before_fit(self):
        gt = np.random.default_rng(4).uniform(5.0, 9.0, (16, 16))
        pred = np.random.default_rng(5).uniform(0, 1, (16, 16))
        l1a, _ = depth_si_errors(DepthPair(pred, gt))
        l1b, _ = depth_si_errors(DepthPair(pred, (gt - 5.0) / 4.0))
        assert l1a == pytest.approx(l1b, rel=1e-9)


class TestProcrustes:
    def test_identity(self):
        pts = np.random.default_rng(0).uniform(0, 50, (12, 2))
        t = procrustes_2d(pts, pts)
        assert np.allclose(t.rotation, np.eye(2), atol=1e-12)
        assert np.allclose(t.translation, 0, atol=1e-12)

    def test_recovers_known_transform(self):
        pts = np.random.default_rng(1).uniform(0, 100, (20, 2))
        th = math.radians(30.0)
        r = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        dst = pts @ r.T + np.array([5.0, -2.0])
        est = procrustes_2d(pts, dst)
        assert abs(est.theta_deg - 30.0) <= 1e-9
        assert np.allclose(est.translation, [5.0, -2.0], atol=1e-9)
        assert np.allclose(est.apply(pts), dst, atol=1e-9)

    def test_det_plus_one_under_noise(self):
        rng = np.random.default_rng(2)
        sigma = 0.5
        pts = rng.uniform(0, 100, (30, 2))
        angle_errors = []
        for _ in range(1000):
            th = rng.uniform(-math.pi, math.pi)
            r = np.array([[math.cos(th), -math.sin(th)],
                          [math.sin(th), math.cos(th)]])
            dst = pts @ r.T + rng.uniform(-20, 20, 2) + rng.normal(0, sigma, pts.shape)
            est = procrustes_2d(pts, dst)
            assert np.linalg.det(est.rotation) == pytest.approx(1.0, abs=1e-9)
            err = (est.theta_deg - math.degrees(th) + 180.0) % 360.0 - 180.0
            angle_errors.append(err)
        # angle noise scales like sigma / (rms radius * sqrt(N))
        rms = np.sqrt(((pts - pts.mean(0)) ** 2).sum(1).mean())
        bound = 3.0 * math.degrees(sigma / (rms * math.sqrt(len(pts))))
        assert np.percentile(np.abs(angle_errors), 99) <= 3.0 * bound

    def test_degenerate_rejected(self):
        same = np.ones((5, 2))
        with pytest.raises(DomainError):
            procrustes_2d(same, same + 1.0)
        with pytest.raises(DomainError):
            procrustes_2d(np.zeros((1, 2)), np.zeros((1, 2)))


class TestWarpImage:
    def test_identity_noop_full_mask(self):
        img = fixture_image(32)
        out, mask = warp_image(img, SimilarityTransform2D.identity())
        assert np.array_equal(out, img)
        assert mask.all()

    def test_integer_shift_exact_on_overlap(self):
        img = fixture_image(32, seed=2)
        t = SimilarityTransform2D(np.eye(2), np.array([3.0, 0.0]))
        out, mask = warp_image(img, t)
        assert np.array_equal(out[:, 3:], img[:, :-3])
        assert not mask[:, :3].any() and mask[:, 3:].all()

    def test_round_trip_high_psnr_interior(self):
        img = fixture_image(64, seed=3)
        t = SimilarityTransform2D.about_center(3.0, 1.3, -0.7, img.shape)
        there, _ = warp_image(img, t)
        back, _ = warp_image(there, t.inverse())
        interior = (slice(8, -8), slice(8, -8))
        assert psnr(back[interior], img[interior]) >= 40.0

    def test_coverage_shrinks_with_translation(self):
        img = fixture_image(32)
        covers = []
        for shift in (0.0, 1.5, 4.0, 9.0):
            _, mask = warp_image(img, SimilarityTransform2D(np.eye(2),
                                                            np.array([shift, 0.0])))
            covers.append(mask.sum())
        assert all(a >= b for a, b in zip(covers, covers[1:]))

    def test_rgb_image_support(self):
        img = np.stack([fixture_image(32, s) for s in range(3)], axis=-1)
        out, mask = warp_image(img, SimilarityTransform2D.identity())
        assert out.shape == img.shape
        assert np.array_equal(out, img)


class TestMisalignmentSweep:
    def test_committed_fixture_behaviour(self):
        img = fixture_image(128)
        rows = misalignment_sweep(img, [(0, 0, 0.0), (1, 0, 0.0),
                                        (2, 0, 0.0), (4, 0, 0.0)])
        assert rows[0].psnr_raw == math.inf
        assert rows[0].ssim_raw == pytest.approx(1.0, abs=1e-12)
        # raw PSNR non-increasing in shift magnitude
        raw = [r.psnr_raw for r in rows]
        assert all(a >= b for a, b in zip(raw, raw[1:]))
        # a 2-pixel shift costs more than 5 dB against the capped sentinel
        drop = 99.0 - rows[2].psnr_raw
        assert drop > 5.0
        # realignment recovers more than 80% of that drop
        recovered = rows[2].psnr_aligned - rows[2].psnr_raw
        assert recovered > 0.8 * drop

    def test_rotation_offsets(self):
        img = fixture_image(96)
        (row,) = misalignment_sweep(img, [(0.0, 0.0, 2.0)])
        assert row.psnr_aligned > row.psnr_raw
        assert row.ssim_aligned > row.ssim_raw


class TestReportAndEvaluate:
    def test_sentinel_capped_in_json(self):
        img = fixture_image(32)
        report = evaluate_pair(img, img)
        data = report.to_dict()
        assert data["psnr_db"] == 99.0
        assert set(data) == {"psnr_db", "ssim", "depth_l1", "depth_rmse",
                             "n_pixels", "aligned", "transform"}
        assert data["transform"] is None

    def test_aligned_report_includes_transform(self):
        img = fixture_image(64, seed=4)
        t = SimilarityTransform2D.about_center(0.0, 2.0, 0.0, img.shape)
        moved, _ = warp_image(img, t)
        marks = landmark_lattice(img.shape)
        report = evaluate_pair(moved, img, landmarks_src=t.apply(marks),
                               landmarks_dst=marks, align=True)
        assert report.aligned
        assert report.transform is not None
        assert report.psnr_db > 90.0  # integer shift realigns losslessly
        d = report.to_dict()
        assert d["transform"]["tx"] == pytest.approx(-2.0, abs=1e-9)

    def test_depth_fields(self):
        img = fixture_image(32, seed=5)
        depth_gt = fixture_image(32, seed=6) + 0.5
        report = evaluate_pair(img, img, pred_depth=2.0 * depth_gt + 0.1,
                               target_depth=depth_gt)
        assert report.depth_l1 <= 1e-12
        assert report.to_dict()["depth_l1"] is not None
