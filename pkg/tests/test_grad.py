import math

import numpy as np
import pytest

from trifield import (Camera, DomainError, FieldDecoder, Intrinsics, OrbitPose,
                      SamplingConfig, TriplaneGrid)
from trifield.grad import (DistillLossConfig, NonFiniteLossError, ParameterSet,
                           finite_diff_check, loss_and_grad, render_loss_fn,
                           render_views)


def tiny_setup(seed=7, resolution=8, channels=4, hidden=(8,), n_features=4,
               size=6, n_views=2):
    rng = np.random.default_rng(seed)
    grid = TriplaneGrid.random(rng, resolution, channels, scale=0.3)
    dec = FieldDecoder.make(rng, channels, hidden, n_features)
    params = ParameterSet.from_grid_decoder(grid, dec)
    cams = [Camera.from_orbit(OrbitPose(yaw=0.3 * v - 0.2, pitch=0.1 * v),
                              Intrinsics(focal=1.8, width=size, height=size))
            for v in range(n_views)]
    sampling = SamplingConfig(n_coarse=6, n_fine=0, width=size, height=size)
    return params, cams, sampling


class TestParameterSet:
    def test_flatten_round_trip_identity(self):
        params, _, _ = tiny_setup()
        flat = params.flatten()
        again = params.unflatten(flat)
        assert np.array_equal(again.values, params.values)
        assert np.array_equal(again.flatten(), flat)

    def test_index_map_covers_every_value_once(self):
        params, _, _ = tiny_setup()
        spans = params.layout.index_map()
        assert spans[0][1] == 0
        for (_, _, stop), (_, start, _) in zip(spans[:-1], spans[1:]):
            assert stop == start
        assert spans[-1][2] == params.values.size

    def test_grid_decoder_round_trip(self):
        rng = np.random.default_rng(1)
        grid = TriplaneGrid.random(rng, 6, 3)
        dec = FieldDecoder.make(rng, 3, (5,), 3)
        params = ParameterSet.from_grid_decoder(grid, dec)
        assert np.array_equal(params.to_grid().planes, grid.planes)
        for a, b in zip(params.to_decoder().weights, dec.weights):
            assert np.array_equal(a, b)


class TestLossAndGrad:
    def test_perfect_fit_gives_zero_loss_and_grad(self):
        params, cams, sampling = tiny_setup()
        targets = render_views(params, cams, sampling, seed=5)
        parts, grad = loss_and_grad(params, cams, targets, DistillLossConfig(),
                                    sampling, seed=5)
        assert parts.total == 0.0
        assert np.all(grad.values == 0.0)

    def test_single_sample_hand_chain_rule(self):
        # one pixel, one depth sample, single-layer decoder: the whole
        # pipeline collapses to closed-form expressions
        channels, n_features = 1, 3
        resolution = 2
        planes = np.full((3, 2, 2, 1), 0.3, np.float32)
        grid = TriplaneGrid(planes)
        w = np.array([[0.8, 0.6, -0.4, 0.2]], np.float32)
        b = np.array([0.1, 0.05, -0.05, 0.2], np.float32)
        dec = FieldDecoder((w,), (b,))
        params = ParameterSet.from_grid_decoder(grid, dec)
        cam = Camera.from_orbit(OrbitPose(), Intrinsics(focal=2.0, width=1, height=1))
        sampling = SamplingConfig(n_coarse=1, n_fine=0, stratified=False,
                                  width=1, height=1)
        target = np.full((3, 1, 1), 0.9)
        cfg = DistillLossConfig(color_weight=1.0, feature_weight=1.0,
                                ref_view_weight=0.1)
        parts, grad = loss_and_grad(params, [cam], [target], cfg, sampling, seed=0)

        # forward, by hand (float64)
        sp = lambda x: math.log1p(math.exp(-abs(x))) + max(x, 0.0)
        sg = lambda x: 1.0 / (1.0 + math.exp(-x))
        feat = float(np.float32(0.3))  # constant planes, float32 storage
        raw = [feat * wi + bi for wi, bi in zip(w[0].astype(np.float64),
                                                b.astype(np.float64))]
        sigma = sp(raw[0])
        feats = [sg(r) for r in raw[1:]]
        t0 = (cam.near + cam.far) / 2.0
        delta = cam.far - t0
        alpha = 1.0 - math.exp(-sigma * delta)
        pix = [alpha * f for f in feats]
        resid = [p - 0.9 for p in pix]
        # every channel is in both the color term (n=3) and feature term (n=3)
        lam = 0.1
        expected_loss = lam * (sum(abs(r) for r in resid) / 3.0) * 2.0
        assert parts.total == pytest.approx(expected_loss, rel=1e-12)

        # gradient wrt the density weight w[0][0]: only through alpha
        g_pix = [lam * math.copysign(1.0, r) * (1.0 / 3.0 + 1.0 / 3.0) for r in resid]
        d_alpha = sum(g * f for g, f in zip(g_pix, feats))
        d_sigma = d_alpha * delta * math.exp(-sigma * delta)
        d_w0 = d_sigma * sg(raw[0]) * feat
        got = grad.weight(0)[0, 0]
        assert got == pytest.approx(d_w0, rel=1e-9)
        # gradient wrt a feature weight w[0][1]: only through feats[0]
        d_f0 = g_pix[0] * alpha
        d_w1 = d_f0 * feats[0] * (1 - feats[0]) * feat
        assert grad.weight(0)[0, 1] == pytest.approx(d_w1, rel=1e-9)

    def test_matches_finite_differences(self):
        params, cams, sampling = tiny_setup(seed=3)
        targets = [t + 0.15 for t in render_views(params, cams, sampling, seed=9)]
        fn = render_loss_fn(params.layout, cams, targets, DistillLossConfig(),
                            sampling, seed=9)
        report = finite_diff_check(fn, params.values, h=1e-5, n_probe=200,
                                   rng=np.random.default_rng(0))
        assert report.max_rel_error <= 1e-4
        assert len(report.entries) >= 200

    def test_triplane_term_is_weighted_sign_pattern(self):
        params, cams, sampling = tiny_setup(seed=4)
        targets = render_views(params, cams, sampling, seed=2)
        target_planes = params.planes() + np.random.default_rng(1).choice(
            [-0.5, 0.5], size=params.planes().shape)
        cfg = DistillLossConfig(color_weight=0.0, feature_weight=0.0,
                                triplane_weight=0.7)
        parts, grad = loss_and_grad(params, cams, targets, cfg, sampling,
                                    seed=2, target_planes=target_planes)
        res = params.planes() - target_planes
        expected = 0.7 * np.sign(res) / res.size
        assert np.array_equal(grad.planes(), expected)
        assert parts.triplane == pytest.approx(0.7 * np.abs(res).mean())

    def test_nonfinite_loss_names_term(self):
        params, cams, sampling = tiny_setup()
        targets = render_views(params, cams, sampling, seed=5)
        targets[0][0, 0, 0] = np.inf
        with pytest.raises(NonFiniteLossError, match="color|feature"):
            loss_and_grad(params, cams, targets, DistillLossConfig(),
                          sampling, seed=5)

    def test_deterministic_and_thread_invariant(self):
        params, cams, sampling = tiny_setup(seed=11)
        targets = [t + 0.1 for t in render_views(params, cams, sampling, seed=1)]
        a = loss_and_grad(params, cams, targets, seed=1, sampling=sampling)
        b = loss_and_grad(params, cams, targets, seed=1, sampling=sampling)
        c = loss_and_grad(params, cams, targets, seed=1, sampling=sampling, threads=2)
        assert a[0] == b[0] == c[0]
        assert np.array_equal(a[1].values, b[1].values)
        assert np.array_equal(a[1].values, c[1].values)

    def test_fine_sampling_rejected(self):
        params, cams, _ = tiny_setup()
        bad = SamplingConfig(n_coarse=4, n_fine=4, width=6, height=6)
        with pytest.raises(DomainError, match="n_fine"):
            loss_and_grad(params, cams, [np.zeros((4, 6, 6))] * 2, sampling=bad)

    def test_view_weighting_reference_vs_multiview(self):
        params, cams, sampling = tiny_setup(seed=13)
        targets = [t + 0.2 for t in render_views(params, cams, sampling, seed=3)]
        ref_only = DistillLossConfig(ref_view_weight=0.1, mv_view_weight=0.0)
        mv_only = DistillLossConfig(ref_view_weight=0.0, mv_view_weight=0.025)
        both = DistillLossConfig(ref_view_weight=0.1, mv_view_weight=0.025)
        la = loss_and_grad(params, cams, targets, ref_only, sampling, seed=3)[0]
        lb = loss_and_grad(params, cams, targets, mv_only, sampling, seed=3)[0]
        lc = loss_and_grad(params, cams, targets, both, sampling, seed=3)[0]
        assert lc.total == pytest.approx(la.total + lb.total, rel=1e-12)


class TestFiniteDiffCheck:
    def test_quadratic_exact(self):
        fn = lambda x: (float(x @ x), 2.0 * x)
        x0 = np.random.default_rng(0).normal(size=20)
        report = finite_diff_check(fn, x0, h=1e-5, n_probe=20,
                                   rng=np.random.default_rng(1))
        assert report.max_rel_error <= 1e-9

    def test_linear_exact(self):
        g = np.random.default_rng(2).normal(size=15)
        fn = lambda x: (float(g @ x), g.copy())
        report = finite_diff_check(fn, np.zeros(15), h=1e-5, n_probe=15,
                                   rng=np.random.default_rng(3))
        assert report.max_rel_error <= 1e-10

    def test_report_string(self):
        fn = lambda x: (float(x @ x), 2.0 * x)
        report = finite_diff_check(fn, np.ones(4), n_probe=4,
                                   rng=np.random.default_rng(0))
        assert "max rel error" in str(report)


class TestGradcheckSuite:
    def test_shipped_suite_within_tolerance(self):
        from trifield.gradcheck_suite import run_gradcheck_suite
        reports = run_gradcheck_suite(n_probe=60)
        assert len(reports) >= 2
        for name, rep in reports:
            assert rep.max_rel_error <= 1e-4, name
