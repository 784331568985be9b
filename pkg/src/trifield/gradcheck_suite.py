"""The shipped finite-difference gradient suite.

Small, fixed render-loss configurations whose analytic gradients are
checked against 64-bit central differences. Probes are split between
triplane values and decoder weights; configurations are deterministic so
the suite gives the same verdict on every run.
"""

from __future__ import annotations

import numpy as np

from .camera import Camera, Intrinsics, OrbitPose
from .grad import (DistillLossConfig, ParameterSet, finite_diff_check,
                   render_loss_fn)
from .render import SamplingConfig, render
from .triplane import FieldDecoder, TriplaneGrid


def _case(name, seed, resolution, channels, hidden, n_features, size, n_samples,
          n_views, with_triplane_target):
    rng = np.random.default_rng(seed)
    grid = TriplaneGrid.random(rng, resolution, channels, scale=0.3)
    dec = FieldDecoder.make(rng, channels, hidden, n_features)
    params = ParameterSet.from_grid_decoder(grid, dec)
    # nudge the density bias so the field is neither empty nor opaque
    params.bias(params.n_layers - 1)[0] = 0.4

    cams = []
    for v in range(n_views):
        pose = OrbitPose(pitch=float(rng.uniform(-0.4, 0.4)),
                         yaw=float(rng.uniform(-0.8, 0.8)), radius=2.7)
        intr = Intrinsics(focal=2.0, width=size, height=size)
        cams.append(Camera.from_orbit(pose, intr))

    # targets from a nearby parameter set keeps residuals well away from
    # the L1 kink, so central differences stay clean
    tgt_grid = TriplaneGrid.random(np.random.default_rng(seed + 1),
                                   resolution, channels, scale=0.3)
    tgt_dec = FieldDecoder.make(np.random.default_rng(seed + 2),
                                channels, hidden, n_features)
    sampling = SamplingConfig(n_coarse=n_samples, n_fine=0, width=size, height=size)
    targets = [render(tgt_grid, tgt_dec, cam, sampling, seed=seed + 3 + i).feature
               for i, cam in enumerate(cams)]
    target_planes = None
    if with_triplane_target:
        target_planes = np.asarray(tgt_grid.planes, np.float64)

    fn = render_loss_fn(params.layout, cams, targets, DistillLossConfig(),
                        sampling, seed=seed + 7, target_planes=target_planes)
    return name, fn, params


def suite_cases():
    yield _case("two-view", seed=11, resolution=8, channels=4, hidden=(8,),
                n_features=4, size=6, n_samples=8, n_views=2,
                with_triplane_target=False)
    yield _case("triplane-term", seed=23, resolution=6, channels=4, hidden=(6,),
                n_features=4, size=5, n_samples=6, n_views=1,
                with_triplane_target=True)
    yield _case("deep-decoder", seed=37, resolution=6, channels=3, hidden=(6, 6),
                n_features=3, size=5, n_samples=6, n_views=2,
                with_triplane_target=False)


def run_gradcheck_suite(n_probe: int = 200, h: float = 1e-5, seed: int = 0):
    """Run every case -> list of (name, FiniteDiffReport)."""
    reports = []
    rng = np.random.default_rng(seed)
    for name, fn, params in suite_cases():
        size = params.layout.size
        plane_size = params.layout.plane_size
        n_half = max(n_probe // 2, 1)
        plane_idx = rng.choice(plane_size, size=min(n_half, plane_size),
                               replace=False)
        dec_idx = plane_size + rng.choice(size - plane_size,
                                          size=min(n_probe - n_half,
                                                   size - plane_size),
                                          replace=False)
        indices = np.concatenate([plane_idx, dec_idx])
        reports.append((name, finite_diff_check(fn, params.values, h=h,
                                                indices=indices)))
    return reports
