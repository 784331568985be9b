"""Procedural teacher scenes and the triplane distillation loop.

A procedural scene is an analytic density/color field over the world cube
plus an oracle renderer that evaluates the same compositing integral by
dense quadrature. ``distill_fit`` renders teacher targets from sampled
supervision cameras (one reference view, the rest multiview) and descends
the L1 color/feature losses with momentum SGD over a fresh triplane and
decoder. The whole loop is deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import (AugmentationConfig, Camera, sample_multiview_camera,
                     sample_reference_camera)
from .errors import DomainError
from .grad import DistillLossConfig, ParameterSet, loss_and_grad
from .render import RenderOutput, SamplingConfig, _composite_batch
from .triplane import FieldDecoder, TriplaneGrid


class DistillDivergence(RuntimeError):
    """The fit blew past 10x its initial loss."""


@dataclass(frozen=True)
class ProceduralScene:
    """Analytic field over the cube: density(pts) and color(pts) callables.

    Feature channels past the first three are a constant fill so feature
    supervision has a reachable target.
    """

    kind: str
    density: object
    color: object
    feature_fill: float = 0.5

    def features(self, pts: np.ndarray, n_features: int) -> np.ndarray:
        if n_features < 3:
            raise DomainError("need at least 3 feature channels")
        out = np.full((pts.shape[0], n_features), self.feature_fill)
        out[:, :3] = self.color(pts)
        return out


def _sphere_color(center):
    center = np.asarray(center, np.float64)

    def color(pts):
        d = pts - center
        norm = np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-9)
        return 0.5 + 0.5 * d / norm

    return color


def make_procedural_scene(kind: str, **params) -> ProceduralScene:
    """Supported kinds: sphere, two_spheres, slab, gaussian, uniform, empty."""
    if kind == "sphere":
        center = np.asarray(params.get("center", (0.0, 0.0, 0.0)), np.float64)
        radius = float(params.get("radius", 0.5))
        sigma = float(params.get("sigma", 40.0))
        if radius <= 0 or sigma < 0:
            raise DomainError("sphere needs radius > 0 and sigma >= 0")
        density = lambda pts: np.where(
            np.linalg.norm(pts - center, axis=-1) <= radius, sigma, 0.0)
        return ProceduralScene(kind, density, _sphere_color(center))

    if kind == "two_spheres":
        c1 = np.asarray(params.get("center_a", (-0.35, 0.0, 0.0)), np.float64)
        c2 = np.asarray(params.get("center_b", (0.35, 0.1, 0.1)), np.float64)
        r1 = float(params.get("radius_a", 0.3))
        r2 = float(params.get("radius_b", 0.25))
        sigma = float(params.get("sigma", 40.0))

        def density(pts):
            in1 = np.linalg.norm(pts - c1, axis=-1) <= r1
            in2 = np.linalg.norm(pts - c2, axis=-1) <= r2
            return np.where(in1 | in2, sigma, 0.0)

        def color(pts):
            in1 = np.linalg.norm(pts - c1, axis=-1) <= r1
            base = np.where(in1[:, None], [0.9, 0.3, 0.2], [0.2, 0.4, 0.9])
            return base + 0.1 * np.clip(pts[:, 1:2], -1, 1)

        return ProceduralScene(kind, density, lambda p: np.clip(color(p), 0, 1))

    if kind == "slab":
        axis = int(params.get("axis", 2))
        lo = float(params.get("lo", 0.2))
        hi = float(params.get("hi", 0.5))
        sigma = float(params.get("sigma", 40.0))
        if not (0 <= axis <= 2 and lo < hi):
            raise DomainError("slab needs axis in {0,1,2} and lo < hi")
        density = lambda pts: np.where(
            (pts[:, axis] >= lo) & (pts[:, axis] <= hi), sigma, 0.0)
        color = lambda pts: np.clip(0.5 + 0.4 * pts[:, [0, 1, 2]], 0.0, 1.0)
        return ProceduralScene(kind, density, color)

    if kind == "gaussian":
        center = np.asarray(params.get("center", (0.0, 0.0, 0.0)), np.float64)
        std = float(params.get("std", 0.3))
        peak = float(params.get("peak", 20.0))
        if std <= 0 or peak < 0:
            raise DomainError("gaussian needs std > 0 and peak >= 0")
        density = lambda pts: peak * np.exp(
            -np.sum((pts - center) ** 2, axis=-1) / (2.0 * std * std))
        return ProceduralScene(kind, density, _sphere_color(center))

    if kind == "uniform":
        sigma = float(params.get("sigma", 2.0))
        col = np.asarray(params.get("color", (0.7, 0.6, 0.5)), np.float64)
        density = lambda pts: np.full(pts.shape[0], sigma)
        color = lambda pts: np.broadcast_to(col, (pts.shape[0], 3)).copy()
        return ProceduralScene(kind, density, color)

    if kind == "empty":
        return ProceduralScene(kind, lambda pts: np.zeros(pts.shape[0]),
                               lambda pts: np.zeros((pts.shape[0], 3)))

    raise DomainError(f"unknown procedural scene kind {kind!r}")


def oracle_render(scene: ProceduralScene, camera: Camera, n_features: int = 8,
                  n_quad: int = 2048, background=(0.0, 0.0, 0.0),
                  rows_per_chunk: int = 8) -> RenderOutput:
    """Dense-quadrature reference render of a procedural scene.

    Midpoint samples at `n_quad` depths per ray through the same
    compositing rule as the main renderer; float64 throughout.
    """
    rays = camera.rays()
    h, w = rays.directions.shape[:2]
    near, far = rays.near, rays.far
    ts_row = near + (np.arange(n_quad) + 0.5) / n_quad * (far - near)

    feature = np.empty((h, w, n_features))
    depth = np.empty((h, w))
    opacity = np.empty((h, w))
    for r0 in range(0, h, rows_per_chunk):
        r1 = min(r0 + rows_per_chunk, h)
        o = rays.origins[r0:r1].reshape(-1, 3)
        d = rays.directions[r0:r1].reshape(-1, 3)
        ts = np.broadcast_to(ts_row, (o.shape[0], n_quad))
        pts = (o[:, None, :] + ts[..., None] * d[:, None, :]).reshape(-1, 3)
        sig = scene.density(pts).reshape(o.shape[0], n_quad)
        feats = scene.features(pts, n_features).reshape(o.shape[0], n_quad, n_features)
        pix, dep, acc, _ = _composite_batch(sig, feats, ts, far, background)
        feature[r0:r1] = pix.reshape(r1 - r0, w, n_features)
        depth[r0:r1] = dep.reshape(r1 - r0, w)
        opacity[r0:r1] = acc.reshape(r1 - r0, w)
    return RenderOutput(np.moveaxis(feature, -1, 0), depth, opacity)


def oracle_ray(scene: ProceduralScene, origin, direction, near: float, far: float,
               n_quad: int = 100_000, n_features: int = 3):
    """Single-ray quadrature -> (feature, depth, opacity)."""
    o = np.asarray(origin, np.float64)
    d = np.asarray(direction, np.float64)
    ts = near + (np.arange(n_quad) + 0.5) / n_quad * (far - near)
    pts = o[None, :] + ts[:, None] * d[None, :]
    sig = scene.density(pts)[None, :]
    feats = scene.features(pts, n_features)[None, :, :]
    pix, dep, acc, _ = _composite_batch(sig, feats, ts[None, :], far, (0, 0, 0))
    return pix[0], float(dep[0]), float(acc[0])


@dataclass(frozen=True)
class DistillConfig:
    """Knobs of the desk-scale distillation loop."""

    seed: int = 0
    resolution: int = 16
    channels: int = 8
    hidden: tuple = (16,)
    n_features: int = 8
    image_size: int = 16
    n_samples: int = 16
    camera_focal: float = 2.4   # frames the unit sphere, little empty border
    plane_learning_rate: float = 30.0
    decoder_learning_rate: float = 1.0
    momentum: float = 0.9
    init_scale: float = 0.1
    density_bias_init: float = -0.25  # thin initial fog: dense enough for
                                      # gradient flow, thin enough to clear
    oracle_quad: int = 1024
    loss: DistillLossConfig = field(default_factory=DistillLossConfig)
    stratified: bool = True
    threads: int = 1


@dataclass(frozen=True)
class DistillResult:
    params: ParameterSet
    trace: np.ndarray       # (steps + 1, 4): total, color, feature, triplane
    cameras: tuple
    targets: tuple

    @property
    def grid(self) -> TriplaneGrid:
        return self.params.to_grid()

    @property
    def decoder(self) -> FieldDecoder:
        return self.params.to_decoder()


def sample_supervision_cameras(cfg: DistillConfig, n_views: int):
    """View 0 from the reference-camera distribution, the rest multiview."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed,
                                                       spawn_key=(0,)))
    aug = AugmentationConfig.fixed(focal_mean=cfg.camera_focal)
    size = (cfg.image_size, cfg.image_size)
    cams = []
    for v in range(n_views):
        if v == 0:
            pose, intr = sample_reference_camera(aug, rng, size)
        else:
            pose, intr = sample_multiview_camera(aug, rng, size)
        cams.append(Camera.from_orbit(pose, intr, box_scale=1.0))
    return tuple(cams)


def distill_fit(scene: ProceduralScene, n_views: int, steps: int,
                cfg: DistillConfig = None, cameras=None) -> DistillResult:
    """Fit a triplane + decoder to oracle renders of a procedural scene.

    Momentum SGD; the loss trace holds one row per evaluated step plus the
    final state (``steps + 1`` rows). Supervision cameras are sampled from
    the augmentation distributions (view 0 reference, the rest multiview)
    unless an explicit camera list is given. Aborts with DistillDivergence
    if the loss exceeds 10x its initial value.
    """
    cfg = cfg or DistillConfig()
    if n_views < 2:
        raise DomainError("need n_views >= 2 (reference + multiview)")
    if steps < 0:
        raise DomainError("steps must be >= 0")

    cams = tuple(cameras) if cameras is not None \
        else sample_supervision_cameras(cfg, n_views)
    if len(cams) != n_views:
        raise DomainError(f"got {len(cams)} cameras for n_views={n_views}")
    targets = tuple(oracle_render(scene, cam, cfg.n_features, cfg.oracle_quad)
                    for cam in cams)

    init_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed,
                                                            spawn_key=(1,)))
    grid = TriplaneGrid.random(init_rng, cfg.resolution, cfg.channels,
                               scale=cfg.init_scale)
    dec = FieldDecoder.make(init_rng, cfg.channels, cfg.hidden, cfg.n_features)
    params = ParameterSet.from_grid_decoder(grid, dec)
    params.bias(params.n_layers - 1)[0] = cfg.density_bias_init

    sampling = SamplingConfig(n_coarse=cfg.n_samples, n_fine=0,
                              stratified=cfg.stratified,
                              width=cfg.image_size, height=cfg.image_size)

    # plane features carry much smaller per-value gradients than decoder
    # parameters (loss means divide by the pixel count), so they get their
    # own step size
    lr = np.full(params.layout.size, cfg.decoder_learning_rate)
    lr[:params.layout.plane_size] = cfg.plane_learning_rate
    velocity = np.zeros_like(params.values)
    trace = np.empty((steps + 1, 4))
    initial = None
    for step in range(steps + 1):
        step_seed = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2, step))
        parts, grad = loss_and_grad(params, cams, targets, cfg.loss, sampling,
                                    seed=step_seed, threads=cfg.threads)
        trace[step] = (parts.total, parts.color, parts.feature, parts.triplane)
        if initial is None:
            initial = parts.total
        elif parts.total > 10.0 * initial:
            raise DistillDivergence(
                f"step {step}: loss {parts.total:.6g} > 10x initial {initial:.6g}")
        if step == steps:
            break
        velocity = cfg.momentum * velocity - lr * grad.values
        params = ParameterSet(params.layout, params.values + velocity)

    return DistillResult(params, trace, cams, targets)


def trace_to_csv(trace: np.ndarray) -> str:
    """Loss trace as CSV: step,loss,loss_col,loss_feat,loss_tri."""
    lines = ["step,loss,loss_col,loss_feat,loss_tri"]
    for i, row in enumerate(trace):
        lines.append(f"{i}," + ",".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def write_trace_csv(path, trace: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(trace_to_csv(trace))
