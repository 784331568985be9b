"""Two-pass volumetric rendering of a triplane field.

Sample `i` along a ray owns the interval ``[t_i, t_{i+1})``; the last
interval closes at ``far``. Opacity per sample is
``alpha_i = 1 - exp(-sigma_i * delta_i)`` and transmittance is the exp of
the negative running optical depth, so the per-sample weights telescope:
``w_i = exp(-S_i) - exp(-S_{i+1})`` with ``S`` the prefix sum of
``sigma * delta``. The pixel feature is the weighted feature sum with the
background composited into the color channels only; depth is the
weight-averaged sample depth (``far`` where opacity is exactly zero).

Determinism: every random draw is taken from one generator in a documented
order before any pixel work starts, the image is processed in fixed row
chunks, and all per-sample math is bitwise independent of batch size, so
renders are identical for any thread count and equal to a per-pixel
evaluation.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .camera import Camera, Intrinsics, generate_rays
from .errors import DomainError
from .triplane import FieldDecoder, TriplaneGrid, query_points

ROWS_PER_CHUNK = 8
_DEPTH_EPS = 1e-12


@dataclass(frozen=True)
class SamplingConfig:
    n_coarse: int = 48
    n_fine: int = 48
    stratified: bool = True
    width: int = 128
    height: int = 128
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.n_coarse < 1:
            raise DomainError("n_coarse must be >= 1")
        if self.n_fine < 0:
            raise DomainError("n_fine must be >= 0")
        if self.width < 1 or self.height < 1:
            raise DomainError("render resolution must be >= 1")
        if len(self.background) != 3:
            raise DomainError("background must be an RGB triple")


@dataclass(frozen=True)
class RenderOutput:
    feature: np.ndarray  # (F, H, W)
    depth: np.ndarray    # (H, W)
    opacity: np.ndarray  # (H, W)

    @property
    def rgb(self) -> np.ndarray:
        """First three feature channels."""
        return self.feature[:3]


def stratified_ts(near: float, far: float, n: int, stratified: bool = False,
                  rng: np.random.Generator = None) -> np.ndarray:
    """n strictly increasing depths in [near, far].

    Deterministic bin midpoints when `stratified` is off; one uniform draw
    inside each of the n equal bins when on.
    """
    if not near < far:
        raise DomainError("need near < far")
    if n < 1:
        raise DomainError("need n >= 1")
    if stratified:
        if rng is None:
            raise DomainError("stratified sampling needs a generator")
        u = rng.random(n)
    else:
        u = np.full(n, 0.5)
    return near + (np.arange(n) + u) / n * (far - near)


def _ts_from_jitter(near, far, n, jitter) -> np.ndarray:
    """Vectorized stratified_ts given precomputed jitter of shape (..., n)."""
    return near + (np.arange(n) + jitter) / n * (far - near)


def importance_resample(ts, weights, n: int, rng: np.random.Generator):
    """Draw n depths from the piecewise-constant density induced by weights.

    Bin k spans from the midpoint before t_k to the midpoint after it (the
    first and last bins end at t_0 and t_{-1}). Returns (sorted depths,
    fallback flag); non-positive or non-finite total weight falls back to
    uniform stratified sampling over [t_0, t_{-1}].
    """
    ts = np.asarray(ts, np.float64)
    w = np.asarray(weights, np.float64)
    if ts.ndim != 1 or ts.shape != w.shape:
        raise DomainError("ts and weights must be 1-d and equal length")
    if ts.shape[0] < 2 or np.any(np.diff(ts) < 0):
        raise DomainError("ts must be sorted with at least 2 entries")
    if np.any(w < 0):
        raise DomainError("weights must be non-negative")
    u = rng.random(n)
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        return ts[0] + (np.arange(n) + u) / n * (ts[-1] - ts[0]), True
    edges = _bin_edges(ts[None, :])[0]
    return _inverse_cdf(edges[None, :], w[None, :], np.sort(u)[None, :])[0], False


def _bin_edges(ts) -> np.ndarray:
    """(..., n) sample depths -> (..., n+1) bin edges at inter-sample midpoints."""
    mids = 0.5 * (ts[..., 1:] + ts[..., :-1])
    return np.concatenate([ts[..., :1], mids, ts[..., -1:]], axis=-1)


def _inverse_cdf(edges, w, u) -> np.ndarray:
    """Batched inverse-CDF draw: edges (P, n+1), w (P, n), u (P, m) sorted."""
    total = w.sum(axis=-1, keepdims=True)
    cdf = np.cumsum(w / total, axis=-1)
    cdf = np.concatenate([np.zeros_like(cdf[..., :1]), cdf], axis=-1)  # (P, n+1)
    # index of the bin each u lands in: number of interior cdf values < u
    idx = (u[..., :, None] >= cdf[..., None, 1:-1]).sum(axis=-1)  # (P, m) in [0, n-1]
    lo = np.take_along_axis(cdf, idx, axis=-1)
    hi = np.take_along_axis(cdf, idx + 1, axis=-1)
    e_lo = np.take_along_axis(edges, idx, axis=-1)
    e_hi = np.take_along_axis(edges, idx + 1, axis=-1)
    span = np.maximum(hi - lo, _DEPTH_EPS)
    return e_lo + (u - lo) / span * (e_hi - e_lo)


def composite_from_alphas(alphas, features, ts, background):
    """Alpha-composite precomputed per-sample opacities (single ray).

    Inserting an event with alpha exactly 0 anywhere leaves the result
    unchanged: it multiplies 1 into every transmittance and adds weight 0.
    """
    alphas = np.asarray(alphas, np.float64)
    trans = np.cumprod(np.concatenate([[1.0], 1.0 - alphas[:-1]]))
    w = trans * alphas
    return _finish_composite(w[None, :], np.asarray(features, np.float64)[None, :, :],
                             np.asarray(ts, np.float64)[None, :], np.inf, background)


def alphas_from_sigmas(sigmas, ts, far: float) -> np.ndarray:
    """Per-sample opacities from densities and interval widths (single ray)."""
    sigmas = np.asarray(sigmas, np.float64)
    ts = np.asarray(ts, np.float64)
    delta = np.concatenate([np.diff(ts), [far - ts[-1]]])
    return -np.expm1(-sigmas * delta)


def composite(sigmas, features, ts, far: float, background=(0.0, 0.0, 0.0)):
    """Volume-render one ray -> (pixel feature (F,), depth, opacity).

    `sigmas` are non-negative densities per unit length at the sorted
    depths `ts`; `features` is (n, F) with color in channels 0..2.
    """
    sigmas = np.asarray(sigmas, np.float64)
    features = np.asarray(features, np.float64)
    ts = np.asarray(ts, np.float64)
    if ts.ndim != 1 or np.any(np.diff(ts) < 0):
        raise DomainError("ts must be sorted")
    if sigmas.shape != ts.shape or features.shape[:1] != ts.shape:
        raise DomainError("sigmas/features/ts lengths disagree")
    if np.any(sigmas < 0):
        raise DomainError("densities must be >= 0")
    pix, depth, acc, _ = _composite_batch(sigmas[None, :], features[None, :, :],
                                          ts[None, :], float(far), background)
    return pix[0], float(depth[0]), float(acc[0])


def _composite_batch(sig, feats, ts, far, background):
    """Batched compositing core: sig (P, n), feats (P, n, F), ts (P, n)."""
    delta = np.concatenate([np.diff(ts, axis=-1), far - ts[..., -1:]], axis=-1)
    optical = sig * delta
    prefix = np.cumsum(optical, axis=-1)
    trans = np.exp(-np.concatenate([np.zeros_like(prefix[..., :1]),
                                    prefix[..., :-1]], axis=-1))
    alpha = -np.expm1(-optical)
    w = trans * alpha
    return _finish_composite(w, feats, ts, far, background)


def _finish_composite(w, feats, ts, far, background):
    acc = w.sum(axis=-1)
    pix = (w[..., None] * feats).sum(axis=-2)
    bg = np.asarray(background, np.float64)
    pix[..., :3] += (1.0 - acc)[..., None] * bg
    num = (w * ts).sum(axis=-1)
    depth = np.where(acc > 0.0, num / np.maximum(acc, _DEPTH_EPS), far)
    return pix, depth, acc, w


def sampling_noise(seed: int, height: int, width: int, cfg: SamplingConfig):
    """All random draws a render consumes, in their documented order.

    One generator seeded from `seed` produces the coarse jitter array
    first (if stratified) and the fine inverse-CDF uniforms second, each
    shaped (H, W, n). Exposed so a per-pixel evaluation can slice the
    exact values the full render uses.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    jitter = rng.random((height, width, cfg.n_coarse)) if cfg.stratified else None
    u_fine = rng.random((height, width, cfg.n_fine)) if cfg.n_fine > 0 else None
    return jitter, u_fine


def _render_chunk(grid, dec, rays, cfg, jitter, u_fine, row0, row1):
    """Render rows [row0, row1) -> (feature (P, F), depth (P,), opacity (P,))."""
    h_w = rays.directions.shape[1]
    origins = rays.origins[row0:row1].reshape(-1, 3)
    dirs = rays.directions[row0:row1].reshape(-1, 3)
    near, far = rays.near, rays.far
    p = origins.shape[0]
    nc = cfg.n_coarse

    if jitter is None:
        jit = np.full((p, nc), 0.5)
    else:
        jit = jitter[row0:row1].reshape(p, nc)
    ts = _ts_from_jitter(near, far, nc, jit)

    sig, feats = _query_ray_points(grid, dec, origins, dirs, ts)
    pix, depth, acc, w = _composite_batch(sig, feats, ts, far, cfg.background)

    if cfg.n_fine > 0:
        u = np.sort(u_fine[row0:row1].reshape(p, cfg.n_fine), axis=-1)
        edges = _bin_edges(ts)
        w_safe = np.where(_degenerate_rows(w)[:, None], np.ones_like(w), w)
        ts_fine = _inverse_cdf(edges, w_safe, u)
        sig_f, feats_f = _query_ray_points(grid, dec, origins, dirs, ts_fine)

        ts_all = np.concatenate([ts, ts_fine], axis=-1)
        order = np.argsort(ts_all, axis=-1, kind="stable")
        ts_u = np.take_along_axis(ts_all, order, axis=-1)
        sig_u = np.take_along_axis(np.concatenate([sig, sig_f], -1), order, -1)
        feats_u = np.take_along_axis(np.concatenate([feats, feats_f], 1),
                                     order[..., None], 1)
        pix, depth, acc, _ = _composite_batch(sig_u, feats_u, ts_u, far, cfg.background)

    return pix, depth, acc


def _degenerate_rows(w) -> np.ndarray:
    total = w.sum(axis=-1)
    return ~np.isfinite(total) | (total <= 0.0)


def _query_ray_points(grid, dec, origins, dirs, ts):
    """Query the field at origins + ts * dirs; points in float32."""
    pts = (origins[:, None, :] + ts[..., None] * dirs[:, None, :]).astype(np.float32)
    p, n = ts.shape
    sig, feats = query_points(grid.planes, dec, pts.reshape(p * n, 3), grid.box_scale)
    return (sig.reshape(p, n).astype(np.float64),
            feats.reshape(p, n, -1).astype(np.float64))


def render(grid: TriplaneGrid, dec: FieldDecoder, camera: Camera,
           cfg: SamplingConfig = None, seed: int = 0, threads: int = 1) -> RenderOutput:
    """Render the field from a camera.

    Coarse stratified pass, importance resampling of the coarse weights,
    then one composite over the sorted union of both sample sets. The
    result is bit-identical for any `threads` value.
    """
    cfg = cfg or SamplingConfig()
    if dec.in_width != grid.channels:
        raise DomainError(
            f"decoder input width {dec.in_width} != grid channels {grid.channels}")
    intr = camera.intrinsics
    if (intr.width, intr.height) != (cfg.width, cfg.height):
        intr = Intrinsics(focal=intr.focal, cx=intr.cx, cy=intr.cy,
                          width=cfg.width, height=cfg.height)
    rays = generate_rays(camera.c2w, intr, camera.near, camera.far)
    h, w = cfg.height, cfg.width
    jitter, u_fine = sampling_noise(seed, h, w, cfg)

    n_feat = dec.n_features
    feature = np.empty((h, w, n_feat), np.float32)
    depth = np.empty((h, w), np.float32)
    opacity = np.empty((h, w), np.float32)

    chunks = [(r, min(r + ROWS_PER_CHUNK, h)) for r in range(0, h, ROWS_PER_CHUNK)]

    def run(chunk):
        r0, r1 = chunk
        pix, dep, acc = _render_chunk(grid, dec, rays, cfg, jitter, u_fine, r0, r1)
        feature[r0:r1] = pix.reshape(r1 - r0, w, n_feat).astype(np.float32)
        depth[r0:r1] = dep.reshape(r1 - r0, w).astype(np.float32)
        opacity[r0:r1] = acc.reshape(r1 - r0, w).astype(np.float32)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, chunks))
    else:
        for c in chunks:
            run(c)

    return RenderOutput(np.moveaxis(feature, -1, 0), depth, opacity)


def upsample_bilinear(img: np.ndarray, factor: int = 4) -> np.ndarray:
    """Separable bilinear upsampling of a (C, H, W) image.

    Top-left anchored: output (factor*i, factor*j) reproduces input (i, j);
    source coordinates past the last node clamp to the border.
    """
    img = np.asarray(img)
    if img.ndim != 3:
        raise DomainError("expected a (C, H, W) image")
    c, h, w = img.shape

    def axis_coords(n):
        g = np.arange(n * factor, dtype=np.float64) / factor
        i0 = np.minimum(g.astype(np.intp), n - 1)
        i1 = np.minimum(i0 + 1, n - 1)
        return i0, i1, (g - i0)

    j0, j1, fy = axis_coords(h)
    rows = img[:, j0, :] * (1.0 - fy)[None, :, None] + img[:, j1, :] * fy[None, :, None]
    i0, i1, fx = axis_coords(w)
    out = rows[:, :, i0] * (1.0 - fx)[None, None, :] + rows[:, :, i1] * fx[None, None, :]
    return out.astype(img.dtype) if img.dtype.kind == "f" else out


def downsample_stride(img: np.ndarray, factor: int = 4) -> np.ndarray:
    """Inverse of the upsampling alignment: take every factor-th node."""
    return img[:, ::factor, ::factor]
