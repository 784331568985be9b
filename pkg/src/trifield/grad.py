"""Analytic gradients through the render pipeline, with finite-difference checks.

The trainable state (plane features plus decoder weights and biases) lives
in a flat float64 vector behind ``ParameterSet``. ``loss_and_grad``
renders each supervision view at frozen sample locations -- the stratified
depths depend only on the seed, never on the parameters, so the loss is a
deterministic, finite-differencable function -- and reverse-accumulates
exact gradients through compositing, the decoder MLP, plane aggregation
and bilinear interpolation. Everything here runs in float64; the float32
pipeline is only a storage/render format.

L1 terms use subgradient 0 at ties. Gradient accumulation uses fixed
reduction orders (bincount scatters, ordered view sums) so repeated runs
are bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Intrinsics, generate_rays
from .errors import DomainError
from .render import SamplingConfig, _ts_from_jitter
from .triplane import (FieldDecoder, TriplaneGrid, gather_mean_features, sigmoid,
                       softplus, triplane_taps)


class NonFiniteLossError(ArithmeticError):
    """A loss term evaluated to a non-finite value; names the term."""


@dataclass(frozen=True)
class ParameterLayout:
    """Shapes of the trainable state."""

    resolution: int
    channels: int
    box_scale: float
    layer_widths: tuple
    density_activation: str = "softplus"
    feature_activation: str = "sigmoid"

    @property
    def plane_size(self) -> int:
        return 3 * self.resolution * self.resolution * self.channels

    def index_map(self):
        """Ordered (name, start, stop) spans covering every value once."""
        spans = [("planes", 0, self.plane_size)]
        off = self.plane_size
        for i, (a, b) in enumerate(zip(self.layer_widths[:-1], self.layer_widths[1:])):
            spans.append((f"weight{i}", off, off + a * b))
            off += a * b
            spans.append((f"bias{i}", off, off + b))
            off += b
        return spans

    @property
    def size(self) -> int:
        return self.index_map()[-1][2]


@dataclass
class ParameterSet:
    """Flat float64 view over (triplane values, decoder weights/biases)."""

    layout: ParameterLayout
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, np.float64).ravel()
        if self.values.size != self.layout.size:
            raise DomainError(
                f"expected {self.layout.size} values, got {self.values.size}")

    @classmethod
    def from_grid_decoder(cls, grid: TriplaneGrid, dec: FieldDecoder) -> "ParameterSet":
        layout = ParameterLayout(grid.resolution, grid.channels, grid.box_scale,
                                 dec.layer_widths, dec.density_activation,
                                 dec.feature_activation)
        parts = [np.asarray(grid.planes, np.float64).ravel()]
        for w, b in zip(dec.weights, dec.biases):
            parts.append(np.asarray(w, np.float64).ravel())
            parts.append(np.asarray(b, np.float64).ravel())
        return cls(layout, np.concatenate(parts))

    @classmethod
    def zeros_like(cls, other: "ParameterSet") -> "ParameterSet":
        return cls(other.layout, np.zeros(other.layout.size))

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.layout, self.values.copy())

    def flatten(self) -> np.ndarray:
        return self.values.copy()

    def unflatten(self, vec: np.ndarray) -> "ParameterSet":
        return ParameterSet(self.layout, np.asarray(vec, np.float64).copy())

    def planes(self) -> np.ndarray:
        lay = self.layout
        r, c = lay.resolution, lay.channels
        return self.values[:lay.plane_size].reshape(3, r, r, c)

    def _span(self, name: str):
        for n, a, b in self.layout.index_map():
            if n == name:
                return a, b
        raise KeyError(name)

    def weight(self, i: int) -> np.ndarray:
        a, b = self._span(f"weight{i}")
        wa, wb = self.layout.layer_widths[i], self.layout.layer_widths[i + 1]
        return self.values[a:b].reshape(wa, wb)

    def bias(self, i: int) -> np.ndarray:
        a, b = self._span(f"bias{i}")
        return self.values[a:b]

    @property
    def n_layers(self) -> int:
        return len(self.layout.layer_widths) - 1

    def to_grid(self) -> TriplaneGrid:
        return TriplaneGrid(self.planes().astype(np.float32), self.layout.box_scale)

    def to_decoder(self) -> FieldDecoder:
        ws = tuple(self.weight(i).astype(np.float32) for i in range(self.n_layers))
        bs = tuple(self.bias(i).astype(np.float32) for i in range(self.n_layers))
        return FieldDecoder(ws, bs, self.layout.density_activation,
                            self.layout.feature_activation)


@dataclass(frozen=True)
class DistillLossConfig:
    """Weights of the distillation loss terms.

    Per-view L1 color and feature-image terms are scaled by the view role
    (0.1 for the reference view, 0.025 for multiview supervision); the
    triplane L1 term applies only when a target triplane is supplied.
    """

    color_weight: float = 1.0
    feature_weight: float = 1.0
    triplane_weight: float = 1.0
    ref_view_weight: float = 0.1
    mv_view_weight: float = 0.025

    def __post_init__(self):
        for name in ("color_weight", "feature_weight", "triplane_weight",
                     "ref_view_weight", "mv_view_weight"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0")


@dataclass(frozen=True)
class LossParts:
    total: float
    color: float
    feature: float
    triplane: float


def _target_feature(target) -> np.ndarray:
    arr = target.feature if hasattr(target, "feature") else target
    return np.asarray(arr, np.float64)


def _view_seed_sequences(seed, n_views):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(n_views)


def _check_finite(value: float, term: str) -> float:
    if not np.isfinite(value):
        raise NonFiniteLossError(f"loss term {term!r} is non-finite ({value})")
    return float(value)


def loss_and_grad(params: ParameterSet, cameras, targets,
                  cfg: DistillLossConfig = None, sampling: SamplingConfig = None,
                  seed=0, target_planes=None, threads: int = 1):
    """Distillation loss and its exact gradient -> (LossParts, ParameterSet).

    One camera per target feature image (F, H, W); view 0 is weighted as
    the reference view, the rest as multiview supervision. Sample depths
    are stratified draws derived only from `seed`, so repeated evaluations
    at different parameters integrate over identical rays (`sampling` must
    have ``n_fine == 0``: importance-placed samples would move with the
    parameters and break finite differencing). Views may be evaluated on
    `threads` workers; per-view gradients are merged in view order, so the
    result does not depend on the thread count.
    """
    cfg = cfg or DistillLossConfig()
    # width/height of the config are unused here; view sizes come from targets
    sampling = sampling or SamplingConfig(n_coarse=24, n_fine=0)
    if sampling.n_fine != 0:
        raise DomainError("loss path requires n_fine == 0 (frozen sample locations)")
    if len(cameras) != len(targets) or len(cameras) == 0:
        raise DomainError("need one camera per target, at least one view")

    lay = params.layout
    planes = params.planes()
    ws = [params.weight(i) for i in range(params.n_layers)]
    bs = [params.bias(i) for i in range(params.n_layers)]
    seeds = _view_seed_sequences(seed, len(cameras))

    def view_job(v):
        lam = cfg.ref_view_weight if v == 0 else cfg.mv_view_weight
        return _view_loss_grad(planes, ws, bs, lay, cameras[v], targets[v],
                               lam, cfg, sampling, seeds[v])

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(view_job, range(len(cameras))))
    else:
        results = [view_job(v) for v in range(len(cameras))]

    grad = ParameterSet.zeros_like(params)
    dplanes = grad.planes()
    loss_col = 0.0
    loss_feat = 0.0
    for lcol_v, lfeat_v, dplanes_v, dws_v, dbs_v in results:
        loss_col += _check_finite(lcol_v, "color")
        loss_feat += _check_finite(lfeat_v, "feature")
        dplanes += dplanes_v
        for i in range(params.n_layers):
            grad.weight(i)[:] += dws_v[i]
            grad.bias(i)[:] += dbs_v[i]

    loss_tri = 0.0
    if target_planes is not None:
        res = planes - np.asarray(target_planes, np.float64)
        loss_tri = _check_finite(cfg.triplane_weight * np.abs(res).mean(), "triplane")
        dplanes += cfg.triplane_weight * np.sign(res) / res.size

    total = _check_finite(loss_col + loss_feat + loss_tri, "total")
    return LossParts(total, loss_col, loss_feat, loss_tri), grad


def _view_loss_grad(planes, ws, bs, lay, cam, target, lam, cfg, sampling, seed_v):
    """Loss terms and gradient contributions of one supervision view."""
    tgt = _target_feature(target)
    n_feat, h, w = tgt.shape
    if n_feat != lay.layer_widths[-1] - 1:
        raise DomainError(f"target has {n_feat} channels, "
                          f"decoder emits {lay.layer_widths[-1] - 1}")
    intr = cam.intrinsics
    if (intr.width, intr.height) != (w, h):
        intr = Intrinsics(focal=intr.focal, cx=intr.cx, cy=intr.cy,
                          width=w, height=h)
    rays = generate_rays(cam.c2w, intr, cam.near, cam.far)
    origins = rays.origins.reshape(-1, 3)
    dirs = rays.directions.reshape(-1, 3)
    n = sampling.n_coarse
    if sampling.stratified:
        jit = np.random.default_rng(seed_v).random((h * w, n))
    else:
        jit = np.full((h * w, n), 0.5)
    ts = _ts_from_jitter(rays.near, rays.far, n, jit)
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]

    pix, cache = _field_forward(planes, ws, bs, lay, pts.reshape(-1, 3),
                                ts, rays.far, sampling.background)

    tgt_flat = tgt.reshape(n_feat, -1).T  # (P, F)
    res_feat = pix - tgt_flat
    res_col = res_feat[:, :3]
    lcol_v = lam * cfg.color_weight * np.abs(res_col).mean()
    lfeat_v = lam * cfg.feature_weight * np.abs(res_feat).mean()

    g_pix = lam * cfg.feature_weight * np.sign(res_feat) / res_feat.size
    g_pix[:, :3] += lam * cfg.color_weight * np.sign(res_col) / res_col.size

    dplanes = np.zeros_like(planes)
    dws = [np.zeros_like(wm) for wm in ws]
    dbs = [np.zeros_like(bv) for bv in bs]
    _field_backward(g_pix, cache, dplanes, dws, dbs)
    return lcol_v, lfeat_v, dplanes, dws, dbs


def _field_forward(planes, ws, bs, lay, pts, ts, far, background):
    """Query + composite with everything the backward pass needs cached."""
    taps = triplane_taps(planes.shape[1], pts, lay.box_scale)
    agg = gather_mean_features(planes, taps)

    # BLAS affines are fine here: the gradient path only promises
    # run-to-run determinism, not batch-size invariance like the renderer
    pre = []  # pre-activation per hidden layer
    acts = [agg]
    h = agg
    for wmat, bvec in zip(ws[:-1], bs[:-1]):
        z = h @ wmat + bvec
        pre.append(z)
        h = softplus(z)
        acts.append(h)
    out = h @ ws[-1] + bs[-1]
    sigma_raw = out[:, 0]
    sigma = softplus(sigma_raw)
    feats = sigmoid(out[:, 1:])

    p_rays, n = ts.shape
    sig_r = sigma.reshape(p_rays, n)
    feats_r = feats.reshape(p_rays, n, -1)
    delta = np.concatenate([np.diff(ts, axis=-1), far - ts[..., -1:]], axis=-1)
    optical = sig_r * delta
    prefix = np.cumsum(optical, axis=-1)
    trans = np.exp(-np.concatenate([np.zeros_like(prefix[..., :1]),
                                    prefix[..., :-1]], axis=-1))
    alpha = -np.expm1(-optical)
    wgt = trans * alpha
    pix = (wgt[:, None, :] @ feats_r)[:, 0, :]
    bg = np.asarray(background, np.float64)
    pix[:, :3] += (1.0 - wgt.sum(axis=-1))[:, None] * bg

    cache = dict(taps=taps, acts=acts, pre=pre, sigma_raw=sigma_raw, feats=feats,
                 feats_r=feats_r, trans=trans, wgt=wgt, delta=delta, bg=bg,
                 ws=ws, shape=(p_rays, n))
    return pix, cache


def _field_backward(g_pix, cache, dplanes, dws, dbs):
    p_rays, n = cache["shape"]
    feats_r, trans, wgt = cache["feats_r"], cache["trans"], cache["wgt"]
    bg = cache["bg"]

    # weights: d pixel / d w_i gathers the sample feature minus the
    # background share leaking through (1 - sum w)
    q = (feats_r @ g_pix[:, :, None])[:, :, 0] - (g_pix[:, :3] * bg).sum(-1)[:, None]
    d_feats = wgt[..., None] * g_pix[:, None, :]
    qw = q * wgt
    suffix = np.cumsum(qw[:, ::-1], axis=-1)[:, ::-1] - qw
    d_optical = q * (trans - wgt) - suffix
    d_sigma = (d_optical * cache["delta"]).reshape(-1)

    feats = cache["feats"]
    sigma_raw = cache["sigma_raw"]
    d_out = np.empty((feats.shape[0], feats.shape[1] + 1))
    d_out[:, 0] = d_sigma * sigmoid(sigma_raw)
    d_out[:, 1:] = d_feats.reshape(feats.shape) * feats * (1.0 - feats)

    acts, pre, ws = cache["acts"], cache["pre"], cache["ws"]
    d_h = d_out
    for i in range(len(ws) - 1, -1, -1):
        dws[i] += acts[i].T @ d_h
        dbs[i] += d_h.sum(axis=0)
        if i == 0:
            d_agg = d_h @ ws[0].T
        else:
            d_h = (d_h @ ws[i].T) * sigmoid(pre[i - 1])

    taps = cache["taps"]
    c = dplanes.shape[3]
    d_plane_val = np.broadcast_to(d_agg / 3.0, (3, taps.n_points, c)).reshape(-1, c)
    ch_offsets = np.arange(c, dtype=np.intp)
    idx = np.concatenate([(cells * c)[:, None] + ch_offsets
                          for cells in taps.cells], axis=0).ravel()
    vals = np.concatenate([w[:, None] * d_plane_val
                           for w in taps.corner_weights], axis=0).ravel()
    flat = dplanes.reshape(-1)
    flat += np.bincount(idx, weights=vals, minlength=flat.size)


@dataclass(frozen=True)
class FiniteDiffEntry:
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass(frozen=True)
class FiniteDiffReport:
    max_rel_error: float
    entries: tuple

    def __str__(self):
        worst = max(self.entries, key=lambda e: e.rel_error)
        return (f"finite-diff check over {len(self.entries)} coordinates: "
                f"max rel error {self.max_rel_error:.3e} at index {worst.index} "
                f"(analytic {worst.analytic:.6e}, numeric {worst.numeric:.6e})")


def finite_diff_check(fn, params: np.ndarray, h: float = 1e-5,
                      n_probe: int = 200, rng: np.random.Generator = None,
                      indices=None) -> FiniteDiffReport:
    """Central-difference check of an analytic gradient.

    `fn(x)` must deterministically return ``(loss, grad)`` for a flat
    float64 vector. Probes `n_probe` random coordinates (or the given
    `indices`) and reports per-coordinate relative errors with the
    |analytic| + |numeric| + eps denominator.
    """
    x0 = np.asarray(params, np.float64).ravel()
    _, grad = fn(x0)
    grad = np.asarray(grad, np.float64).ravel()
    if indices is None:
        rng = rng or np.random.default_rng(0)
        count = min(n_probe, x0.size)
        indices = rng.choice(x0.size, size=count, replace=False)
    entries = []
    for idx in indices:
        idx = int(idx)
        xp = x0.copy()
        xp[idx] += h
        lo_p, _ = fn(xp)
        xp[idx] = x0[idx] - h
        lo_m, _ = fn(xp)
        numeric = (float(lo_p) - float(lo_m)) / (2.0 * h)
        analytic = float(grad[idx])
        rel = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
        entries.append(FiniteDiffEntry(idx, analytic, numeric, rel))
    return FiniteDiffReport(max(e.rel_error for e in entries), tuple(entries))


def render_views(params: ParameterSet, cameras, sampling: SamplingConfig,
                 seed=0, sizes=None):
    """Float64 feature images of each view, exactly as the loss sees them.

    Returns a list of (F, H, W) arrays. Using these as targets with the
    same sampling/seed gives a loss and gradient of exactly zero.
    """
    if sampling.n_fine != 0:
        raise DomainError("loss path requires n_fine == 0")
    lay = params.layout
    planes = params.planes()
    ws = [params.weight(i) for i in range(params.n_layers)]
    bs = [params.bias(i) for i in range(params.n_layers)]
    seeds = _view_seed_sequences(seed, len(cameras))
    out = []
    for v, cam in enumerate(cameras):
        w, h = (cam.intrinsics.width, cam.intrinsics.height) if sizes is None \
            else sizes[v]
        intr = cam.intrinsics
        if (intr.width, intr.height) != (w, h):
            intr = Intrinsics(focal=intr.focal, cx=intr.cx, cy=intr.cy,
                              width=w, height=h)
        rays = generate_rays(cam.c2w, intr, cam.near, cam.far)
        origins = rays.origins.reshape(-1, 3)
        dirs = rays.directions.reshape(-1, 3)
        n = sampling.n_coarse
        if sampling.stratified:
            jit = np.random.default_rng(seeds[v]).random((h * w, n))
        else:
            jit = np.full((h * w, n), 0.5)
        ts = _ts_from_jitter(rays.near, rays.far, n, jit)
        pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
        pix, _ = _field_forward(planes, ws, bs, lay, pts.reshape(-1, 3),
                                ts, rays.far, sampling.background)
        out.append(pix.T.reshape(-1, h, w))
    return out


def render_loss_fn(layout: ParameterLayout, cameras, targets,
                   cfg: DistillLossConfig, sampling: SamplingConfig, seed=0,
                   target_planes=None):
    """Adapter: flat vector -> (loss, flat gradient), for finite_diff_check."""
    def fn(vec):
        ps = ParameterSet(layout, vec)
        parts, grad = loss_and_grad(ps, cameras, targets, cfg, sampling,
                                    seed=seed, target_planes=target_planes)
        return parts.total, grad.values
    return fn
