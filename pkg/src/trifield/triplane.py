"""Triplane feature grids and point-to-field decoding.

The world volume is the cube ``[-box_scale, box_scale]^3``. A 3D point is
dropped onto the three canonical planes -- xy indexed by (x, y), xz by
(x, z), yz by (y, z) -- each plane bilinearly interpolates its feature
lattice, the three feature vectors are averaged, and a small MLP maps the
average to a non-negative density plus a feature vector in [0, 1]. The
first three feature channels are the point's color. Nothing here depends
on a view direction.

Plane arrays are stored ``[v, u, channel]`` (v-major). Plane coordinates
live in [-1, 1]^2 with -1 mapping to lattice index 0 and +1 to index R-1;
coordinates outside the square clamp to the border.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

PLANE_NAMES = ("xy", "xz", "yz")
# World-coordinate columns that index each plane, as (u_axis, v_axis).
PLANE_AXES = ((0, 1), (0, 2), (1, 2))

DEFAULT_RESOLUTION = 256
DEFAULT_CHANNELS = 32
DEFAULT_FEATURES = 32
DEFAULT_HIDDEN = 64


def _frozen_f32(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float32, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class TriplaneGrid:
    """Three axis-aligned R x R feature lattices with C channels each.

    Immutable after construction; safe to share across threads.
    """

    planes: np.ndarray  # (3, R, R, C) float32, [plane, v, u, channel]
    box_scale: float = 1.0

    def __post_init__(self):
        p = np.asarray(self.planes)
        if p.ndim != 4 or p.shape[0] != 3 or p.shape[1] != p.shape[2]:
            raise DomainError(f"planes must have shape (3, R, R, C), got {p.shape}")
        if p.shape[1] < 1 or p.shape[3] < 1:
            raise DomainError("resolution and channel count must be >= 1")
        if not np.all(np.isfinite(p)):
            raise DomainError("plane features must be finite")
        if not (np.isfinite(self.box_scale) and self.box_scale > 0):
            raise DomainError("box_scale must be a positive real")
        object.__setattr__(self, "planes", _frozen_f32(p))
        object.__setattr__(self, "box_scale", float(self.box_scale))

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[3]

    @property
    def total_channels(self) -> int:
        return 3 * self.channels

    @classmethod
    def zeros(cls, resolution: int = DEFAULT_RESOLUTION,
              channels: int = DEFAULT_CHANNELS, box_scale: float = 1.0) -> "TriplaneGrid":
        return cls(np.zeros((3, resolution, resolution, channels), np.float32), box_scale)

    @classmethod
    def random(cls, rng: np.random.Generator, resolution: int = DEFAULT_RESOLUTION,
               channels: int = DEFAULT_CHANNELS, box_scale: float = 1.0,
               scale: float = 0.1) -> "TriplaneGrid":
        vals = rng.normal(0.0, scale, size=(3, resolution, resolution, channels))
        return cls(vals.astype(np.float32), box_scale)


def lattice_uv(index: int, resolution: int) -> float:
    """Plane coordinate of lattice node `index` along one axis."""
    if resolution == 1:
        return 0.0
    return -1.0 + 2.0 * index / (resolution - 1)


def softplus(x):
    x = np.asarray(x)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_grad(x):
    return sigmoid(x)


def sigmoid(x):
    # tanh form is stable for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def sigmoid_grad_from_value(s):
    return s * (1.0 - s)


DENSITY_ACTIVATIONS = {"softplus": softplus}
FEATURE_ACTIVATIONS = {"sigmoid": sigmoid}


@dataclass(frozen=True)
class FieldDecoder:
    """MLP from an aggregated plane feature to (density, features).

    Layers are affine maps with softplus between them. The final layer
    emits 1 + F values: a density logit mapped through the density
    activation, then F feature logits mapped through the feature
    activation. Immutable after construction.
    """

    weights: tuple  # per-layer (in, out) float32 matrices
    biases: tuple   # per-layer (out,) float32 vectors
    density_activation: str = "softplus"
    feature_activation: str = "sigmoid"

    def __post_init__(self):
        ws = tuple(_frozen_f32(w) for w in self.weights)
        bs = tuple(_frozen_f32(b) for b in self.biases)
        if len(ws) == 0 or len(ws) != len(bs):
            raise DomainError("decoder needs matching weight/bias lists")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise DomainError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i > 0 and ws[i - 1].shape[1] != w.shape[0]:
                raise DomainError(f"layer {i}: input width {w.shape[0]} does not chain")
        if ws[-1].shape[1] < 4:
            raise DomainError("output must be 1 density + at least 3 feature channels")
        if self.density_activation not in DENSITY_ACTIVATIONS:
            raise DomainError(f"unknown density activation {self.density_activation!r}")
        if self.feature_activation not in FEATURE_ACTIVATIONS:
            raise DomainError(f"unknown feature activation {self.feature_activation!r}")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_features(self) -> int:
        return self.weights[-1].shape[1] - 1

    @property
    def layer_widths(self) -> tuple:
        return (self.in_width,) + tuple(w.shape[1] for w in self.weights)

    @classmethod
    def make(cls, rng: np.random.Generator, channels: int = DEFAULT_CHANNELS,
             hidden=(DEFAULT_HIDDEN,), n_features: int = DEFAULT_FEATURES) -> "FieldDecoder":
        """Random decoder with 1/sqrt(fan_in)-scaled weights."""
        widths = (channels,) + tuple(hidden) + (1 + n_features,)
        ws, bs = [], []
        for a, b in zip(widths[:-1], widths[1:]):
            ws.append(rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b)).astype(np.float32))
            bs.append(np.zeros(b, np.float32))
        return cls(tuple(ws), tuple(bs))

    @classmethod
    def zeros(cls, channels: int = DEFAULT_CHANNELS, hidden=(DEFAULT_HIDDEN,),
              n_features: int = DEFAULT_FEATURES) -> "FieldDecoder":
        widths = (channels,) + tuple(hidden) + (1 + n_features,)
        ws = tuple(np.zeros((a, b), np.float32) for a, b in zip(widths[:-1], widths[1:]))
        bs = tuple(np.zeros(b, np.float32) for b in widths[1:])
        return cls(ws, bs)


@dataclass(frozen=True)
class FieldSample:
    """Decoded field value at one point."""

    density: float
    features: np.ndarray  # (F,) in [0, 1]

    @property
    def color(self) -> np.ndarray:
        return self.features[:3]


@dataclass(frozen=True)
class FieldSamples:
    """Decoded field values for a batch of points."""

    density: np.ndarray   # (N,)
    features: np.ndarray  # (N, F)

    @property
    def color(self) -> np.ndarray:
        return self.features[:, :3]

    def __len__(self):
        return self.density.shape[0]

    def __getitem__(self, i) -> FieldSample:
        return FieldSample(float(self.density[i]), self.features[i])


def project_to_planes(x, box_scale: float = 1.0) -> np.ndarray:
    """Plane coordinates of a world point: (3, 2) array of (u, v) per plane.

    Pure coordinate selection: each plane reads its two world axes divided
    by box_scale. Points outside the cube yield coordinates outside
    [-1, 1]; sampling clamps them at the border.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (3,) or not np.all(np.isfinite(x)):
        raise DomainError("point must be a finite 3-vector")
    if not box_scale > 0:
        raise DomainError("box_scale must be positive")
    scaled = x / box_scale
    return np.stack([scaled[list(axes)] for axes in PLANE_AXES])


def plane_coordinates_batch(points: np.ndarray, box_scale: float) -> np.ndarray:
    """(N, 3) world points -> (3, N, 2) per-plane coordinates."""
    scaled = np.asarray(points) / box_scale
    return np.stack([scaled[:, list(axes)] for axes in PLANE_AXES])


def _bilinear_taps(resolution: int, uv: np.ndarray):
    """Lattice taps for plane coordinates.

    Returns (i0, i1, fu, j0, j1, fv): integer column/row neighbours and
    fractional offsets, with out-of-square coordinates clamped to the
    border. Coordinate math is float64 regardless of feature dtype.
    """
    r = resolution
    gu = (np.asarray(uv[..., 0], np.float64) + 1.0) * 0.5 * (r - 1)
    gv = (np.asarray(uv[..., 1], np.float64) + 1.0) * 0.5 * (r - 1)
    gu = np.clip(gu, 0.0, r - 1)
    gv = np.clip(gv, 0.0, r - 1)
    i0 = np.minimum(np.floor(gu).astype(np.intp), max(r - 2, 0))
    j0 = np.minimum(np.floor(gv).astype(np.intp), max(r - 2, 0))
    i1 = np.minimum(i0 + 1, r - 1)
    j1 = np.minimum(j0 + 1, r - 1)
    fu = gu - i0
    fv = gv - j0
    return i0, i1, fu, j0, j1, fv


def _bilinear_gather(plane: np.ndarray, taps) -> np.ndarray:
    """Interpolate a (R, R, C) plane at precomputed taps -> (N, C).

    The four corner weights are cast to the plane dtype before
    accumulation so results are bitwise identical for any batch size.
    """
    i0, i1, fu, j0, j1, fv = taps
    dt = plane.dtype
    w00 = ((1.0 - fu) * (1.0 - fv)).astype(dt)[:, None]
    w10 = (fu * (1.0 - fv)).astype(dt)[:, None]
    w01 = ((1.0 - fu) * fv).astype(dt)[:, None]
    w11 = (fu * fv).astype(dt)[:, None]
    return (w00 * plane[j0, i0] + w10 * plane[j0, i1]
            + w01 * plane[j1, i0] + w11 * plane[j1, i1])


def sample_plane(grid: TriplaneGrid, plane: str, uv) -> np.ndarray:
    """Bilinearly sample one plane at coordinates in [-1, 1]^2 -> (C,)."""
    if plane not in PLANE_NAMES:
        raise DomainError(f"plane must be one of {PLANE_NAMES}, got {plane!r}")
    uv = np.asarray(uv, dtype=np.float64)
    if uv.shape != (2,) or not np.all(np.isfinite(uv)):
        raise DomainError("uv must be a finite 2-vector")
    p = grid.planes[PLANE_NAMES.index(plane)]
    taps = _bilinear_taps(grid.resolution, uv[None, :])
    return _bilinear_gather(p, taps)[0]


def aggregate_mean(f_xy, f_xz, f_yz) -> np.ndarray:
    """Componentwise mean of the three plane features."""
    a, b, c = (np.asarray(v) for v in (f_xy, f_xz, f_yz))
    if not (a.shape == b.shape == c.shape):
        raise DomainError("plane features must have equal length")
    third = np.asarray(1.0 / 3.0, dtype=a.dtype) if a.dtype.kind == "f" else 1.0 / 3.0
    return (a + b + c) * third


def affine_fixed_order(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x @ w + b with a fixed accumulation order.

    Accumulates input columns one at a time so the result for any row is
    bitwise identical whether the row is evaluated alone or inside a large
    batch (BLAS kernels do not guarantee that).
    """
    out = np.empty((x.shape[0], w.shape[1]), dtype=x.dtype)
    out[:] = b
    for k in range(w.shape[0]):
        out += x[:, k, None] * w[k]
    return out


def decoder_forward(dec: FieldDecoder, feats: np.ndarray, weights=None, biases=None):
    """Batched MLP forward pass: (N, C) -> (density (N,), features (N, F)).

    `weights`/`biases` override the decoder arrays (used for the float64
    shadow path); dtype follows the inputs.
    """
    ws = dec.weights if weights is None else weights
    bs = dec.biases if biases is None else biases
    h = feats
    for w, b in zip(ws[:-1], bs[:-1]):
        h = softplus(affine_fixed_order(h, w, b))
    out = affine_fixed_order(h, ws[-1], bs[-1])
    density = DENSITY_ACTIVATIONS[dec.density_activation](out[:, 0])
    features = FEATURE_ACTIVATIONS[dec.feature_activation](out[:, 1:])
    return density, features


def decode(dec: FieldDecoder, feat) -> FieldSample:
    """Decode one aggregated feature vector."""
    feat = np.asarray(feat)
    if feat.shape != (dec.in_width,):
        raise DomainError(f"feature width {feat.shape} != decoder input {dec.in_width}")
    density, features = decoder_forward(dec, feat[None, :].astype(np.float32))
    return FieldSample(float(density[0]), features[0])


@dataclass(frozen=True)
class TriTaps:
    """Precomputed lattice taps for one point batch across all three planes.

    `cells` holds four (3N,) flat indices into the stacked (3*R*R, C) plane
    table (corner order 00, 10, 01, 11); `corner_weights` the matching
    float64 bilinear weights.
    """

    cells: tuple
    corner_weights: tuple
    n_points: int


def triplane_taps(resolution: int, points: np.ndarray, box_scale: float) -> TriTaps:
    uv = plane_coordinates_batch(points, box_scale).reshape(-1, 2)
    i0, i1, fu, j0, j1, fv = _bilinear_taps(resolution, uv)
    offs = np.repeat(np.arange(3, dtype=np.intp) * resolution * resolution,
                     points.shape[0])
    cells = ((j0 * resolution + i0) + offs, (j0 * resolution + i1) + offs,
             (j1 * resolution + i0) + offs, (j1 * resolution + i1) + offs)
    w = ((1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv)
    return TriTaps(cells, w, points.shape[0])


def gather_mean_features(planes: np.ndarray, taps: TriTaps) -> np.ndarray:
    """Interpolate all three planes at taps and average -> (N, C).

    Corner weights are cast to the plane dtype and accumulated in a fixed
    order, so any row is bitwise identical for any batch size and equals
    sample_plane/aggregate_mean composed per point.
    """
    flat = planes.reshape(-1, planes.shape[-1])
    dt = planes.dtype
    acc = taps.corner_weights[0].astype(dt)[:, None] * flat[taps.cells[0]]
    for k in range(1, 4):
        acc += taps.corner_weights[k].astype(dt)[:, None] * flat[taps.cells[k]]
    per_plane = acc.reshape(3, taps.n_points, planes.shape[-1])
    third = np.asarray(1.0 / 3.0, dtype=dt) if dt.kind == "f" else 1.0 / 3.0
    return per_plane.sum(axis=0) * third


def query_points(planes: np.ndarray, dec: FieldDecoder, points: np.ndarray,
                 box_scale: float, weights=None, biases=None):
    """Raw batched field query used by the renderer and the gradient path.

    `planes` is (3, R, R, C) in the dtype the computation should run in.
    Returns (density (N,), features (N, F)).
    """
    taps = triplane_taps(planes.shape[1], np.asarray(points), box_scale)
    agg = gather_mean_features(planes, taps)
    return decoder_forward(dec, agg, weights=weights, biases=biases)


def query_field(grid: TriplaneGrid, dec: FieldDecoder, points) -> FieldSamples:
    """Decode the field at an (N, 3) batch of world points."""
    pts = np.asarray(points, dtype=np.float32)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DomainError(f"points must be (N, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise DomainError("points must be finite")
    if dec.in_width != grid.channels:
        raise DomainError(
            f"decoder input width {dec.in_width} != grid channels {grid.channels}")
    density, features = query_points(grid.planes, dec, pts, grid.box_scale)
    return FieldSamples(density, features)
