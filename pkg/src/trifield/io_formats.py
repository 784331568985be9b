"""Bit-exact file formats: triplanes, decoders, depth maps, cameras, images.

All multi-byte values are little-endian. Triplane payloads are stored in
plane order (xy, xz, yz), rows (v) outermost, then columns (u), channels
innermost, as 32-bit floats -- exactly the in-memory layout of
``TriplaneGrid.planes``.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np
from PIL import Image

from .camera import Intrinsics, OrbitPose, default_clip_range
from .errors import SchemaError
from .triplane import FieldDecoder, TriplaneGrid

TRIPLANE_MAGIC = b"TRPL"
TRIPLANE_VERSION = 1
_TRIPLANE_HEADER = struct.Struct("<4sIIIf")

DECODER_MAGIC = b"TPDE"
DECODER_VERSION = 1

_DENSITY_TAGS = {"softplus": 1}
_FEATURE_TAGS = {"sigmoid": 1}
_DENSITY_NAMES = {v: k for k, v in _DENSITY_TAGS.items()}
_FEATURE_NAMES = {v: k for k, v in _FEATURE_TAGS.items()}


class TriplaneFormatError(ValueError):
    """Malformed triplane container; the message names the failing field."""


class DecoderFormatError(ValueError):
    """Malformed decoder container; the message names the failing field."""


class PfmFormatError(ValueError):
    """Malformed PFM file; the message names the failing field."""


def triplane_to_bytes(grid: TriplaneGrid) -> bytes:
    header = _TRIPLANE_HEADER.pack(TRIPLANE_MAGIC, TRIPLANE_VERSION,
                                   grid.resolution, grid.channels,
                                   np.float32(grid.box_scale))
    payload = np.ascontiguousarray(grid.planes, dtype="<f4").tobytes()
    return header + payload


def triplane_from_bytes(data: bytes) -> TriplaneGrid:
    if len(data) < _TRIPLANE_HEADER.size:
        raise TriplaneFormatError("header: truncated before 20 bytes")
    magic, version, r, c, box_scale = _TRIPLANE_HEADER.unpack_from(data)
    if magic != TRIPLANE_MAGIC:
        raise TriplaneFormatError(f"magic: expected {TRIPLANE_MAGIC!r}, got {magic!r}")
    if version != TRIPLANE_VERSION:
        raise TriplaneFormatError(f"version: unsupported value {version}")
    if r < 1 or c < 1:
        raise TriplaneFormatError(f"resolution/channels: invalid {r}x{c}")
    expected = 3 * r * r * c * 4
    body = data[_TRIPLANE_HEADER.size:]
    if len(body) != expected:
        raise TriplaneFormatError(
            f"payload: expected {expected} bytes, got {len(body)}")
    if not (np.isfinite(box_scale) and box_scale > 0):
        raise TriplaneFormatError(f"box_scale: invalid value {box_scale}")
    planes = np.frombuffer(body, dtype="<f4").reshape(3, r, r, c)
    if not np.all(np.isfinite(planes)):
        raise TriplaneFormatError("payload: non-finite feature values")
    return TriplaneGrid(planes, float(box_scale))


def write_triplane(path, grid: TriplaneGrid) -> None:
    with open(path, "wb") as f:
        f.write(triplane_to_bytes(grid))


def read_triplane(path) -> TriplaneGrid:
    with open(path, "rb") as f:
        return triplane_from_bytes(f.read())


def decoder_to_bytes(dec: FieldDecoder) -> bytes:
    out = io.BytesIO()
    widths = dec.layer_widths
    out.write(struct.pack("<4sII", DECODER_MAGIC, DECODER_VERSION, len(dec.weights)))
    out.write(struct.pack(f"<{len(widths)}I", *widths))
    out.write(struct.pack("<BB", _DENSITY_TAGS[dec.density_activation],
                          _FEATURE_TAGS[dec.feature_activation]))
    for w, b in zip(dec.weights, dec.biases):
        out.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
        out.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return out.getvalue()


def decoder_from_bytes(data: bytes) -> FieldDecoder:
    head = struct.Struct("<4sII")
    if len(data) < head.size:
        raise DecoderFormatError("header: truncated")
    magic, version, n_layers = head.unpack_from(data)
    if magic != DECODER_MAGIC:
        raise DecoderFormatError(f"magic: expected {DECODER_MAGIC!r}, got {magic!r}")
    if version != DECODER_VERSION:
        raise DecoderFormatError(f"version: unsupported value {version}")
    if not 1 <= n_layers <= 64:
        raise DecoderFormatError(f"n_layers: implausible value {n_layers}")
    off = head.size
    need = 4 * (n_layers + 1)
    if len(data) < off + need + 2:
        raise DecoderFormatError("widths: truncated")
    widths = struct.unpack_from(f"<{n_layers + 1}I", data, off)
    off += need
    dtag, ftag = struct.unpack_from("<BB", data, off)
    off += 2
    if dtag not in _DENSITY_NAMES:
        raise DecoderFormatError(f"density_activation: unknown tag {dtag}")
    if ftag not in _FEATURE_NAMES:
        raise DecoderFormatError(f"feature_activation: unknown tag {ftag}")
    if any(w < 1 or w > 1 << 20 for w in widths):
        raise DecoderFormatError(f"widths: implausible values {widths}")
    weights, biases = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        nb = 4 * (a * b + b)
        if len(data) < off + nb:
            raise DecoderFormatError("layers: truncated payload")
        w = np.frombuffer(data, dtype="<f4", count=a * b, offset=off).reshape(a, b)
        off += 4 * a * b
        bias = np.frombuffer(data, dtype="<f4", count=b, offset=off)
        off += 4 * b
        weights.append(w)
        biases.append(bias)
    if off != len(data):
        raise DecoderFormatError(f"payload: {len(data) - off} trailing bytes")
    return FieldDecoder(tuple(weights), tuple(biases),
                        _DENSITY_NAMES[dtag], _FEATURE_NAMES[ftag])


def write_decoder(path, dec: FieldDecoder) -> None:
    with open(path, "wb") as f:
        f.write(decoder_to_bytes(dec))


def read_decoder(path) -> FieldDecoder:
    with open(path, "rb") as f:
        return decoder_from_bytes(f.read())


def depth_pfm_bytes(depth: np.ndarray) -> bytes:
    """Grayscale PFM: 'Pf', scale -1.0 (little-endian), bottom-up rows."""
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise PfmFormatError("depth: expected a 2-d array")
    if not np.all(np.isfinite(depth)):
        raise PfmFormatError("depth: values must be finite")
    h, w = depth.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    return header + np.flipud(depth).astype("<f4").tobytes()


def depth_from_pfm_bytes(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if len(parts) < 4:
        raise PfmFormatError("header: expected three newline-terminated lines")
    kind, dims, scale_s, body = parts
    if kind != b"Pf":
        raise PfmFormatError(f"type: expected b'Pf', got {kind!r}")
    try:
        w, h = (int(v) for v in dims.split())
    except ValueError:
        raise PfmFormatError(f"dimensions: cannot parse {dims!r}") from None
    if w < 1 or h < 1:
        raise PfmFormatError(f"dimensions: invalid {w}x{h}")
    try:
        scale = float(scale_s)
    except ValueError:
        raise PfmFormatError(f"scale: cannot parse {scale_s!r}") from None
    if scale == 0:
        raise PfmFormatError("scale: must be nonzero")
    if len(body) != 4 * w * h:
        raise PfmFormatError(f"payload: expected {4 * w * h} bytes, got {len(body)}")
    dt = "<f4" if scale < 0 else ">f4"
    return np.flipud(np.frombuffer(body, dtype=dt).reshape(h, w)).astype(np.float32)


def write_depth_pfm(path, depth: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(depth_pfm_bytes(depth))


def read_depth_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return depth_from_pfm_bytes(f.read())


CAMERA_KEYS = {
    "pitch_deg": float, "yaw_deg": float, "roll_deg": float, "radius": float,
    "focal": float, "cx": float, "cy": float, "width": int, "height": int,
    "near": float, "far": float,
}


def camera_from_dict(obj: dict, box_scale: float = 1.0):
    """Validate a camera dict -> (OrbitPose, Intrinsics, near, far).

    Missing keys take module defaults (near/far bracket the world cube at
    the chosen radius); unknown keys and non-numeric values are rejected
    with the offending key named.
    """
    if not isinstance(obj, dict):
        raise SchemaError("camera: expected a JSON object")
    for key in obj:
        if key not in CAMERA_KEYS:
            raise SchemaError(f"camera: unknown key {key!r}")
    vals = {}
    for key, kind in CAMERA_KEYS.items():
        if key not in obj:
            continue
        v = obj[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaError(f"camera: key {key!r} must be a number")
        if not np.isfinite(v):
            raise SchemaError(f"camera: key {key!r} must be finite")
        if kind is int and float(v) != int(v):
            raise SchemaError(f"camera: key {key!r} must be an integer")
        vals[key] = kind(v)

    radius = vals.get("radius", OrbitPose.radius)
    if radius <= 0:
        raise SchemaError("camera: key 'radius' must be positive")
    width = vals.get("width", 128)
    height = vals.get("height", 128)
    if width < 1 or height < 1:
        raise SchemaError("camera: 'width'/'height' must be >= 1")
    focal = vals.get("focal", Intrinsics.focal)
    if focal <= 0:
        raise SchemaError("camera: key 'focal' must be positive")

    pose = OrbitPose(pitch=np.deg2rad(vals.get("pitch_deg", 0.0)),
                     yaw=np.deg2rad(vals.get("yaw_deg", 0.0)),
                     roll=np.deg2rad(vals.get("roll_deg", 0.0)),
                     radius=radius)
    intr = Intrinsics(focal=focal, cx=vals.get("cx", Intrinsics.cx),
                      cy=vals.get("cy", Intrinsics.cy), width=width, height=height)
    d_near, d_far = default_clip_range(radius, box_scale)
    near = vals.get("near", d_near)
    far = vals.get("far", d_far)
    if not 0 <= near < far:
        raise SchemaError("camera: need 0 <= near < far")
    return pose, intr, near, far


def read_camera_json(path, box_scale: float = 1.0):
    with open(path, "r", encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f"camera: invalid JSON ({e})") from None
    return camera_from_dict(obj, box_scale)


def rgb_to_u8(rgb: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8, round-to-nearest."""
    arr = np.clip(np.asarray(rgb, np.float64), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def encode_rgb_png(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(rgb_to_u8(rgb), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_rgb_png(path, rgb: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_rgb_png(rgb))


def read_rgb_png(path) -> np.ndarray:
    """PNG -> (3, H, W) float64 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)
