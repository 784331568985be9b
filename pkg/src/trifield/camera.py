"""Orbit camera poses, pinhole intrinsics, rays, and pose augmentation.

Conventions:

* World is y-up. An orbit pose places the camera at spherical coordinates
  (radius, pitch, yaw) around ``look_at`` -- frontal (pitch=yaw=0) is on
  the +z axis -- with the optical axis through ``look_at``, then rolls the
  image plane about the optical axis.
* Camera space is x-right, y-down, z-forward; pixel (ix, iy) casts through
  its center (ix + 0.5, iy + 0.5).
* Intrinsics are stored in resolution-independent units: the pixel focal
  length is ``focal * width`` and the principal point is given in pixels
  of a 512-wide reference image and scaled by ``width / 512``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

DEFAULT_FOCAL = 18.83
DEFAULT_RADIUS = 2.7
DEFAULT_PRINCIPAL = 256.0
REFERENCE_IMAGE_SIZE = 512
MIN_NEAR = 0.05


@dataclass(frozen=True)
class Intrinsics:
    focal: float = DEFAULT_FOCAL       # pixel focal = focal * width
    cx: float = DEFAULT_PRINCIPAL      # 512-reference pixels
    cy: float = DEFAULT_PRINCIPAL
    width: int = 128
    height: int = 128

    def __post_init__(self):
        if not (np.isfinite(self.focal) and self.focal > 0):
            raise DomainError("focal must be a positive real")
        if not (np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise DomainError("principal point must be finite")
        if self.width < 1 or self.height < 1:
            raise DomainError("image size must be >= 1")

    @property
    def pixel_focal(self) -> float:
        return self.focal * self.width

    @property
    def pixel_principal(self) -> tuple:
        s = self.width / REFERENCE_IMAGE_SIZE
        return (self.cx * s, self.cy * s)


@dataclass(frozen=True)
class OrbitPose:
    pitch: float = 0.0   # radians
    yaw: float = 0.0
    roll: float = 0.0
    radius: float = DEFAULT_RADIUS
    look_at: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise DomainError("radius must be positive")
        la = tuple(float(v) for v in self.look_at)
        if len(la) != 3 or not all(math.isfinite(v) for v in la):
            raise DomainError("look_at must be a finite 3-vector")
        object.__setattr__(self, "look_at", la)


@dataclass(frozen=True)
class RayBundle:
    origins: np.ndarray     # (H, W, 3)
    directions: np.ndarray  # (H, W, 3), unit norm
    near: float
    far: float

    def __post_init__(self):
        norms = np.linalg.norm(self.directions, axis=-1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise DomainError("ray directions must be unit vectors")
        if not (0.0 <= self.near < self.far):
            raise DomainError("need 0 <= near < far")


@dataclass(frozen=True)
class Camera:
    """A posed pinhole camera with its integration bounds."""

    c2w: np.ndarray  # (4, 4) camera-to-world
    intrinsics: Intrinsics
    near: float
    far: float

    def rays(self) -> RayBundle:
        return generate_rays(self.c2w, self.intrinsics, self.near, self.far)

    @classmethod
    def from_orbit(cls, pose: OrbitPose, intrinsics: Intrinsics,
                   box_scale: float = 1.0, near: float = None,
                   far: float = None) -> "Camera":
        d_near, d_far = default_clip_range(pose.radius, box_scale)
        return cls(pose_from_orbit(pose), intrinsics,
                   d_near if near is None else near,
                   d_far if far is None else far)


def default_clip_range(radius: float, box_scale: float = 1.0) -> tuple:
    """Near/far bracket guaranteed to cover the world cube from the orbit."""
    span = math.sqrt(3.0) * box_scale
    return (max(radius - span, MIN_NEAR), radius + span)


def pose_from_orbit(pose: OrbitPose) -> np.ndarray:
    """Camera-to-world transform of an orbit pose (float64, rigid)."""
    cp, sp = math.cos(pose.pitch), math.sin(pose.pitch)
    cy, sy = math.cos(pose.yaw), math.sin(pose.yaw)
    look_at = np.asarray(pose.look_at, np.float64)
    eye = look_at + pose.radius * np.array([cp * sy, sp, cp * cy])

    forward = look_at - eye
    forward /= np.linalg.norm(forward)
    world_up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, world_up)
    n = np.linalg.norm(right)
    if n < 1e-12:
        # looking straight up/down: pick a deterministic fallback
        right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
        n = np.linalg.norm(right)
    right /= n
    down = np.cross(forward, right)

    rot = np.stack([right, down, forward], axis=1)
    if pose.roll != 0.0:
        cr, sr = math.cos(pose.roll), math.sin(pose.roll)
        roll = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
        rot = rot @ roll

    c2w = np.eye(4)
    c2w[:3, :3] = rot
    c2w[:3, 3] = eye
    return c2w


def generate_rays(c2w: np.ndarray, intr: Intrinsics, near: float, far: float) -> RayBundle:
    """One unit-norm ray per pixel center."""
    if not near < far:
        raise DomainError("need near < far")
    f = intr.pixel_focal
    if not (np.isfinite(f) and f > 0):
        raise DomainError("degenerate intrinsics")
    cx, cy = intr.pixel_principal
    w, h = intr.width, intr.height

    ix = (np.arange(w, dtype=np.float64) + 0.5 - cx) / f
    iy = (np.arange(h, dtype=np.float64) + 0.5 - cy) / f
    gx, gy = np.meshgrid(ix, iy)
    dirs = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    dirs = dirs @ c2w[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(c2w[:3, 3], dirs.shape).copy()
    return RayBundle(origins, dirs, float(near), float(far))


@dataclass(frozen=True)
class AugmentationConfig:
    """Sampling distributions for on-the-fly camera randomization.

    Focal, radius, principal point and roll are normal; pitch and yaw are
    uniform within their ranges (reference and multiview cameras use
    different yaw ranges). All values are in the storage units of
    Intrinsics/OrbitPose except angles, which are degrees here.
    """

    focal_mean: float = DEFAULT_FOCAL
    focal_sigma: float = 1.0
    radius_mean: float = DEFAULT_RADIUS
    radius_sigma: float = 0.1
    principal_mean: float = DEFAULT_PRINCIPAL
    principal_sigma: float = 14.0
    roll_mean_deg: float = 0.0
    roll_sigma_deg: float = 2.0
    ref_pitch_deg: float = 26.0
    ref_yaw_deg: float = 49.0
    mv_pitch_deg: float = 26.0
    mv_yaw_deg: float = 36.0

    def __post_init__(self):
        for name in ("focal_sigma", "radius_sigma", "principal_sigma", "roll_sigma_deg"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0")
        for name in ("ref_pitch_deg", "ref_yaw_deg", "mv_pitch_deg", "mv_yaw_deg"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} range must be >= 0")

    @classmethod
    def ffhq(cls) -> "AugmentationConfig":
        return cls()

    @classmethod
    def afhq(cls) -> "AugmentationConfig":
        return cls(focal_sigma=1.5, principal_sigma=25.0, roll_sigma_deg=6.0)

    @classmethod
    def fixed(cls, **overrides) -> "AugmentationConfig":
        """All sigmas zero: degenerates to the fixed default camera."""
        base = dict(focal_sigma=0.0, radius_sigma=0.0, principal_sigma=0.0,
                    roll_sigma_deg=0.0)
        base.update(overrides)
        return cls(**base)


def _normal(rng: np.random.Generator, mean: float, sigma: float) -> float:
    # rng.normal(mean, 0) still consumes draws; keep the stream identical
    # for sigma == 0 so seeded runs line up across configs.
    return float(mean + sigma * rng.standard_normal())


def sample_reference_camera(cfg: AugmentationConfig, rng: np.random.Generator,
                            size: tuple = (128, 128)) -> tuple:
    """Randomized input-view camera -> (OrbitPose, Intrinsics).

    Draw order is fixed (pitch, yaw, focal, radius, cx, cy, roll) so a
    seeded generator reproduces samples exactly.
    """
    pitch = math.radians(float(rng.uniform(-cfg.ref_pitch_deg, cfg.ref_pitch_deg)))
    yaw = math.radians(float(rng.uniform(-cfg.ref_yaw_deg, cfg.ref_yaw_deg)))
    focal = _normal(rng, cfg.focal_mean, cfg.focal_sigma)
    radius = _normal(rng, cfg.radius_mean, cfg.radius_sigma)
    cx = _normal(rng, cfg.principal_mean, cfg.principal_sigma)
    cy = _normal(rng, cfg.principal_mean, cfg.principal_sigma)
    roll = math.radians(_normal(rng, cfg.roll_mean_deg, cfg.roll_sigma_deg))
    pose = OrbitPose(pitch=pitch, yaw=yaw, roll=roll, radius=radius)
    intr = Intrinsics(focal=focal, cx=cx, cy=cy, width=size[0], height=size[1])
    return pose, intr


def sample_multiview_camera(cfg: AugmentationConfig, rng: np.random.Generator,
                            size: tuple = (128, 128)) -> tuple:
    """Second supervision view: random pitch/yaw, everything else fixed."""
    pitch = math.radians(float(rng.uniform(-cfg.mv_pitch_deg, cfg.mv_pitch_deg)))
    yaw = math.radians(float(rng.uniform(-cfg.mv_yaw_deg, cfg.mv_yaw_deg)))
    pose = OrbitPose(pitch=pitch, yaw=yaw, roll=0.0, radius=cfg.radius_mean)
    intr = Intrinsics(focal=cfg.focal_mean, cx=cfg.principal_mean,
                      cy=cfg.principal_mean, width=size[0], height=size[1])
    return pose, intr
