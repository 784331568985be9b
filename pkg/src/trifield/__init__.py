"""CPU triplane radiance field toolkit.

Three feature planes plus a small MLP define a volumetric field; an orbit
camera renders it into feature/RGB/depth images; a gradient-verified
fitting loop distills procedural scenes into the representation; image and
depth metrics (with rigid realignment) evaluate the results. A CLI, an
HTTP/WebSocket frame service, and a browser orbit viewer sit on top.
"""

from .camera import (AugmentationConfig, Camera, Intrinsics, OrbitPose, RayBundle,
                     default_clip_range, generate_rays, pose_from_orbit,
                     sample_multiview_camera, sample_reference_camera)
from .errors import DomainError, SchemaError
from .render import (RenderOutput, SamplingConfig, composite, importance_resample,
                     render, stratified_ts, upsample_bilinear)
from .triplane import (FieldDecoder, FieldSample, FieldSamples, TriplaneGrid,
                       aggregate_mean, decode, project_to_planes, query_field,
                       sample_plane)

__all__ = [
    "AugmentationConfig", "Camera", "DomainError", "FieldDecoder", "FieldSample",
    "FieldSamples", "Intrinsics", "OrbitPose", "RayBundle", "RenderOutput",
    "SamplingConfig", "SchemaError", "TriplaneGrid", "aggregate_mean", "composite",
    "decode", "default_clip_range", "generate_rays", "importance_resample",
    "pose_from_orbit", "project_to_planes", "query_field", "render", "sample_plane",
    "sample_multiview_camera", "sample_reference_camera", "stratified_ts",
    "upsample_bilinear",
]

__version__ = "0.1.0"
