"""HTTP + WebSocket frame service over shared in-memory triplanes.

Stateless renders: ``POST /v1/triplanes`` (raw triplane file bytes) returns
an id; ``GET /v1/triplanes/{id}/render?...`` returns PNG bytes (or a PFM
via ``channel=depth``) computed by exactly the same pipeline as the CLI,
so equal parameters give equal bytes. Stateful streams:
``/v1/stream?id=...`` accepts camera JSON messages (the camera schema plus
``frame_id`` and optional quality knobs) and answers each with one binary
frame; when messages arrive faster than rendering, only the newest is
rendered and the dropped count is reported in the next frame header.

Binary frame header (16 bytes, little-endian):
``magic 'FRME' | frame_id u32 | width u16 | height u16 | kind u8 |``
``skipped u16 | pad u8`` followed by the payload (kind 1 = PNG rgb,
kind 2 = PFM depth, kind 0xFF = UTF-8 error reason).
"""

from __future__ import annotations

import asyncio
import json
import struct
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from fastapi import FastAPI, Query, Request, Response, WebSocket, WebSocketDisconnect

from . import io_formats as iof
from .camera import Camera, pose_from_orbit
from .cli import default_decoder
from .errors import SchemaError
from .render import SamplingConfig, render
from .triplane import TriplaneGrid

FRAME_MAGIC = b"FRME"
FRAME_HEADER = struct.Struct("<4sIHHBHB")
KIND_RGB = 1
KIND_DEPTH = 2
KIND_ERROR = 0xFF

STREAM_DEFAULT_SAMPLES = 48
STREAM_DEFAULT_FINE = 0
HTTP_DEFAULT_SAMPLES = 48
HTTP_DEFAULT_FINE = 48

CAMERA_MESSAGE_EXTRAS = {"frame_id", "channel", "samples", "samples_fine"}


@dataclass(frozen=True)
class ServiceConfig:
    seed: int = 0
    workers: int = 2
    max_upload_mib: int = 256


@dataclass
class Session:
    """One live stream: its triplane, sampling state and frame counters."""

    session_id: str
    triplane_id: str
    samples: int = STREAM_DEFAULT_SAMPLES
    samples_fine: int = STREAM_DEFAULT_FINE
    frames_sent: int = 0
    last_activity: float = field(default_factory=time.monotonic)


def encode_frame(frame_id: int, width: int, height: int, kind: int,
                 skipped: int, payload: bytes) -> bytes:
    header = FRAME_HEADER.pack(FRAME_MAGIC, frame_id & 0xFFFFFFFF, width, height,
                               kind, min(skipped, 0xFFFF), 0)
    return header + payload


def decode_frame(data: bytes):
    """Parse one binary frame -> (frame_id, width, height, kind, skipped, payload)."""
    magic, frame_id, width, height, kind, skipped, _ = FRAME_HEADER.unpack_from(data)
    if magic != FRAME_MAGIC:
        raise ValueError(f"bad frame magic {magic!r}")
    return frame_id, width, height, kind, skipped, data[FRAME_HEADER.size:]


def _render_camera(grid: TriplaneGrid, decoder, camera_dict: dict, seed: int,
                   samples: int, samples_fine: int, channel: str) -> tuple:
    """Shared render path -> (payload bytes, width, height, kind)."""
    pose, intr, near, far = iof.camera_from_dict(camera_dict, grid.box_scale)
    cam = Camera(pose_from_orbit(pose), intr, near, far)
    cfg = SamplingConfig(n_coarse=samples, n_fine=samples_fine,
                         width=intr.width, height=intr.height)
    out = render(grid, decoder, cam, cfg, seed=seed)
    if channel == "depth":
        return iof.depth_pfm_bytes(out.depth), intr.width, intr.height, KIND_DEPTH
    return iof.encode_rgb_png(out.rgb), intr.width, intr.height, KIND_RGB


def create_app(cfg: ServiceConfig = None) -> FastAPI:
    cfg = cfg or ServiceConfig()
    app = FastAPI(title="trifield frame service")
    triplanes: dict = {}
    decoders: dict = {}
    pool = ThreadPoolExecutor(max_workers=cfg.workers)
    max_upload = cfg.max_upload_mib * 1024 * 1024

    def decoder_for(grid: TriplaneGrid):
        key = (grid.channels,)
        if key not in decoders:
            decoders[key] = default_decoder(cfg.seed, grid.channels, grid.channels)
        return decoders[key]

    def error_json(status: int, message: str) -> Response:
        return Response(json.dumps({"error": message}), status_code=status,
                        media_type="application/json")

    @app.get("/v1/healthz")
    async def healthz():
        return {"ok": True, "triplanes": len(triplanes)}

    @app.post("/v1/triplanes")
    async def upload(request: Request):
        declared = request.headers.get("content-length")
        if declared is not None and int(declared) > max_upload:
            return error_json(413, f"upload exceeds {cfg.max_upload_mib} MiB limit")
        body = await request.body()
        if len(body) > max_upload:
            return error_json(413, f"upload exceeds {cfg.max_upload_mib} MiB limit")
        try:
            grid = iof.triplane_from_bytes(body)
        except iof.TriplaneFormatError as e:
            return error_json(400, str(e))
        tid = uuid.uuid4().hex[:12]
        triplanes[tid] = grid
        return {"id": tid}

    @app.delete("/v1/triplanes/{tid}", status_code=204)
    async def delete(tid: str):
        if tid not in triplanes:
            return error_json(404, f"unknown triplane id {tid!r}")
        del triplanes[tid]
        return Response(status_code=204)

    @app.get("/v1/triplanes/{tid}/render")
    async def render_view(tid: str,
                          pitch_deg: float = 0.0, yaw_deg: float = 0.0,
                          roll_deg: float = 0.0, radius: float = 2.7,
                          focal: float = Query(default=18.83, gt=0),
                          width: int = Query(default=128, ge=1, le=1024),
                          height: int = Query(default=128, ge=1, le=1024),
                          samples: int = Query(default=HTTP_DEFAULT_SAMPLES, ge=1),
                          samples_fine: int = Query(default=HTTP_DEFAULT_FINE, ge=0),
                          channel: str = "rgb"):
        grid = triplanes.get(tid)
        if grid is None:
            return error_json(404, f"unknown triplane id {tid!r}")
        if channel not in ("rgb", "depth"):
            return error_json(400, f"unknown channel {channel!r}")
        camera_dict = {"pitch_deg": pitch_deg, "yaw_deg": yaw_deg,
                       "roll_deg": roll_deg, "radius": radius, "focal": focal,
                       "width": width, "height": height}
        try:
            loop = asyncio.get_running_loop()
            payload, _, _, kind = await loop.run_in_executor(
                pool, _render_camera, grid, decoder_for(grid), camera_dict,
                cfg.seed, samples, samples_fine, channel)
        except SchemaError as e:
            return error_json(400, str(e))
        media = "image/png" if kind == KIND_RGB else "application/octet-stream"
        return Response(payload, media_type=media)

    @app.websocket("/v1/stream")
    async def stream(ws: WebSocket, id: str):
        await ws.accept()
        session = Session(uuid.uuid4().hex[:12], id)
        queue: asyncio.Queue = asyncio.Queue()

        async def reader():
            try:
                while True:
                    await queue.put(await ws.receive_text())
            except WebSocketDisconnect:
                await queue.put(None)
            except RuntimeError:
                await queue.put(None)

        reader_task = asyncio.create_task(reader())
        loop = asyncio.get_running_loop()
        try:
            closing = False
            while not closing:
                msg = await queue.get()
                skipped = 0
                # latest-wins: drain anything that queued up while rendering
                while not queue.empty():
                    nxt = queue.get_nowait()
                    if nxt is None:
                        closing = True
                        break
                    msg = nxt
                    skipped += 1
                if msg is None:
                    break
                session.last_activity = time.monotonic()
                frame_id, err = 0, None
                try:
                    parsed = json.loads(msg)
                    if not isinstance(parsed, dict):
                        raise SchemaError("camera message: expected a JSON object")
                    frame_id = int(parsed.pop("frame_id", 0))
                    channel = parsed.pop("channel", "rgb")
                    samples = int(parsed.pop("samples", session.samples))
                    samples_fine = int(parsed.pop("samples_fine", session.samples_fine))
                    if channel not in ("rgb", "depth"):
                        raise SchemaError(f"camera message: unknown channel {channel!r}")
                    if samples < 1 or samples_fine < 0:
                        raise SchemaError("camera message: invalid sample counts")
                    grid = triplanes.get(session.triplane_id)
                    if grid is None:
                        raise SchemaError(
                            f"unknown triplane id {session.triplane_id!r}")
                    session.samples, session.samples_fine = samples, samples_fine
                    payload, w, h, kind = await loop.run_in_executor(
                        pool, _render_camera, grid, decoder_for(grid), parsed,
                        cfg.seed, samples, samples_fine, channel)
                except (json.JSONDecodeError, SchemaError, ValueError) as e:
                    err = str(e)
                if err is not None:
                    frame = encode_frame(frame_id, 0, 0, KIND_ERROR, skipped,
                                         err.encode("utf-8"))
                else:
                    frame = encode_frame(frame_id, w, h, kind, skipped, payload)
                await ws.send_bytes(frame)
                session.frames_sent += 1
        except WebSocketDisconnect:
            pass
        finally:
            reader_task.cancel()

    return app
