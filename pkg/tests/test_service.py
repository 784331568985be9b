import json
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from trifield import TriplaneGrid
from trifield.io_formats import depth_from_pfm_bytes, triplane_to_bytes
from trifield.service import (KIND_DEPTH, KIND_ERROR, KIND_RGB, ServiceConfig,
                              Session, create_app, decode_frame, encode_frame)


@pytest.fixture()
def client():
    app = create_app(ServiceConfig(seed=0, workers=2))
    with TestClient(app) as c:
        yield c


def upload_grid(client, seed=0, resolution=12, channels=8):
    grid = TriplaneGrid.random(np.random.default_rng(seed), resolution, channels)
    r = client.post("/v1/triplanes", content=triplane_to_bytes(grid))
    assert r.status_code == 200
    return r.json()["id"]


SMALL = dict(width=24, height=24, samples=8, samples_fine=0, focal=2.0)


class TestFrameHeader:
    def test_round_trip(self):
        frame = encode_frame(1234, 64, 48, KIND_RGB, 3, b"payload")
        fid, w, h, kind, skipped, payload = decode_frame(frame)
        assert (fid, w, h, kind, skipped, payload) == (1234, 64, 48, KIND_RGB,
                                                       3, b"payload")
        assert len(frame) == 16 + 7
        assert frame[:4] == b"FRME"

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError):
            decode_frame(b"XXXX" + b"\x00" * 20)


class TestHttpApi:
    def test_healthz(self, client):
        r = client.get("/v1/healthz")
        assert r.status_code == 200 and r.json()["ok"] is True

    def test_upload_render_delete_cycle(self, client):
        tid = upload_grid(client)
        r = client.get(f"/v1/triplanes/{tid}/render", params=SMALL)
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"
        assert r.content[:8] == b"\x89PNG\r\n\x1a\n"
        assert client.delete(f"/v1/triplanes/{tid}").status_code == 204
        assert client.get(f"/v1/triplanes/{tid}/render").status_code == 404

    def test_depth_channel_is_pfm(self, client):
        tid = upload_grid(client)
        r = client.get(f"/v1/triplanes/{tid}/render",
                       params=dict(SMALL, channel="depth"))
        assert r.status_code == 200
        depth = depth_from_pfm_bytes(r.content)
        assert depth.shape == (24, 24)

    def test_unknown_id_404_json(self, client):
        r = client.get("/v1/triplanes/deadbeef/render")
        assert r.status_code == 404
        assert "error" in r.json()
        assert client.delete("/v1/triplanes/deadbeef").status_code == 404

    def test_malformed_upload_400_verbatim_parse_error(self, client):
        r = client.post("/v1/triplanes", content=b"not a triplane")
        assert r.status_code == 400
        assert "magic" in r.json()["error"] or "header" in r.json()["error"]

    def test_oversize_upload_413(self):
        app = create_app(ServiceConfig(max_upload_mib=1))
        with TestClient(app) as small_client:
            r = small_client.post("/v1/triplanes", content=b"\x00" * (2 << 20))
            assert r.status_code == 413

    def test_render_matches_cli_bytes(self, client, tmp_path):
        from trifield.cli import run
        from trifield.io_formats import write_triplane
        grid = TriplaneGrid.random(np.random.default_rng(3), 12, 8)
        r = client.post("/v1/triplanes", content=triplane_to_bytes(grid))
        tid = r.json()["id"]

        rng = np.random.default_rng(7)
        for trial in range(5):
            params = dict(
                pitch_deg=float(rng.uniform(-26, 26)),
                yaw_deg=float(rng.uniform(-49, 49)),
                roll_deg=float(rng.uniform(-4, 4)),
                radius=float(rng.uniform(2.5, 2.9)),
                focal=float(rng.uniform(1.5, 3.0)),
                width=20, height=20, samples=6, samples_fine=4)
            http_png = client.get(f"/v1/triplanes/{tid}/render", params=params)
            assert http_png.status_code == 200

            cam = {k: params[k] for k in ("pitch_deg", "yaw_deg", "roll_deg",
                                          "radius", "focal", "width", "height")}
            cam_path = tmp_path / f"cam{trial}.json"
            cam_path.write_text(json.dumps(cam))
            grid_path = tmp_path / "grid.trpl"
            write_triplane(grid_path, grid)
            out_png = tmp_path / f"cli{trial}.png"
            assert run(["render", "--triplane", str(grid_path), "--camera",
                        str(cam_path), "--samples", "6", "--samples-fine", "4",
                        "--out-rgb", str(out_png)]) == 0
            assert out_png.read_bytes() == http_png.content

    def test_concurrent_renders_match_serial(self, client):
        tid = upload_grid(client, seed=5)
        serial = client.get(f"/v1/triplanes/{tid}/render", params=SMALL).content
        results = {}

        def worker(key):
            results[key] = client.get(f"/v1/triplanes/{tid}/render",
                                      params=SMALL).content

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results[0] == serial and results[1] == serial


def _camera_message(frame_id, **kw):
    msg = dict(SMALL, frame_id=frame_id)
    msg.update(kw)
    return json.dumps(msg)


class TestStream:
    def test_one_message_one_frame(self, client):
        tid = upload_grid(client)
        with client.websocket_connect(f"/v1/stream?id={tid}") as ws:
            ws.send_text(_camera_message(42, yaw_deg=10.0))
            fid, w, h, kind, skipped, payload = decode_frame(ws.receive_bytes())
            assert fid == 42 and (w, h) == (24, 24)
            assert kind == KIND_RGB and skipped == 0
            assert payload[:8] == b"\x89PNG\r\n\x1a\n"

    def test_depth_frames(self, client):
        tid = upload_grid(client)
        with client.websocket_connect(f"/v1/stream?id={tid}") as ws:
            ws.send_text(_camera_message(1, channel="depth"))
            fid, w, h, kind, _, payload = decode_frame(ws.receive_bytes())
            assert kind == KIND_DEPTH
            assert depth_from_pfm_bytes(payload).shape == (24, 24)

    def test_frame_equals_http_render(self, client):
        tid = upload_grid(client)
        params = dict(SMALL, yaw_deg=17.5, pitch_deg=-8.0)
        http = client.get(f"/v1/triplanes/{tid}/render", params=params).content
        with client.websocket_connect(f"/v1/stream?id={tid}") as ws:
            ws.send_text(_camera_message(9, yaw_deg=17.5, pitch_deg=-8.0))
            *_, payload = decode_frame(ws.receive_bytes())
        assert payload == http

    def test_burst_coalesces_to_latest(self, client):
        tid = upload_grid(client)
        with client.websocket_connect(f"/v1/stream?id={tid}") as ws:
            for i in range(10):
                ws.send_text(_camera_message(i + 1, yaw_deg=float(i)))
            got = []
            while True:
                fid, _, _, kind, skipped, payload = decode_frame(ws.receive_bytes())
                assert kind == KIND_RGB
                got.append((fid, skipped))
                if fid == 10:
                    break
            # every message is either rendered or reported as skipped
            assert sum(1 + s for _, s in got) == 10
            assert [f for f, _ in got] == sorted(f for f, _ in got)
            # the final frame is the render of the final camera
            http = client.get(f"/v1/triplanes/{tid}/render",
                              params=dict(SMALL, yaw_deg=9.0)).content
            assert payload == http

    def test_malformed_message_keeps_connection(self, client):
        tid = upload_grid(client)
        with client.websocket_connect(f"/v1/stream?id={tid}") as ws:
            ws.send_text("{broken")
            fid, _, _, kind, _, payload = decode_frame(ws.receive_bytes())
            assert kind == KIND_ERROR
            assert len(payload) > 0
            ws.send_text(_camera_message(2))
            fid, _, _, kind, _, _ = decode_frame(ws.receive_bytes())
            assert (fid, kind) == (2, KIND_RGB)

    def test_unknown_camera_key_is_error_frame(self, client):
        tid = upload_grid(client)
        with client.websocket_connect(f"/v1/stream?id={tid}") as ws:
            ws.send_text(json.dumps({"frame_id": 1, "fov": 30}))
            _, _, _, kind, _, payload = decode_frame(ws.receive_bytes())
            assert kind == KIND_ERROR
            assert b"fov" in payload

    def test_deleted_triplane_renders_error_frames(self, client):
        tid = upload_grid(client)
        with client.websocket_connect(f"/v1/stream?id={tid}") as ws:
            ws.send_text(_camera_message(1))
            decode_frame(ws.receive_bytes())
            client.delete(f"/v1/triplanes/{tid}")
            ws.send_text(_camera_message(2))
            _, _, _, kind, _, payload = decode_frame(ws.receive_bytes())
            assert kind == KIND_ERROR
            assert b"unknown triplane" in payload


class TestSession:
    def test_session_tracks_activity(self):
        s = Session("abc", "tid")
        before = s.last_activity
        time.sleep(0.01)
        s.last_activity = time.monotonic()
        assert s.last_activity > before
