// Single-page orbit viewer: drag to orbit, wheel to dolly, sliders for
// roll/focal/samples, RGB/depth toggle, latency overlay, auto-reconnect.

import { CameraState } from "./camera-state.js";
import { StreamConnection } from "./connection.js";
import { LatencyTracker } from "./latency.js";
import { decodePfm, errorReason, Frame, KIND_DEPTH, KIND_ERROR } from "./protocol.js";

export interface ViewerOptions {
  serviceUrl: string; // e.g. http://127.0.0.1:8089
  triplaneId: string;
}

export function startViewer(root: HTMLElement, options: ViewerOptions): () => void {
  const canvas = root.querySelector<HTMLCanvasElement>("#view")!;
  const banner = root.querySelector<HTMLElement>("#banner")!;
  const stats = root.querySelector<HTMLElement>("#stats")!;
  const ctx = canvas.getContext("2d")!;

  const camera = new CameraState({ width: canvas.width, height: canvas.height });
  const latency = new LatencyTracker();
  const wsUrl = options.serviceUrl.replace(/^http/, "ws")
    + `/v1/stream?id=${encodeURIComponent(options.triplaneId)}`;

  const drawFrame = async (frame: Frame) => {
    if (frame.kind === KIND_ERROR) {
      banner.textContent = `server error: ${errorReason(frame)}`;
      banner.hidden = false;
      return;
    }
    banner.hidden = true;
    if (frame.kind === KIND_DEPTH) {
      drawDepth(ctx, frame);
    } else {
      const blob = new Blob([frame.payload.slice()], { type: "image/png" });
      const image = await createImageBitmap(blob);
      ctx.drawImage(image, 0, 0, canvas.width, canvas.height);
      image.close();
    }
    const ms = latency.received(frame.frameId);
    const fmt = (v?: number) => (v === undefined ? "-" : v.toFixed(0));
    stats.textContent =
      `frame ${frame.frameId} | last ${fmt(ms)} ms | ` +
      `p50 ${fmt(latency.p50)} ms | p95 ${fmt(latency.p95)} ms` +
      (frame.skipped ? ` | coalesced ${frame.skipped}` : "");
  };

  const connection = new StreamConnection(wsUrl, {
    onFrame: (frame) => void drawFrame(frame),
    onStatus: (status) => {
      if (status === "open") {
        banner.hidden = true;
      } else if (status !== "closed") {
        banner.textContent = status === "retrying"
          ? "connection lost - retrying" : "connecting";
        banner.hidden = false;
      }
    },
    onSend: (message) => latency.sent(message.frame_id)
  });

  const push = () => connection.send(camera.nextMessage());

  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener("pointerdown", (ev) => {
    dragging = true;
    lastX = ev.clientX;
    lastY = ev.clientY;
    canvas.setPointerCapture(ev.pointerId);
  });
  canvas.addEventListener("pointermove", (ev) => {
    if (!dragging) return;
    camera.drag(ev.clientX - lastX, ev.clientY - lastY);
    lastX = ev.clientX;
    lastY = ev.clientY;
    push();
  });
  canvas.addEventListener("pointerup", () => { dragging = false; });
  canvas.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    camera.wheel(-Math.sign(ev.deltaY));
    push();
  }, { passive: false });

  const bindSlider = (id: string, apply: (v: number) => void) => {
    const el = root.querySelector<HTMLInputElement>(id);
    el?.addEventListener("input", () => {
      apply(parseFloat(el.value));
      push();
    });
  };
  bindSlider("#roll", (v) => camera.setRoll(v));
  bindSlider("#focal", (v) => camera.setFocal(v));
  bindSlider("#samples", (v) => camera.setSamples(v));
  root.querySelector<HTMLInputElement>("#depth-toggle")?.addEventListener(
    "change", () => { camera.toggleChannel(); push(); });
  root.querySelector<HTMLInputElement>("#unclamped")?.addEventListener(
    "change", (ev) => {
      camera.setClamped(!(ev.target as HTMLInputElement).checked);
    });

  connection.connect();
  push();
  return () => connection.close();
}

function drawDepth(ctx: CanvasRenderingContext2D, frame: Frame): void {
  const { width, height, values } = decodePfm(frame.payload);
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of values) {
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  const span = hi > lo ? hi - lo : 1;
  const img = ctx.createImageData(width, height);
  for (let i = 0; i < values.length; i++) {
    // near = bright, far = dark grayscale ramp
    const g = Math.round(255 * (1 - (values[i] - lo) / span));
    img.data[i * 4] = g;
    img.data[i * 4 + 1] = g;
    img.data[i * 4 + 2] = g;
    img.data[i * 4 + 3] = 255;
  }
  ctx.putImageData(img, 0, 0);
}
