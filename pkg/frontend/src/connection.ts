// Stream connection with send-on-ack flow control and reconnect backoff.
//
// At most one camera message is in flight; input arriving while a render
// is pending overwrites a single local slot (the server additionally
// coalesces, so bursts cannot queue up anywhere). On drop, reconnects
// with exponential backoff and resends the current camera.

import { CameraMessage, decodeFrame, Frame } from "./protocol.js";

type WebSocketLike = {
  binaryType: string;
  readyState: number;
  onopen: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: ArrayBuffer | string }) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  send(data: string): void;
  close(): void;
};

export type WebSocketFactory = (url: string) => WebSocketLike;

export interface ConnectionEvents {
  onFrame?: (frame: Frame) => void;
  onStatus?: (status: "connecting" | "open" | "retrying" | "closed") => void;
  onSend?: (message: CameraMessage) => void;
}

export const BACKOFF_BASE_MS = 250;
export const BACKOFF_MAX_MS = 8000;

export class StreamConnection {
  private ws: WebSocketLike | null = null;
  private pending: CameraMessage | null = null;
  private awaitingAck: CameraMessage | null = null;
  private inflight = false;
  private retries = 0;
  private closed = false;
  private retryTimer: ReturnType<typeof setTimeout> | null = null;
  lastFrameId = -1;

  constructor(
    private url: string,
    private events: ConnectionEvents = {},
    private makeSocket: WebSocketFactory =
      (u) => new (globalThis as any).WebSocket(u) as WebSocketLike
  ) {}

  connect(): void {
    if (this.closed) return;
    this.events.onStatus?.("connecting");
    const ws = this.makeSocket(this.url);
    ws.binaryType = "arraybuffer";
    ws.onopen = () => {
      this.retries = 0;
      this.inflight = false;
      // camera state survives a drop: re-send whatever was never answered
      if (this.pending === null && this.awaitingAck !== null) {
        this.pending = this.awaitingAck;
      }
      this.awaitingAck = null;
      this.events.onStatus?.("open");
      this.flush();
    };
    ws.onmessage = (ev) => {
      if (typeof ev.data === "string") return;
      const frame = decodeFrame(ev.data);
      if (frame.frameId >= this.lastFrameId) this.lastFrameId = frame.frameId;
      this.inflight = false;
      this.awaitingAck = null;
      this.events.onFrame?.(frame);
      this.flush();
    };
    ws.onclose = () => this.scheduleRetry();
    ws.onerror = () => { /* close follows */ };
    this.ws = ws;
  }

  // Queue a camera message; the newest pending message wins.
  send(message: CameraMessage): void {
    this.pending = message;
    this.flush();
  }

  private flush(): void {
    if (this.inflight || !this.pending || !this.ws) return;
    if (this.ws.readyState !== 1 /* OPEN */) return;
    const message = this.pending;
    this.pending = null;
    this.inflight = true;
    this.awaitingAck = message;
    this.events.onSend?.(message);
    this.ws.send(JSON.stringify(message));
  }

  private scheduleRetry(): void {
    if (this.closed) {
      this.events.onStatus?.("closed");
      return;
    }
    this.inflight = false;
    this.events.onStatus?.("retrying");
    const delay = Math.min(BACKOFF_MAX_MS, BACKOFF_BASE_MS * 2 ** this.retries);
    this.retries += 1;
    this.retryTimer = setTimeout(() => this.connect(), delay);
  }

  close(): void {
    this.closed = true;
    if (this.retryTimer) clearTimeout(this.retryTimer);
    this.ws?.close();
    this.events.onStatus?.("closed");
  }
}
