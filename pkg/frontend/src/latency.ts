// Rolling per-frame latency statistics over the last N frames.

export class LatencyTracker {
  private samples: number[] = [];
  private inflightStart = new Map<number, number>();

  constructor(private windowSize = 120,
              private clock: () => number = () => performance.now()) {}

  sent(frameId: number): void {
    this.inflightStart.set(frameId, this.clock());
  }

  received(frameId: number): number | undefined {
    const start = this.inflightStart.get(frameId);
    if (start === undefined) return undefined;
    this.inflightStart.delete(frameId);
    const ms = this.clock() - start;
    this.samples.push(ms);
    if (this.samples.length > this.windowSize) {
      this.samples.splice(0, this.samples.length - this.windowSize);
    }
    return ms;
  }

  get last(): number | undefined {
    return this.samples.at(-1);
  }

  percentile(p: number): number | undefined {
    if (this.samples.length === 0) return undefined;
    const sorted = [...this.samples].sort((a, b) => a - b);
    const idx = Math.min(sorted.length - 1,
      Math.ceil((p / 100) * sorted.length) - 1);
    return sorted[Math.max(0, idx)];
  }

  get p50(): number | undefined {
    return this.percentile(50);
  }

  get p95(): number | undefined {
    return this.percentile(95);
  }

  get count(): number {
    return this.samples.length;
  }
}
