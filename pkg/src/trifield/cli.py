"""Command-line interface.

Subcommands: render, orbit, fit, gradcheck, metrics, bench, serve. Every
command is reproducible byte-for-byte under fixed --seed and any
--threads value, and writes only to paths given explicitly.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import io_formats as iof
from .camera import Camera, Intrinsics, OrbitPose, pose_from_orbit
from .distill import DistillConfig, distill_fit, make_procedural_scene, write_trace_csv
from .errors import DomainError, SchemaError
from .render import SamplingConfig, render
from .triplane import FieldDecoder, TriplaneGrid

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

SCENE_KINDS = ("sphere", "two_spheres", "slab", "gaussian", "uniform", "empty")


def default_decoder(seed: int, channels: int = 32, n_features: int = 32) -> FieldDecoder:
    """The decoder used when no decoder file is supplied, derived from the seed."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(0xDEC0DE,)))
    return FieldDecoder.make(rng, channels=channels, n_features=n_features)


def load_decoder(args, grid: TriplaneGrid) -> FieldDecoder:
    if getattr(args, "decoder", None):
        return iof.read_decoder(args.decoder)
    return default_decoder(args.seed, grid.channels, grid.channels)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trifield")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a triplane file from a camera JSON")
    p.add_argument("--triplane", required=True)
    p.add_argument("--decoder")
    p.add_argument("--camera", help="camera JSON path (defaults apply if omitted)")
    p.add_argument("--samples", "--samples-coarse", dest="samples_coarse",
                   type=int, default=48)
    p.add_argument("--samples-fine", type=int, default=48)
    p.add_argument("--no-jitter", action="store_true",
                   help="deterministic midpoint depth samples")
    p.add_argument("--out-rgb")
    p.add_argument("--out-depth")
    p.add_argument("--out-upscaled", help="write the 4x bilinear-upsampled RGB here")

    p = sub.add_parser("orbit", help="render a yaw sweep to a frames directory")
    p.add_argument("--triplane", required=True)
    p.add_argument("--decoder")
    p.add_argument("--camera")
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--yaw-max-deg", type=float, default=49.0)
    p.add_argument("--samples", dest="samples_coarse", type=int, default=48)
    p.add_argument("--samples-fine", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("fit", help="distill a procedural scene into a triplane")
    p.add_argument("--scene", choices=SCENE_KINDS, default="sphere")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--out-triplane", required=True)
    p.add_argument("--out-decoder")
    p.add_argument("--out-trace", help="loss trace CSV path")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("metrics", help="score an image (and depth) pair")
    p.add_argument("--pred", required=True, help="prediction PNG")
    p.add_argument("--target", required=True, help="target PNG")
    p.add_argument("--pred-depth", help="prediction PFM")
    p.add_argument("--target-depth", help="target PFM")
    p.add_argument("--landmarks-src", help="CSV of x,y landmarks on the prediction")
    p.add_argument("--landmarks-dst", help="CSV of x,y landmarks on the target")
    p.add_argument("--align", action="store_true", help="rigidly align before scoring")
    p.add_argument("--out", help="report JSON path (stdout if omitted)")

    p = sub.add_parser("bench", help="render throughput table")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--samples", dest="samples_coarse", type=int, default=48)
    p.add_argument("--samples-fine", type=int, default=48)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--thread-counts", default="1,8")

    p = sub.add_parser("serve", help="start the HTTP/WebSocket frame service")
    p.add_argument("--port", type=int, default=8089)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--max-upload-mib", type=int, default=256)

    return parser


def _load_camera(args, box_scale: float) -> Camera:
    if getattr(args, "camera", None):
        pose, intr, near, far = iof.read_camera_json(args.camera, box_scale)
    else:
        pose, intr, near, far = iof.camera_from_dict({}, box_scale)
    return Camera(pose_from_orbit(pose), intr, near, far)


def cmd_render(args) -> int:
    grid = iof.read_triplane(args.triplane)
    dec = load_decoder(args, grid)
    cam = _load_camera(args, grid.box_scale)
    cfg = SamplingConfig(n_coarse=args.samples_coarse, n_fine=args.samples_fine,
                         stratified=not args.no_jitter,
                         width=cam.intrinsics.width, height=cam.intrinsics.height)
    out = render(grid, dec, cam, cfg, seed=args.seed, threads=args.threads)
    if args.out_rgb:
        iof.write_rgb_png(args.out_rgb, out.rgb)
    if args.out_depth:
        iof.write_depth_pfm(args.out_depth, out.depth)
    if args.out_upscaled:
        from .render import upsample_bilinear
        iof.write_rgb_png(args.out_upscaled, upsample_bilinear(out.rgb))
    if not (args.out_rgb or args.out_depth or args.out_upscaled):
        print("render: nothing to write (pass --out-rgb/--out-depth)", file=sys.stderr)
    return EXIT_OK


def cmd_orbit(args) -> int:
    grid = iof.read_triplane(args.triplane)
    dec = load_decoder(args, grid)
    base = _load_camera(args, grid.box_scale)
    os.makedirs(args.out, exist_ok=True)
    cfg = SamplingConfig(n_coarse=args.samples_coarse, n_fine=args.samples_fine,
                         width=base.intrinsics.width, height=base.intrinsics.height)
    yaws = np.linspace(-args.yaw_max_deg, args.yaw_max_deg, args.frames)
    for i, yaw in enumerate(yaws):
        pose = OrbitPose(yaw=math.radians(float(yaw)))
        cam = Camera(pose_from_orbit(pose), base.intrinsics, base.near, base.far)
        out = render(grid, dec, cam, cfg, seed=args.seed, threads=args.threads)
        iof.write_rgb_png(os.path.join(args.out, f"frame_{i:04d}.png"), out.rgb)
    if args.verbose:
        print(f"orbit: wrote {args.frames} frames to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    scene = make_procedural_scene(args.scene)
    cfg = DistillConfig(seed=args.seed, threads=args.threads)
    result = distill_fit(scene, n_views=args.views, steps=args.steps, cfg=cfg)
    iof.write_triplane(args.out_triplane, result.grid)
    if args.out_decoder:
        iof.write_decoder(args.out_decoder, result.decoder)
    if args.out_trace:
        write_trace_csv(args.out_trace, result.trace)
    first, last = result.trace[0, 0], result.trace[-1, 0]
    print(f"fit: {args.scene} loss {first:.6g} -> {last:.6g} "
          f"({last / first:.4f}x) over {args.steps} steps")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck_suite import run_gradcheck_suite
    reports = run_gradcheck_suite(n_probe=args.probes, h=args.step, seed=args.seed)
    worst = 0.0
    for name, rep in reports:
        status = "ok" if rep.max_rel_error <= args.tolerance else "FAIL"
        print(f"gradcheck {name}: max rel err {rep.max_rel_error:.3e} [{status}]")
        worst = max(worst, rep.max_rel_error)
    if worst > args.tolerance:
        print(f"gradcheck: FAILED (worst {worst:.3e} > {args.tolerance:g})")
        return EXIT_RUNTIME
    print(f"gradcheck: all passed (worst {worst:.3e} <= {args.tolerance:g})")
    return EXIT_OK


def _read_landmarks(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def _luminance(rgb: np.ndarray) -> np.ndarray:
    return 0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]


def cmd_metrics(args) -> int:
    from .metrics import evaluate_pair
    pred = _luminance(iof.read_rgb_png(args.pred))
    target = _luminance(iof.read_rgb_png(args.target))
    pred_depth = iof.read_depth_pfm(args.pred_depth) if args.pred_depth else None
    target_depth = iof.read_depth_pfm(args.target_depth) if args.target_depth else None
    lm_src = _read_landmarks(args.landmarks_src) if args.landmarks_src else None
    lm_dst = _read_landmarks(args.landmarks_dst) if args.landmarks_dst else None
    report = evaluate_pair(pred, target, pred_depth, target_depth,
                           lm_src, lm_dst, align=args.align)
    text = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        print(text, end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    grid = TriplaneGrid.random(rng, args.resolution, args.channels)
    dec = default_decoder(args.seed, args.channels, args.channels)
    cam = Camera.from_orbit(OrbitPose(), Intrinsics(width=args.size, height=args.size))
    cfg = SamplingConfig(n_coarse=args.samples_coarse, n_fine=args.samples_fine,
                         width=args.size, height=args.size)
    pixels = args.size * args.size
    thread_counts = [int(v) for v in args.thread_counts.split(",") if v]

    print(f"bench: {args.size}x{args.size} at {args.samples_coarse}+"
          f"{args.samples_fine} samples, grid {args.resolution}^2x{args.channels}")
    print(f"{'threads':>8} {'seconds':>10} {'pixels/s':>12}")
    rates = {}
    for t in thread_counts:
        render(grid, dec, cam, cfg, seed=args.seed, threads=t)  # warm-up
        t0 = time.perf_counter()
        render(grid, dec, cam, cfg, seed=args.seed, threads=t)
        dt = time.perf_counter() - t0
        rates[t] = pixels / dt
        print(f"{t:>8} {dt:>10.3f} {pixels / dt:>12.1f}")
    if 1 in rates and len(rates) > 1:
        best = max(t for t in rates if t != 1)
        print(f"bench: {best}-thread speedup {rates[best] / rates[1]:.2f}x "
              f"on {os.cpu_count()} cores")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceConfig, create_app
    app = create_app(ServiceConfig(seed=args.seed, workers=args.workers,
                                   max_upload_mib=args.max_upload_mib))
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


COMMANDS = {
    "render": cmd_render,
    "orbit": cmd_orbit,
    "fit": cmd_fit,
    "gradcheck": cmd_gradcheck,
    "metrics": cmd_metrics,
    "bench": cmd_bench,
    "serve": cmd_serve,
}


def run(argv) -> int:
    """Parse argv and execute; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    if args.threads < 1:
        print("trifield: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (DomainError, SchemaError, iof.TriplaneFormatError,
            iof.DecoderFormatError, iof.PfmFormatError, OSError) as e:
        print(f"trifield {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
