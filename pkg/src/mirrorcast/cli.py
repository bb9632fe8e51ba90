"""Command-line surface: synth, detect, compose, calibrate, bench.

Exit codes: 0 success, 1 operational failure, 2 usage error. All flags
are long-form `--key value`; there are no positional arguments. Result
files appear only on success paths; partially written sequences are
removed when a command aborts.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .compose import compose_frame
from .geometry import (
    GeometryError,
    dlt_homography,
    homography_from_text,
    homography_to_text,
)
from .image import Image
from .markers import detect_markers, marker_bank
from .media import (
    Config,
    ConfigError,
    QuadMotion,
    SequenceError,
    frame_name,
    load_config,
    read_sequence,
    synth_feed,
    synth_scene_frames,
    write_manifest,
    write_ppm,
)

PRESETS = {
    "static": QuadMotion(center=(320.0, 240.0), drift_amp=(0.0, 0.0), tilt_amp=0.0),
    "drift": QuadMotion(center=(320.0, 240.0)),
    "tilt": QuadMotion(center=(320.0, 240.0), drift_amp=(3.0, 2.0), tilt_amp=0.06),
}

SYNTH_WIDTH, SYNTH_HEIGHT = 640, 480


class _Cleanup:
    """Tracks files written by a command so failures leave no partial output."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path: Path):
        self.paths.append(Path(path))

    def discard_all(self):
        for p in self.paths:
            try:
                p.unlink()
            except OSError:
                pass


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cleanup = _Cleanup()
    try:
        records = []
        motion = PRESETS[args.preset]
        for img, rec in synth_scene_frames(
            args.seed, args.frames, motion=motion,
            noise_sigma=args.noise, blur_sigma=args.blur,
            width=SYNTH_WIDTH, height=SYNTH_HEIGHT,
        ):
            path = out_dir / frame_name(rec.frame)
            write_ppm(img, path)
            cleanup.add(path)
            records.append(rec)
        write_manifest(records, out_dir / "manifest.txt")
    except (ValueError, OSError) as exc:
        cleanup.discard_all()
        print(f"synth failed: {exc}", file=sys.stderr)
        return 1
    return 0


def cmd_detect(args) -> int:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        print(f"detect failed: {exc}", file=sys.stderr)
        return 1
    try:
        seq = read_sequence(args.scene)
    except SequenceError as exc:
        print(f"detect failed: {exc}", file=sys.stderr)
        return 1
    bank = marker_bank(cfg.detect_marker_side, cfg.detect_classes)
    params = cfg.detection_params()
    lines = []
    for k, frame in enumerate(seq):
        for hit in detect_markers(frame, bank, params):
            cx, cy = hit.center
            lines.append(f"{k} {hit.class_id} {cx:.4f} {cy:.4f} {hit.score:.6f}")
    Path(args.out).write_text("\n".join(lines) + ("\n" if lines else ""))
    return 0


def cmd_compose(args) -> int:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        print(f"compose failed: {exc}", file=sys.stderr)
        return 1
    rectify_h = None
    if args.rectify:
        try:
            rectify_h = homography_from_text(Path(args.rectify).read_text())
        except (OSError, GeometryError) as exc:
            print(f"compose failed: bad rectification file: {exc}", file=sys.stderr)
            return 1
    try:
        scene_seq = read_sequence(args.scene)
        feed_seq = read_sequence(args.feed)
    except SequenceError as exc:
        print(f"compose failed: {exc}", file=sys.stderr)
        return 1
    n = min(len(scene_seq), len(feed_seq))
    if len(scene_seq) != len(feed_seq):
        print(
            f"warning: scene has {len(scene_seq)} frames, feed has {len(feed_seq)}; "
            f"composing {n}",
            file=sys.stderr,
        )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    compose_cfg = cfg.compose_config(rectify_h=rectify_h)
    cleanup = _Cleanup()
    stats_lines = []
    try:
        tracks = {}
        background = None
        for k in range(n):
            scene = scene_seq[k]
            feed = feed_seq[k]
            if background is None:
                background = feed
            out, stats = compose_frame(scene, feed, tracks, compose_cfg, background)
            path = out_dir / frame_name(k)
            write_ppm(out, path)
            cleanup.add(path)
            stats_lines.append(stats.format_line(k))
    except (ValueError, OSError) as exc:
        cleanup.discard_all()
        print(f"compose failed: {exc}", file=sys.stderr)
        return 1
    if args.stats:
        Path(args.stats).write_text("\n".join(stats_lines) + "\n")
    return 0


def cmd_calibrate(args) -> int:
    try:
        text = Path(args.pairs).read_text()
    except OSError as exc:
        print(f"calibrate failed: {exc}", file=sys.stderr)
        return 1
    src, dst = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        parts = stripped.split()
        if len(parts) != 4:
            print(
                f"calibrate failed: line {lineno}: expected `x y x' y'`, got {line!r}",
                file=sys.stderr,
            )
            return 1
        try:
            x, y, xp, yp = (float(p) for p in parts)
        except ValueError:
            print(f"calibrate failed: line {lineno}: bad number in {line!r}", file=sys.stderr)
            return 1
        src.append((x, y))
        dst.append((xp, yp))
    if len(src) < 4:
        print(f"calibrate failed: need at least 4 pairs, got {len(src)}", file=sys.stderr)
        return 1
    try:
        h = dlt_homography(np.array(src), np.array(dst))
    except GeometryError as exc:
        print(f"calibrate failed: {exc}", file=sys.stderr)
        return 1
    Path(args.out).write_text(homography_to_text(h))
    return 0


def cmd_bench(args) -> int:
    from .media import SubjectMotion

    width, height = args.width, args.height
    motion = QuadMotion(center=(width / 2.0, height / 2.0),
                        half_w=width * 0.17, half_h=height * 0.17)
    scenes_u8 = []
    for img, _rec in synth_scene_frames(args.seed, args.frames, motion=motion,
                                        width=width, height=height):
        scenes_u8.append(np.rint(img.pixels * 255.0).astype(np.uint8))
    feeds, _truths = synth_feed(
        args.seed + 1, min(args.frames, 90), width=width, height=height,
        motion=SubjectMotion(center=(width / 2.0, height / 2.0),
                             amp=(width * 0.1, height * 0.06)),
    )
    feeds_u8 = [np.rint(f.pixels * 255.0).astype(np.uint8) for f in feeds]

    cfg = Config().compose_config()
    tracks = {}
    background = Image(feeds_u8[0] / 255.0)
    detect_ms, warp_ms, total_ms = [], [], []
    elapsed = 0.0
    for k in range(args.frames):
        scene = Image(scenes_u8[k] / 255.0)
        feed = Image(feeds_u8[k % len(feeds_u8)] / 255.0)
        t0 = time.perf_counter()
        _out, stats = compose_frame(scene, feed, tracks, cfg, background)
        elapsed += time.perf_counter() - t0
        detect_ms.append(stats.detect_ms)
        warp_ms.append(stats.warp_ms)
        total_ms.append(stats.total_ms)
    fps = args.frames / elapsed if elapsed > 0 else float("inf")
    print(f"fps={fps:.2f}")
    print(f"stage=detect mean_ms={np.mean(detect_ms):.2f}")
    print(f"stage=warp mean_ms={np.mean(warp_ms):.2f}")
    print(f"stage=total mean_ms={np.mean(total_ms):.2f}")
    print(f"frames={args.frames} size={width}x{height}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mirrorcast",
        description="Detect marker-designated mirror regions and composite a camera feed into them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene sequence plus ground truth")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--frames", required=True, type=int)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--noise", type=float, default=0.0, help="additive Gaussian noise sigma")
    p.add_argument("--blur", type=float, default=0.0, help="Gaussian blur sigma")
    p.add_argument("--preset", choices=sorted(PRESETS), default="drift")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("detect", help="detect markers in every frame of a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="detections text file")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("compose", help="composite a feed into a scene's mirror regions")
    p.add_argument("--scene", required=True)
    p.add_argument("--feed", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output frame directory")
    p.add_argument("--stats", default=None, help="per-frame stats text file")
    p.add_argument("--rectify", default=None, help="9-number homography file for feed rectification")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("calibrate", help="fit a rectification homography from point pairs")
    p.add_argument("--pairs", required=True, help="text file of `x y x' y'` lines")
    p.add_argument("--out", required=True, help="9-number homography file")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("bench", help="measure end-to-end compositing throughput")
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--frames", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def _tune_allocator() -> None:
    """Keep freed frame-sized buffers mapped between iterations.

    glibc returns multi-MB allocations to the kernel on free by default,
    which makes every per-frame numpy temporary page-fault afresh and
    roughly triples steady-state frame times. Raising the mmap and trim
    thresholds once at startup removes that tax; harmless elsewhere.
    """
    import ctypes

    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def main(argv=None) -> int:
    _tune_allocator()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("synth", "bench") and args.frames < 1:
        parser.error("--frames must be >= 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
