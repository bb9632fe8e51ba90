"""Bit-exact media and config I/O plus the synthetic ground-truth generators.

Frames live as binary PPM files (P6 color, P5 gray, maxval 255) in
directories named frame_000000.ppm, frame_000001.ppm, ...; internal
[0,1] intensities quantize as round(v * 255) on write and v / 255 on
read, so a write/read round trip is byte-identical.

Randomness is counter-based SplitMix64 (constants 0x9E3779B97F4A7C15,
0xBF58476D1CE4E5B9, 0x94D049BB133111EB): value j of stream i under seed
s is mix(mix(s + (i+1)*gamma) + (j+1)*gamma). Stateless counters make
every corpus reproducible from (seed, stream, index) alone.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .geometry import Homography, quad_to_quad
from .image import Image, gaussian_filter
from .markers import DetectionParams, paint_marker
from .tracking import TrackParams

_FRAME_RE = re.compile(r"^frame_(\d{6})\.ppm$")

_SM_GAMMA = 0x9E3779B97F4A7C15
_SM_MIX1 = 0xBF58476D1CE4E5B9
_SM_MIX2 = 0x94D049BB133111EB
_MASK64 = 0xFFFFFFFFFFFFFFFF


class PpmError(ValueError):
    """Malformed PPM data; byte_offset points at the offending byte."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class SequenceError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- randomness

def _mix64_scalar(x: int) -> int:
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * _SM_MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _SM_MIX2) & _MASK64
    return z ^ (z >> 31)


class SeededStream:
    """Deterministic value stream (seed, stream_id) -> uniforms/normals."""

    def __init__(self, seed: int, stream: int = 0):
        self._base = _mix64_scalar((seed + (stream + 1) * _SM_GAMMA) & _MASK64)
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        z = (np.uint64(self._base) + idx * np.uint64(_SM_GAMMA)) & np.uint64(_MASK64)
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(_SM_MIX1)) & np.uint64(_MASK64)
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(_SM_MIX2)) & np.uint64(_MASK64)
        return z ^ (z >> np.uint64(31))

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1), 53-bit resolution."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) / float(1 << 53)

    def normals(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller on uniform pairs."""
        m = (n + 1) // 2
        u = self.uniforms(2 * m)
        u1 = 1.0 - u[0::2]  # maps to (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(2.0 * math.pi * u2)
        out[1::2] = r * np.sin(2.0 * math.pi * u2)
        return out[:n]


# ---------------------------------------------------------------- PPM

def write_ppm(img: Image, path) -> None:
    """Binary PPM with the exact header `P6\\n<w> <h>\\n255\\n` (P5 for gray)."""
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    payload = np.rint(img.pixels * 255.0).astype(np.uint8).tobytes()
    Path(path).write_bytes(header + payload)


def read_ppm(path) -> Image:
    data = Path(path).read_bytes()
    if len(data) < 2 or data[0:1] != b"P":
        raise PpmError("not a PPM file (bad magic)", 0)
    magic = data[0:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise PpmError(f"unsupported PPM magic {magic!r} (binary P5/P6 only)", 0)

    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if pos == start:
            raise PpmError("truncated header", start)
        tok = data[start:pos]
        if not tok.isdigit():
            raise PpmError(f"expected integer header field, got {tok!r}", start)
        tokens.append((int(tok), start))

    (width, _), (height, _), (maxval, mv_off) = tokens
    if width < 1 or height < 1:
        raise PpmError(f"bad dimensions {width}x{height}", tokens[0][1])
    if maxval != 255:
        raise PpmError(f"unsupported maxval {maxval} (must be 255)", mv_off)
    if pos >= len(data):
        raise PpmError("missing whitespace after maxval", pos)
    pos += 1  # exactly one whitespace byte separates header from payload

    need = width * height * channels
    if len(data) - pos < need:
        raise PpmError(
            f"short pixel data: need {need} bytes, have {len(data) - pos}", len(data)
        )
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    px = raw.astype(np.float64) / 255.0
    shape = (height, width) if channels == 1 else (height, width, 3)
    return Image(px.reshape(shape))


def ppm_dimensions(path) -> tuple[int, int, int]:
    """(width, height, channels) from the header without decoding pixels."""
    with open(path, "rb") as f:
        head = f.read(64)
    magic = head[0:2]
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise PpmError(f"unsupported PPM magic {magic!r}", 0)
    m = re.match(rb"P[56]\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)", head)
    if not m:
        raise PpmError("cannot parse dimensions", 2)
    return int(m.group(1)), int(m.group(2)), channels


# ---------------------------------------------------------------- sequences

@dataclass(eq=False)
class FrameSequence:
    """Ordered PPM frames in one directory; loads lazily through indexing."""

    directory: Path
    paths: list
    width: int
    height: int
    fps: float = 30.0

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i: int) -> Image:
        return read_ppm(self.paths[i])

    def __iter__(self):
        for p in self.paths:
            yield read_ppm(p)


def frame_name(index: int) -> str:
    return f"frame_{index:06d}.ppm"


def read_sequence(directory, fps: float = 30.0) -> FrameSequence:
    directory = Path(directory)
    if not directory.is_dir():
        raise SequenceError(f"not a directory: {directory}")
    indexed = {}
    for p in directory.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            indexed[int(m.group(1))] = p
    if not indexed:
        raise SequenceError(f"no frame_NNNNNN.ppm files in {directory}")
    paths = []
    for i in range(len(indexed)):
        if i not in indexed:
            raise SequenceError(f"missing frame {i} in {directory}")
        paths.append(indexed[i])
    w, h, _ = ppm_dimensions(paths[0])
    for p in paths[1:]:
        w2, h2, _ = ppm_dimensions(p)
        if (w2, h2) != (w, h):
            raise SequenceError(f"frame size mismatch: {p.name} is {w2}x{h2}, expected {w}x{h}")
    return FrameSequence(directory=directory, paths=paths, width=w, height=h, fps=fps)


def write_sequence(frames, directory, fps: float = 30.0) -> FrameSequence:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(frames):
        p = directory / frame_name(i)
        write_ppm(img, p)
        paths.append(p)
    if not paths:
        raise SequenceError("refusing to write an empty sequence")
    w, h, _ = ppm_dimensions(paths[0])
    return FrameSequence(directory=directory, paths=paths, width=w, height=h, fps=fps)


# ---------------------------------------------------------------- config

@dataclass
class Config:
    """Flat key=value configuration; every key documented with its default."""

    detect_sigma: float = 1.0
    detect_median_radius: int = 1
    detect_ncc_thresh: float = 0.60
    detect_verify_radius: float = 4.0
    detect_marker_side: int = 31
    detect_classes: int = 4
    detect_single_marker: bool = False
    detect_single_width: float = 160.0
    detect_single_height: float = 120.0
    harris_k: float = 0.06
    harris_sigma: float = 2.0
    harris_floor: float = 1e-3
    hough_r_min: int = 8
    hough_r_max: int = 24
    hough_vote_frac: float = 0.25
    hough_edge_thresh: float = 0.5
    smooth_alpha: float = 0.3
    track_hold_frames: int = 15
    scale_margin: float = 0.05
    scale_s_min: float = 0.25
    scale_s_max: float = 4.0
    subject_thresh: float = 0.12
    subject_min_area: int = 64
    compose_surface_kind: str = "mirror"
    compose_feather_px: float = 2.0
    crop_fov_deg: float = 90.0
    crop_focal_px: float = 320.0

    def __post_init__(self):
        if self.compose_surface_kind not in ("mirror", "window"):
            raise ConfigError(
                f"compose.surface_kind must be 'mirror' or 'window', got {self.compose_surface_kind!r}"
            )

    def detection_params(self) -> DetectionParams:
        return DetectionParams(
            sigma=self.detect_sigma,
            median_radius=self.detect_median_radius,
            ncc_thresh=self.detect_ncc_thresh,
            verify_radius=self.detect_verify_radius,
            harris_k=self.harris_k,
            harris_sigma=self.harris_sigma,
            harris_floor=self.harris_floor,
            hough_r_min=self.hough_r_min,
            hough_r_max=self.hough_r_max,
            hough_vote_frac=self.hough_vote_frac,
            edge_thresh=self.hough_edge_thresh,
            single_marker=self.detect_single_marker,
            single_width=self.detect_single_width,
            single_height=self.detect_single_height,
        )

    def track_params(self) -> TrackParams:
        return TrackParams(alpha=self.smooth_alpha, hold_frames=self.track_hold_frames)

    def compose_config(self, bank=None, rectify_h=None):
        """Build the compositor configuration (procedural bank by default)."""
        from .compose import ComposeConfig
        from .markers import marker_bank

        if bank is None:
            bank = marker_bank(self.detect_marker_side, self.detect_classes)
        return ComposeConfig(
            bank=bank,
            detection=self.detection_params(),
            track=self.track_params(),
            surface_kind=self.compose_surface_kind,
            margin=self.scale_margin,
            feather_px=self.compose_feather_px,
            fov_deg=self.crop_fov_deg,
            focal_px=self.crop_focal_px,
            rectify_h=rectify_h,
            s_min=self.scale_s_min,
            s_max=self.scale_s_max,
            subject_thresh=self.subject_thresh,
            subject_min_area=self.subject_min_area,
        )


def _parse_bool(raw: str) -> bool:
    if raw in ("1", "true", "yes"):
        return True
    if raw in ("0", "false", "no"):
        return False
    raise ValueError(f"expected boolean (0/1/true/false), got {raw!r}")


_CONFIG_KEYS = {
    "detect.sigma": ("detect_sigma", float),
    "detect.median_radius": ("detect_median_radius", int),
    "detect.ncc_thresh": ("detect_ncc_thresh", float),
    "detect.verify_radius": ("detect_verify_radius", float),
    "detect.marker_side": ("detect_marker_side", int),
    "detect.classes": ("detect_classes", int),
    "detect.single_marker": ("detect_single_marker", _parse_bool),
    "detect.single_width": ("detect_single_width", float),
    "detect.single_height": ("detect_single_height", float),
    "harris.k": ("harris_k", float),
    "harris.sigma": ("harris_sigma", float),
    "harris.floor": ("harris_floor", float),
    "hough.r_min": ("hough_r_min", int),
    "hough.r_max": ("hough_r_max", int),
    "hough.vote_frac": ("hough_vote_frac", float),
    "hough.edge_thresh": ("hough_edge_thresh", float),
    "smooth.alpha": ("smooth_alpha", float),
    "track.hold_frames": ("track_hold_frames", int),
    "scale.margin": ("scale_margin", float),
    "scale.s_min": ("scale_s_min", float),
    "scale.s_max": ("scale_s_max", float),
    "subject.thresh": ("subject_thresh", float),
    "subject.min_area": ("subject_min_area", int),
    "compose.surface_kind": ("compose_surface_kind", str),
    "compose.feather_px": ("compose_feather_px", float),
    "crop.fov_deg": ("crop_fov_deg", float),
    "crop.focal_px": ("crop_focal_px", float),
}


def parse_config(text: str) -> Config:
    """`key = value` lines with # comments; unknown keys are rejected."""
    values = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, raw_value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        attr, parser = _CONFIG_KEYS[key]
        try:
            values[attr] = parser(raw_value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return Config(**values)


def load_config(path) -> Config:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------- manifest

@dataclass
class ManifestRecord:
    """Ground truth for one (frame, mirror): quad corners, feed homography, bbox."""

    frame: int
    mirror_id: int
    corners: np.ndarray           # (4, 2) TL TR BR BL
    homography: Homography        # feed rectangle -> quad
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)


def write_manifest(records, path) -> None:
    lines = []
    for r in records:
        vals = [str(r.frame), str(r.mirror_id)]
        vals += [repr(float(v)) for v in np.asarray(r.corners).ravel()]
        vals += [repr(float(v)) for v in r.homography.m.ravel()]
        vals += [repr(float(v)) for v in r.bbox]
        lines.append(" ".join(vals))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 23:
            raise ValueError(f"{path}: line {lineno}: expected 23 fields, got {len(parts)}")
        frame, mirror_id = int(parts[0]), int(parts[1])
        nums = [float(p) for p in parts[2:]]
        records.append(
            ManifestRecord(
                frame=frame,
                mirror_id=mirror_id,
                corners=np.array(nums[0:8]).reshape(4, 2),
                homography=Homography(np.array(nums[8:17]).reshape(3, 3)),
                bbox=tuple(nums[17:21]),
            )
        )
    return records


# ---------------------------------------------------------------- synth scene

@dataclass
class QuadMotion:
    """Sinusoidal drift plus a slow perspective tilt for the mirror quad."""

    center: tuple[float, float] = (320.0, 240.0)
    half_w: float = 110.0
    half_h: float = 80.0
    drift_amp: tuple[float, float] = (6.0, 4.0)
    drift_period: float = 80.0
    tilt_amp: float = 0.02
    phase: float = 0.0

    def corners_at(self, t: int) -> np.ndarray:
        w = 2.0 * math.pi / self.drift_period
        dx = self.drift_amp[0] * math.sin(w * t + self.phase)
        dy = self.drift_amp[1] * math.sin(0.85 * w * t + 1.3 * self.phase)
        cx, cy = self.center[0] + dx, self.center[1] + dy
        corners = np.array([
            [cx - self.half_w, cy - self.half_h],
            [cx + self.half_w, cy - self.half_h],
            [cx + self.half_w, cy + self.half_h],
            [cx - self.half_w, cy + self.half_h],
        ])
        # Narrow the top edge periodically: a slow tilt in depth.
        inset = self.tilt_amp * self.half_w * math.sin(0.5 * w * t + self.phase)
        corners[0, 0] += inset
        corners[1, 0] -= inset
        return corners


def _textured_background(seed: int, width: int, height: int) -> np.ndarray:
    """Smooth mid-gray color texture, tinted slightly per channel."""
    stream = SeededStream(seed, stream=0)
    gw, gh = width // 16 + 2, height // 16 + 2
    coarse = 0.35 + 0.3 * stream.uniforms(gh * gw).reshape(gh, gw)
    ys = np.arange(height) / 16.0
    xs = np.arange(width) / 16.0
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    base = (
        coarse[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + coarse[np.ix_(y0, x0 + 1)] * (1 - fy) * fx
        + coarse[np.ix_(y0 + 1, x0)] * fy * (1 - fx)
        + coarse[np.ix_(y0 + 1, x0 + 1)] * fy * fx
    )
    tint = 0.04 * (stream.uniforms(3) - 0.5)
    px = np.clip(base[:, :, None] + tint[None, None, :], 0.0, 1.0)
    return px


def synth_scene_frames(
    seed: int,
    n_frames: int,
    motion: QuadMotion | None = None,
    noise_sigma: float = 0.0,
    blur_sigma: float = 0.0,
    marker_side: int = 31,
    width: int = 640,
    height: int = 480,
    feed_dims: tuple[int, int] | None = None,
    mirror_id: int = 0,
):
    """Yield (Image, ManifestRecord) per frame; fully seeded and reproducible.

    Markers for the mirror's four corner classes are painted at subpixel
    corner positions on a textured background, then blurred and noised.
    The manifest homography maps the feed rectangle (feed_dims, default
    the scene size) onto the quad. Trajectories leaving the frame raise
    at generation time.
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    motion = motion or QuadMotion(center=(width / 2.0, height / 2.0))
    fw, fh = feed_dims or (width, height)
    feed_rect = np.array([[0.0, 0.0], [fw - 1.0, 0.0], [fw - 1.0, fh - 1.0], [0.0, fh - 1.0]])
    background = _textured_background(seed, width, height)
    margin = marker_side / 2.0 + 2.0
    for t in range(n_frames):
        corners = motion.corners_at(t)
        if (
            corners[:, 0].min() < margin
            or corners[:, 1].min() < margin
            or corners[:, 0].max() > width - margin
            or corners[:, 1].max() > height - margin
        ):
            raise ValueError(f"frame {t}: quad corner leaves the usable frame area")
        px = background.copy()
        for role in range(4):
            paint_marker(px, corners[role, 0], corners[role, 1], marker_side,
                         4 * mirror_id + role)
        img = Image(px)
        if blur_sigma > 0:
            img = gaussian_filter(img, blur_sigma)
        if noise_sigma > 0:
            noise_stream = SeededStream(seed, stream=1 + t)
            noise = noise_stream.normals(px.size).reshape(px.shape)
            img = Image(np.clip(img.pixels + noise_sigma * noise, 0.0, 1.0))
        record = ManifestRecord(
            frame=t,
            mirror_id=mirror_id,
            corners=corners,
            homography=quad_to_quad(feed_rect, corners),
        )
        yield img, record


def synth_scene(seed, n_frames, motion=None, noise_sigma=0.0, blur_sigma=0.0,
                marker_side=31, width=640, height=480, feed_dims=None):
    """Materialized synth_scene_frames: (frames list, manifest records list)."""
    frames, records = [], []
    for img, rec in synth_scene_frames(
        seed, n_frames, motion, noise_sigma, blur_sigma, marker_side, width, height, feed_dims
    ):
        frames.append(img)
        records.append(rec)
    return frames, records


# ---------------------------------------------------------------- synth feed

@dataclass
class SubjectMotion:
    """Subject rectangle drifting over a flat background."""

    size: tuple[int, int] | None = None         # width, height in px
    center: tuple[float, float] = (320.0, 240.0)
    amp: tuple[float, float] = (60.0, 30.0)
    period: float = 90.0


def synth_feed(
    seed: int,
    n_frames: int,
    motion: SubjectMotion | None = None,
    width: int = 640,
    height: int = 480,
):
    """Flat background plus a moving textured subject; frame 0 is empty.

    Returns (frames, truth_boxes); truth_boxes[k] is the half-open pixel
    rectangle (x0, y0, x1, y1) or None for the subject-free frame 0.
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    motion = motion or SubjectMotion(center=(width / 2.0, height / 2.0))
    stream = SeededStream(seed, stream=0)
    bg_value = 0.25 + 0.2 * stream.uniforms(1)[0]
    background = np.full((height, width, 3), bg_value)
    sw, sh = motion.size if motion.size else (max(width // 4, 16), max(height // 2, 16))
    if sw > width or sh > height:
        raise ValueError(f"subject {sw}x{sh} larger than the {width}x{height} feed")
    # Checker texture with seeded per-cell brightness; high contrast to bg.
    cells = stream.uniforms((sh // 8 + 1) * (sw // 8 + 1)).reshape(sh // 8 + 1, sw // 8 + 1)
    yy, xx = np.mgrid[0:sh, 0:sw]
    checker = ((yy // 8 + xx // 8) % 2).astype(np.float64)
    tex = 0.6 + 0.35 * (0.5 * checker + 0.5 * cells[yy // 8, xx // 8])
    texture = np.clip(np.stack([tex, tex * 0.95, tex * 0.9], axis=2), 0.0, 1.0)

    frames, truths = [], []
    for t in range(n_frames):
        px = background.copy()
        if t == 0:
            frames.append(Image(px))
            truths.append(None)
            continue
        w = 2.0 * math.pi / motion.period
        cx = motion.center[0] + motion.amp[0] * math.sin(w * t)
        cy = motion.center[1] + motion.amp[1] * math.sin(0.7 * w * t + 1.0)
        x0 = int(round(cx - sw / 2.0))
        y0 = int(round(cy - sh / 2.0))
        x0 = min(max(x0, 0), width - sw)
        y0 = min(max(y0, 0), height - sh)
        px[y0 : y0 + sh, x0 : x0 + sw] = texture
        frames.append(Image(px))
        truths.append((x0, y0, x0 + sw, y0 + sh))
    return frames, truths
