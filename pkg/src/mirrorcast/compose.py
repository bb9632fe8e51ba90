"""Per-frame compositing: feed -> rectify -> crop -> scale -> warp -> blend.

Each alive mirror track receives the (optionally rectified and
field-angle-cropped) camera feed, warped through the track's smoothed
homography with the auto-resolved scale about the subject anchor.
Mirror-kind surfaces get the parity flip, window-kind do not. One bad
track never blanks a frame: its stage errors are counted and the scene
content under it is preserved. Quads are assumed convex, which holds for
anything assembled from physical mirror corners.
"""

from __future__ import annotations

import time
import weakref
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .geometry import (
    GeometryError,
    Homography,
    apply_homography_many,
    crop_field_angle,
    invert_homography,
    quad_to_quad,
    resolve_scale,
    scaled_homography,
)
from .image import Image, correlate_separable, gaussian_kernel
from .markers import (
    DegenerateQuadError,
    DetectionParams,
    MarkerTemplate,
    MirrorQuad,
    corners_to_quad,
    detect_markers,
    single_marker_quads,
)
from .tracking import TrackParams, TrackState, estimate_subject_bbox, smooth_scale, update_track


@dataclass(eq=False)
class Layer:
    """An image plus per-pixel coverage in [0,1], same dimensions."""

    image: Image
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float64)
        if m.shape != (self.image.height, self.image.width):
            raise ValueError(
                f"mask {m.shape} does not match image "
                f"{(self.image.height, self.image.width)}"
            )
        if float(m.min()) < 0.0 or float(m.max()) > 1.0:
            raise ValueError("mask values must lie in [0,1]")
        self.mask = m


@dataclass
class ComposeConfig:
    """Everything compose_frame needs; see media.Config for the file keys."""

    bank: list[MarkerTemplate]
    detection: DetectionParams = field(default_factory=DetectionParams)
    track: TrackParams = field(default_factory=TrackParams)
    surface_kind: str = "mirror"
    margin: float = 0.05
    feather_px: float = 2.0
    fov_deg: float = 90.0
    focal_px: float = 320.0
    rectify_h: Homography | None = None
    s_min: float = 0.25
    s_max: float = 4.0
    subject_thresh: float = 0.12
    subject_min_area: int = 64

    def __post_init__(self):
        if self.surface_kind not in ("mirror", "window"):
            raise ValueError(f"surface_kind must be mirror or window, got {self.surface_kind!r}")
        if not (0.0 <= self.margin < 0.5):
            raise ValueError(f"margin must be in [0, 0.5), got {self.margin}")
        if self.feather_px < 0:
            raise ValueError(f"feather_px must be >= 0, got {self.feather_px}")


@dataclass
class FrameStats:
    """Per-frame pipeline record; timings are wall clock."""

    detections: int = 0
    tracks_alive: int = 0
    scale: float | None = None
    detect_ms: float = 0.0
    warp_ms: float = 0.0
    total_ms: float = 0.0
    failures: int = 0
    incomplete: int = 0

    def format_line(self, frame_index: int) -> str:
        s = self.scale if self.scale is not None else 1.0
        return (
            f"frame={frame_index} tracks={self.tracks_alive} s={s:.4f} "
            f"detect_ms={self.detect_ms:.2f} warp_ms={self.warp_ms:.2f} "
            f"total_ms={self.total_ms:.2f}"
        )


def _as_3d(px: np.ndarray) -> np.ndarray:
    return px[:, :, None] if px.ndim == 2 else px


def _warp_window(src: np.ndarray, hinv: np.ndarray, x0: int, y0: int, bw: int, bh: int):
    out = np.empty((bh, bw, src.shape[2]))
    valid = np.empty((bh, bw))
    _kernels.warp_bilinear(
        np.ascontiguousarray(src), np.ascontiguousarray(hinv.ravel()),
        x0, y0, out, valid,
    )
    np.clip(out, 0.0, 1.0, out=out)
    return out, valid


def rectify_feed(feed: Image, h_rect: Homography) -> Layer:
    """Inverse-mapping warp of the feed; outside samples get coverage 0."""
    hinv = invert_homography(h_rect).m
    out, valid = _warp_window(_as_3d(feed.pixels), hinv, 0, 0, feed.width, feed.height)
    img = Image(out[:, :, 0] if feed.channels == 1 else out)
    return Layer(image=img, mask=valid)


def _polygon_coverage(corners: np.ndarray, x0: int, y0: int, bw: int, bh: int) -> np.ndarray:
    """Antialiased inside-coverage of a convex clockwise quad over a window."""
    ys, xs = np.mgrid[y0 : y0 + bh, x0 : x0 + bw].astype(np.float64)
    dist = np.full((bh, bw), np.inf)
    for i in range(4):
        p0 = corners[i]
        p1 = corners[(i + 1) % 4]
        e = p1 - p0
        norm = float(np.hypot(e[0], e[1]))
        if norm < 1e-12:
            continue
        # Signed distance, positive on the interior side of each edge.
        d = (e[0] * (ys - p0[1]) - e[1] * (xs - p0[0])) / norm
        dist = np.minimum(dist, d)
    return np.clip(dist + 0.5, 0.0, 1.0)


def warp_into_quad(feed, quad, s: float, anchor, flip: bool, out_dims) -> Layer:
    """Map the feed rectangle onto the quad at scale s about the anchor.

    feed may be an Image or a Layer (whose coverage is warped along).
    The output layer spans out_dims = (width, height); its mask is the
    antialiased quad polygon times sampling validity.
    """
    layer_in = feed if isinstance(feed, Layer) else None
    feed_img = layer_in.image if layer_in else feed
    corners = np.asarray(getattr(quad, "corners", quad), dtype=np.float64).reshape(4, 2)
    MirrorQuad(corners=corners, mirror_id=getattr(quad, "mirror_id", 0))  # validates
    out_w, out_h = out_dims
    fw, fh = feed_img.width, feed_img.height
    feed_rect = np.array([[0.0, 0.0], [fw - 1.0, 0.0], [fw - 1.0, fh - 1.0], [0.0, fh - 1.0]])
    base = quad_to_quad(feed_rect, corners)
    if flip:
        flip_h = Homography(np.array([
            [-1.0, 0.0, fw - 1.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ]))
        base = Homography(base.m @ flip_h.m)
    h_total = scaled_homography(base, anchor, s)
    hinv = invert_homography(h_total).m

    x0 = max(int(np.floor(corners[:, 0].min())) - 1, 0)
    y0 = max(int(np.floor(corners[:, 1].min())) - 1, 0)
    x1 = min(int(np.ceil(corners[:, 0].max())) + 2, out_w)
    y1 = min(int(np.ceil(corners[:, 1].max())) + 2, out_h)
    full_img = np.zeros((out_h, out_w, 3 if feed_img.channels == 3 else 1))
    full_mask = np.zeros((out_h, out_w))
    if x0 < x1 and y0 < y1:
        bw, bh = x1 - x0, y1 - y0
        out, valid = _warp_window(_as_3d(feed_img.pixels), hinv, x0, y0, bw, bh)
        mask = _polygon_coverage(corners, x0, y0, bw, bh) * valid
        if layer_in is not None:
            src_mask, _ = _warp_window(layer_in.mask[:, :, None], hinv, x0, y0, bw, bh)
            mask *= src_mask[:, :, 0]
        full_img[y0:y1, x0:x1] = out
        full_mask[y0:y1, x0:x1] = mask
    img = Image(full_img[:, :, 0] if feed_img.channels == 1 else full_img)
    return Layer(image=img, mask=full_mask)


def _min_filter_2d(plane: np.ndarray, radius: int) -> np.ndarray:
    out = plane
    for axis in (0, 1):
        padded = np.pad(out, [(radius, radius) if a == axis else (0, 0) for a in (0, 1)],
                        mode="edge")
        acc = None
        for k in range(2 * radius + 1):
            sl = [slice(None)] * 2
            sl[axis] = slice(k, k + out.shape[axis])
            view = padded[tuple(sl)]
            acc = view.copy() if acc is None else np.minimum(acc, view)
        out = acc
    return out


def blend(scene: Image, layer: Layer, feather_px: float) -> Image:
    """out = (1 - m) scene + m layer with the mask eroded+blurred by feather.

    Pixels where the feathered mask is exactly zero are bit-identical to
    the scene.
    """
    if (scene.width, scene.height) != (layer.image.width, layer.image.height):
        raise ValueError("scene and layer dimensions differ")
    if scene.channels != layer.image.channels:
        raise ValueError("scene and layer channel counts differ")
    mask = layer.mask
    rows = np.nonzero(mask.any(axis=1))[0]
    if rows.size == 0:
        return Image(scene.pixels.copy())
    cols = np.nonzero(mask.any(axis=0))[0]
    pad = int(np.ceil(feather_px)) * 4 + 1
    y0 = max(int(rows[0]) - pad, 0)
    y1 = min(int(rows[-1]) + pad + 1, scene.height)
    x0 = max(int(cols[0]) - pad, 0)
    x1 = min(int(cols[-1]) + pad + 1, scene.width)

    m = mask[y0:y1, x0:x1]
    if feather_px > 0:
        radius = max(int(round(feather_px)), 1)
        m = _min_filter_2d(m, radius)
        taps = gaussian_kernel(max(feather_px / 2.0, 0.35)).taps
        m = np.clip(correlate_separable(m, taps), 0.0, 1.0)
    out = scene.pixels.copy()
    scene_sub = _as_3d(out[y0:y1, x0:x1])
    layer_sub = _as_3d(layer.image.pixels[y0:y1, x0:x1])
    m3 = m[:, :, None]
    # Convex blend of in-range values; clip only the touched window.
    blended = np.clip((1.0 - m3) * scene_sub + m3 * layer_sub, 0.0, 1.0)
    if scene.channels == 1:
        out[y0:y1, x0:x1] = blended[:, :, 0]
    else:
        out[y0:y1, x0:x1] = blended
    return Image(out)


# The background reference is constant across a sequence; rectify and
# crop it once per (frame, settings) rather than every frame.
_BG_CACHE: "weakref.WeakKeyDictionary[Image, tuple]" = weakref.WeakKeyDictionary()


def _prepared_background(background: Image, cfg: ComposeConfig) -> Image:
    key = (
        cfg.fov_deg, cfg.focal_px,
        None if cfg.rectify_h is None else cfg.rectify_h.m.tobytes(),
    )
    cached = _BG_CACHE.get(background)
    if cached is not None and cached[0] == key:
        return cached[1]
    if cfg.rectify_h is not None:
        bg_img, _ = crop_field_angle(
            rectify_feed(background, cfg.rectify_h).image, cfg.fov_deg, cfg.focal_px
        )
    else:
        bg_img, _ = crop_field_angle(background, cfg.fov_deg, cfg.focal_px)
    _BG_CACHE[background] = (key, bg_img)
    return bg_img


def _assemble_quads(hits, cfg: ComposeConfig):
    """Per-mirror quad assembly with per-mirror error isolation."""
    if cfg.detection.single_marker:
        return single_marker_quads(hits, cfg.detection.single_width,
                                   cfg.detection.single_height), 0, 0
    quads = []
    failures = 0
    incomplete = 0
    by_mirror: dict[int, list] = {}
    for h in hits:
        by_mirror.setdefault(h.mirror_id, []).append(h)
    for mirror_id in sorted(by_mirror):
        try:
            qs, inc = corners_to_quad(by_mirror[mirror_id])
            quads.extend(qs)
            incomplete += len(inc)
        except DegenerateQuadError:
            failures += 1
    return quads, failures, incomplete


def compose_frame(
    scene: Image,
    feed: Image,
    tracks: dict[int, TrackState],
    cfg: ComposeConfig,
    background: Image | None = None,
) -> tuple[Image, FrameStats]:
    """Run the full chain for one frame; tracks is updated in place.

    background is the subject-reference feed frame (usually the first);
    without one the scale stays at 1. With no alive tracks the scene
    comes back bit-identical.
    """
    t_start = time.perf_counter()
    stats = FrameStats()

    t0 = time.perf_counter()
    hits = detect_markers(scene, cfg.bank, cfg.detection)
    stats.detect_ms = (time.perf_counter() - t0) * 1000.0
    stats.detections = len(hits)

    quads, fail_q, incomplete = _assemble_quads(hits, cfg)
    stats.failures += fail_q
    stats.incomplete = incomplete

    # Feed preparation: rectify against the virtual space, crop field angle.
    if cfg.rectify_h is not None:
        rectified = rectify_feed(feed, cfg.rectify_h)
        feed_img, offset = crop_field_angle(rectified.image, cfg.fov_deg, cfg.focal_px)
        ox, oy = offset
        feed_layer = Layer(
            image=feed_img,
            mask=rectified.mask[oy : oy + feed_img.height, ox : ox + feed_img.width],
        )
    else:
        feed_img, _ = crop_field_angle(feed, cfg.fov_deg, cfg.focal_px)
        feed_layer = feed_img
    fw, fh = feed_img.width, feed_img.height
    feed_rect = np.array([[0.0, 0.0], [fw - 1.0, 0.0], [fw - 1.0, fh - 1.0], [0.0, fh - 1.0]])

    seen = {q.mirror_id for q in quads}
    for quad in quads:
        try:
            h_new = quad_to_quad(feed_rect, quad.corners)
            tracks[quad.mirror_id] = update_track(
                tracks.get(quad.mirror_id), quad, h_new, None, cfg.track
            )
        except (GeometryError, DegenerateQuadError, ValueError):
            stats.failures += 1
    for mirror_id in sorted(tracks):
        if mirror_id not in seen:
            tracks[mirror_id] = update_track(tracks[mirror_id], None, None, None, cfg.track)

    subject = None
    if background is not None:
        bg_img = _prepared_background(background, cfg)
        subject = estimate_subject_bbox(
            feed_img, bg_img, cfg.subject_thresh, cfg.subject_min_area
        )
    if subject is not None:
        anchor = subject.center
        bbox = (float(subject.x0), float(subject.y0), float(subject.x1 - 1), float(subject.y1 - 1))
    else:
        anchor = ((fw - 1) / 2.0, (fh - 1) / 2.0)
        bbox = None

    out = scene
    flip = cfg.surface_kind == "mirror"
    for mirror_id in sorted(tracks):
        track = tracks[mirror_id]
        if not track.alive:
            continue
        try:
            corners = apply_homography_many(track.smoothed_h, feed_rect)
            quad = MirrorQuad(corners=corners, mirror_id=mirror_id)
            if bbox is not None:
                s_new, _in_sight = resolve_scale(
                    track.smoothed_h, anchor, bbox, quad,
                    cfg.margin, cfg.s_min, cfg.s_max,
                )
            else:
                s_new = 1.0
            track = smooth_scale(track, s_new, cfg.track.alpha)
            tracks[mirror_id] = track
            t0 = time.perf_counter()
            layer = warp_into_quad(
                feed_layer, quad, track.scale, anchor, flip,
                (scene.width, scene.height),
            )
            out = blend(out, layer, cfg.feather_px)
            stats.warp_ms += (time.perf_counter() - t0) * 1000.0
            if stats.scale is None:
                stats.scale = track.scale
        except (GeometryError, DegenerateQuadError, ValueError):
            stats.failures += 1
    stats.tracks_alive = sum(1 for t in tracks.values() if t.alive)

    if out is scene:
        out = Image(scene.pixels.copy())
    stats.total_ms = (time.perf_counter() - t_start) * 1000.0
    return out, stats


def compose_sequence(scene_frames, feed_frames, cfg: ComposeConfig):
    """Pair scene and feed streams (shorter truncates) through compose_frame.

    Yields (frame_index, Image, FrameStats). The first feed frame becomes
    the subject background reference.
    """
    tracks: dict[int, TrackState] = {}
    background = None
    for index, (scene, feed) in enumerate(zip(scene_frames, feed_frames)):
        if background is None:
            background = feed
        out, stats = compose_frame(scene, feed, tracks, cfg, background)
        yield index, out, stats
