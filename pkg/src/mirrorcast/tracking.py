"""Frame-to-frame stabilization and subject localization.

Homographies and scales are exponentially smoothed (first sample seeds the
filter), tracks survive short detection dropouts by holding their last
geometry, and the subject is located by background differencing so the
scale tuner can keep the user in sight.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .geometry import Homography
from .image import Image, median_filter, to_grayscale
from .markers import MirrorQuad

# Grayscale cache so a background frame reused across a sequence is
# converted once. Keyed by image identity; entries die with the Image.
_GRAY_CACHE: "weakref.WeakKeyDictionary[Image, np.ndarray]" = weakref.WeakKeyDictionary()


def _gray_plane(img: Image) -> np.ndarray:
    if img.channels == 1:
        return img.pixels
    cached = _GRAY_CACHE.get(img)
    if cached is None:
        from . import _kernels

        cached = np.empty(img.pixels.shape[:2])
        _kernels.luma(img.pixels, cached)
        _GRAY_CACHE[img] = cached
    return cached


@dataclass
class TrackParams:
    alpha: float = 0.3
    hold_frames: int = 15

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.hold_frames < 0:
            raise ValueError(f"hold_frames must be >= 0, got {self.hold_frames}")


@dataclass(frozen=True)
class TrackState:
    """Immutable per-mirror snapshot; update_track returns a new one."""

    mirror_id: int
    smoothed_h: Homography
    last_quad: MirrorQuad
    smoothed_s: float | None = None
    frames_since_seen: int = 0
    alive: bool = True

    @property
    def scale(self) -> float:
        return 1.0 if self.smoothed_s is None else self.smoothed_s


@dataclass(frozen=True)
class SubjectBox:
    """Feed-space rectangle [x0, x1) x [y0, y1) with fill confidence."""

    x0: int
    y0: int
    x1: int
    y1: int
    confidence: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError("subject box must have positive extent")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence out of [0,1]: {self.confidence}")

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1 - 1) / 2.0, (self.y0 + self.y1 - 1) / 2.0)


def smooth_homography(prev: Homography, cur: Homography, alpha: float) -> Homography:
    """Entrywise blend (1-a) prev + a cur on normalized matrices.

    A singular blend (possible for distant matrices) falls back to cur.
    """
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    blended = (1.0 - alpha) * prev.m + alpha * cur.m
    if abs(np.linalg.det(blended)) <= 1e-12:
        return cur
    return Homography(blended)


def update_track(
    state: TrackState | None,
    quad: MirrorQuad | None,
    h_new: Homography | None,
    s_new: float | None,
    cfg: TrackParams,
) -> TrackState:
    """Fold one frame's observation (or dropout) into a track.

    Detection smooths H and s with the same alpha and resets the dropout
    counter; a dropout holds the last values and kills the track once the
    counter exceeds hold_frames.
    """
    if quad is None:
        if state is None:
            raise ValueError("cannot record a dropout for a track that never existed")
        missed = state.frames_since_seen + 1
        return replace(state, frames_since_seen=missed, alive=missed <= cfg.hold_frames)
    if h_new is None:
        raise ValueError("detection update requires the measured homography")
    if state is None:
        return TrackState(
            mirror_id=quad.mirror_id,
            smoothed_h=h_new,
            last_quad=quad,
            smoothed_s=s_new,
        )
    if state.mirror_id != quad.mirror_id:
        raise ValueError(f"track {state.mirror_id} fed quad for mirror {quad.mirror_id}")
    s = state.smoothed_s
    if s_new is not None:
        s = s_new if s is None else (1.0 - cfg.alpha) * s + cfg.alpha * s_new
    return TrackState(
        mirror_id=state.mirror_id,
        smoothed_h=smooth_homography(state.smoothed_h, h_new, cfg.alpha),
        last_quad=quad,
        smoothed_s=s,
        frames_since_seen=0,
        alive=True,
    )


def smooth_scale(state: TrackState, s_new: float, alpha: float) -> TrackState:
    """Blend a freshly resolved scale into the track (seeds on first use)."""
    if s_new <= 0:
        raise ValueError(f"scale must be positive, got {s_new}")
    s = s_new if state.smoothed_s is None else (1.0 - alpha) * state.smoothed_s + alpha * s_new
    return replace(state, smoothed_s=s)


def estimate_subject_bbox(
    feed: Image,
    background: Image,
    thresh: float,
    min_area: int,
) -> SubjectBox | None:
    """Bounding box of the largest changed region against the background.

    Absolute grayscale difference >= thresh, a radius-1 median to knock
    out speckle, then the largest 4-connected component; None when
    nothing reaches min_area.
    """
    if (feed.width, feed.height) != (background.width, background.height):
        raise ValueError(
            f"feed {feed.width}x{feed.height} vs background "
            f"{background.width}x{background.height}"
        )
    f = _gray_plane(feed)
    b = _gray_plane(background)
    mask = (np.abs(f - b) >= thresh).astype(np.float64)
    mask = median_filter(Image(mask), 1).pixels > 0.5
    labels, count = ndimage.label(mask)
    if count == 0:
        return None
    areas = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(areas)) + 1
    area = int(areas[best - 1])
    if area < min_area:
        return None
    ys, xs = np.nonzero(labels == best)
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    return SubjectBox(
        x0=x0, y0=y0, x1=x1, y1=y1,
        confidence=area / float((x1 - x0) * (y1 - y0)),
    )
