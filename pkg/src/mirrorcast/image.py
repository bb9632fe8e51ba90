"""Raster type and low-level signal-processing primitives.

Pixels are real-valued in [0, 1]; 8-bit quantization happens only at the
file boundary (see media). All filters use clamp-to-edge borders so frame
edges do not pick up dark halos, and all operations are pure: input in,
new output out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

# Filters may exceed [0,1] by accumulated rounding only; anything past this
# budget is a logic error, not float noise.
_RANGE_SLACK = 1e-9


@dataclass(eq=False)
class Image:
    """Owned raster: (h, w) grayscale or (h, w, 3) RGB, float64 in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            pass
        elif px.ndim == 3 and px.shape[2] == 3:
            pass
        else:
            raise ValueError(f"image must be (h, w) or (h, w, 3), got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image dimensions must be >= 1, got {px.shape}")
        lo = float(px.min())
        hi = float(px.max())
        # NaN poisons min/max, so these comparisons also reject non-finite data.
        if not (lo >= 0.0 and hi <= 1.0):
            raise ValueError(f"intensities must be finite and in [0,1], got [{lo}, {hi}]")
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3


@dataclass(eq=False)
class Kernel:
    """Odd-length 1-D taps or odd-sided 2-D grid of real weights."""

    taps: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.taps, dtype=np.float64)
        if t.ndim not in (1, 2):
            raise ValueError("kernel must be 1-D or 2-D")
        if any(s % 2 == 0 for s in t.shape):
            raise ValueError(f"kernel sides must be odd, got {t.shape}")
        if not np.isfinite(t).all():
            raise ValueError("kernel weights must be finite")
        self.taps = t


@dataclass(eq=False)
class ScoreMap:
    """Real-valued grid sharing Image's row-major (y, x) indexing."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("score map must be 2-D")
        self.values = v

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def _checked(px: np.ndarray) -> Image:
    """Wrap a filter result, clamping float-noise range excursions."""
    lo = float(px.min())
    hi = float(px.max())
    if lo < -_RANGE_SLACK or hi > 1.0 + _RANGE_SLACK:
        raise AssertionError(f"filter output exceeded [0,1] beyond float noise: [{lo}, {hi}]")
    np.clip(px, 0.0, 1.0, out=px)
    return Image(px)


def to_grayscale(img: Image) -> Image:
    """Luma conversion 0.299 R + 0.587 G + 0.114 B."""
    if img.channels != 3:
        raise ValueError("to_grayscale expects a 3-channel image")
    px = img.pixels
    # Explicit left-to-right sum: same float association as a scalar loop.
    return _checked(0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2])


def gaussian_kernel(sigma: float) -> Kernel:
    """1-D Gaussian taps of radius ceil(3*sigma), normalized to sum 1."""
    if not (isinstance(sigma, (int, float)) and math.isfinite(sigma) and sigma > 0):
        raise ValueError(f"sigma must be a finite positive real, got {sigma!r}")
    r = math.ceil(3.0 * sigma)
    xs = np.arange(-r, r + 1, dtype=np.float64)
    taps = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    taps /= taps.sum()
    return Kernel(taps)


# Below this the thread-pool dispatch costs more than the work; the
# serial kernels compute bit-identical results.
_PARALLEL_PIXEL_CUTOVER = 32768


def _separable(plane: np.ndarray, taps: np.ndarray) -> np.ndarray:
    tmp = np.empty_like(plane)
    out = np.empty_like(plane)
    if plane.size < _PARALLEL_PIXEL_CUTOVER:
        _kernels.correlate_rows_serial(plane, taps, tmp)
        _kernels.correlate_cols_serial(tmp, taps, out)
    else:
        _kernels.correlate_rows(plane, taps, tmp)
        _kernels.correlate_cols(tmp, taps, out)
    return out


def correlate_separable(plane: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable correlation of a raw 2-D array (rows then columns).

    Unlike the Image filters this does not constrain the value range;
    it serves gradient/structure-tensor plumbing.
    """
    plane = np.ascontiguousarray(plane, dtype=np.float64)
    taps = np.ascontiguousarray(taps, dtype=np.float64)
    if plane.ndim != 2 or taps.ndim != 1 or taps.size % 2 == 0:
        raise ValueError("need a 2-D plane and odd 1-D taps")
    return _separable(plane, taps)


def gaussian_filter(img: Image, sigma: float) -> Image:
    """Separable Gaussian blur (horizontal pass then vertical)."""
    taps = gaussian_kernel(sigma).taps
    if img.channels == 1:
        return _checked(_separable(img.pixels, taps))
    out = np.empty_like(img.pixels)
    for c in range(3):
        out[:, :, c] = _separable(np.ascontiguousarray(img.pixels[:, :, c]), taps)
    return _checked(out)


def median_filter(img: Image, radius: int) -> Image:
    """Per-channel median over the (2r+1)^2 clamp-to-edge neighborhood."""
    if not isinstance(radius, (int, np.integer)) or radius < 1:
        raise ValueError(f"median radius must be an integer >= 1, got {radius!r}")

    def one(plane):
        dst = np.empty_like(plane)
        if radius == 1:
            _kernels.median3x3(plane, dst)
        else:
            _kernels.median_box(plane, dst, radius)
        return dst

    if img.channels == 1:
        return _checked(one(img.pixels))
    out = np.empty_like(img.pixels)
    for c in range(3):
        out[:, :, c] = one(np.ascontiguousarray(img.pixels[:, :, c]))
    return _checked(out)


def convolve2d(img: Image, kernel: Kernel) -> Image:
    """Direct dense 2-D convolution, clamp-to-edge borders (grayscale only)."""
    if img.channels != 1:
        raise ValueError("convolve2d expects a grayscale image")
    k = kernel.taps
    if k.ndim != 2:
        raise ValueError("convolve2d expects a 2-D kernel")
    ry, rx = k.shape[0] // 2, k.shape[1] // 2
    padded = np.pad(img.pixels, ((ry, ry), (rx, rx)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, k.shape)
    # Convolution flips the kernel; correlation with the flipped taps.
    out = np.tensordot(win, k[::-1, ::-1], axes=([2, 3], [0, 1]))
    return _checked(out)


SOBEL_SMOOTH = np.array([1.0, 2.0, 1.0])
SOBEL_DIFF = np.array([-1.0, 0.0, 1.0])


def sobel_gradients(img: Image) -> tuple[ScoreMap, ScoreMap]:
    """Standard 3x3 Sobel pair; Gx responds to vertical edges, Gy to horizontal."""
    if img.channels != 1:
        raise ValueError("sobel_gradients expects a grayscale image")
    plane = img.pixels
    tmp = np.empty_like(plane)
    gx = np.empty_like(plane)
    gy = np.empty_like(plane)
    if plane.size < _PARALLEL_PIXEL_CUTOVER:
        _kernels.correlate_cols_serial(plane, SOBEL_SMOOTH, tmp)
        _kernels.correlate_rows_serial(tmp, SOBEL_DIFF, gx)
        _kernels.correlate_rows_serial(plane, SOBEL_SMOOTH, tmp)
        _kernels.correlate_cols_serial(tmp, SOBEL_DIFF, gy)
    else:
        _kernels.correlate_cols(plane, SOBEL_SMOOTH, tmp)
        _kernels.correlate_rows(tmp, SOBEL_DIFF, gx)
        _kernels.correlate_rows(plane, SOBEL_SMOOTH, tmp)
        _kernels.correlate_cols(tmp, SOBEL_DIFF, gy)
    return ScoreMap(gx), ScoreMap(gy)


def sample_bilinear(img: Image, x: float, y: float):
    """Bilinear read at subpixel (x, y).

    Returns a float (gray) or length-3 array (RGB); coordinates outside
    [0, w-1] x [0, h-1] return None, the "outside" sentinel that warps
    map to transparent.
    """
    w, h = img.width, img.height
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        return None
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    px = img.pixels
    top = px[y0, x0] * (1.0 - fx) + px[y0, x1] * fx
    bot = px[y1, x0] * (1.0 - fx) + px[y1, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    return float(out) if img.channels == 1 else out


def integral_images(img: Image) -> tuple[np.ndarray, np.ndarray]:
    """(w+1) x (h+1) running-sum tables of intensity and intensity^2.

    The first row and column are zero, so any rectangle sum is four reads
    (see rect_sum).
    """
    if img.channels != 1:
        raise ValueError("integral_images expects a grayscale image")
    h, w = img.pixels.shape
    s = np.zeros((h + 1, w + 1))
    s2 = np.zeros((h + 1, w + 1))
    np.cumsum(img.pixels, axis=0, out=s[1:, 1:])
    np.cumsum(s[1:, 1:], axis=1, out=s[1:, 1:])
    sq = img.pixels * img.pixels
    np.cumsum(sq, axis=0, out=s2[1:, 1:])
    np.cumsum(s2[1:, 1:], axis=1, out=s2[1:, 1:])
    return s, s2


def rect_sum(table: np.ndarray, x0: int, y0: int, x1: int, y1: int) -> float:
    """Sum over the half-open pixel rectangle [x0, x1) x [y0, y1)."""
    return float(table[y1, x1] - table[y0, x1] - table[y1, x0] + table[y0, x0])
