"""Cross-circle fiducial markers: rendering, detection, classification.

Markers are quadrant-colored circles ("cross-shaped black-white circles")
placed at the corners of a mirror/window region. Detection proposes with
normalized cross-correlation and confirms each peak with Harris and Hough
evidence, then refines to subpixel. Class encoding: class_id =
4 * mirror_id + role with roles TL, TR, BR, BL; odd classes invert the
quadrant colors and every class pair (2k, 2k+1) carries k thin inverted
rings, so any number of mirrors gets a distinct template set.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from . import _kernels
from .image import (
    SOBEL_DIFF,
    SOBEL_SMOOTH,
    Image,
    ScoreMap,
    correlate_separable,
    gaussian_filter,
    gaussian_kernel,
    sobel_gradients,
    to_grayscale,
)

ROLE_NAMES = ("TL", "TR", "BR", "BL")

# Minimum triangle area (px^2) before three quad corners count as collinear.
EPS_QUAD = 1.0


class DegenerateQuadError(ValueError):
    """Quad corners do not span a usable region."""


@dataclass(eq=False)
class MarkerTemplate:
    """Rendered marker patch: square, odd side, values near 0/1 inside the disk."""

    class_id: int
    image: Image
    phase: int

    @property
    def side(self) -> int:
        return self.image.width


@dataclass(eq=False)
class MarkerHit:
    """One detected marker with subpixel center in scene coordinates."""

    center: tuple[float, float]
    score: float
    class_id: int
    radius: float
    corner_role: str = "unassigned"

    def __post_init__(self):
        if not (-1.0 <= self.score <= 1.0):
            raise ValueError(f"NCC score out of [-1,1]: {self.score}")
        if self.radius <= 0:
            raise ValueError(f"marker radius must be positive, got {self.radius}")

    @property
    def mirror_id(self) -> int:
        return self.class_id // 4

    @property
    def role(self) -> int:
        return self.class_id % 4


@dataclass(eq=False)
class MirrorQuad:
    """Four ordered scene-space corners (TL, TR, BR, BL) marking one mirror."""

    corners: np.ndarray
    mirror_id: int = 0

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=np.float64).reshape(4, 2)
        if not np.isfinite(c).all():
            raise DegenerateQuadError("quad corners must be finite")
        x, y = c[:, 0], c[:, 1]
        area = 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
        if area <= 0:
            raise DegenerateQuadError(
                f"corners must wind clockwise (y down); signed area {area:.3g}"
            )
        for skip in range(4):
            tri = np.delete(c, skip, axis=0)
            ta = 0.5 * abs(
                (tri[1, 0] - tri[0, 0]) * (tri[2, 1] - tri[0, 1])
                - (tri[2, 0] - tri[0, 0]) * (tri[1, 1] - tri[0, 1])
            )
            if ta <= EPS_QUAD:
                raise DegenerateQuadError(f"three corners nearly collinear (area {ta:.3g})")
        self.corners = c


@dataclass
class DetectionParams:
    """Tunable knobs for detect_markers; defaults fixed by the corpus study."""

    sigma: float = 1.0
    median_radius: int = 1
    ncc_thresh: float = 0.60
    verify_radius: float = 4.0
    harris_k: float = 0.06
    harris_sigma: float = 2.0
    harris_floor: float = 1e-3
    hough_r_min: int = 8
    hough_r_max: int = 24
    hough_vote_frac: float = 0.25
    edge_thresh: float = 0.5
    single_marker: bool = False
    single_width: float = 160.0
    single_height: float = 120.0


# ---------------------------------------------------------------- rendering

_SUBSAMPLES = (np.arange(4) + 0.5) / 4.0 - 0.5


def _marker_field(dx: np.ndarray, dy: np.ndarray, radius: float, rings: int) -> np.ndarray:
    """Phase-0 marker intensity at subpixel offsets from the center."""
    r = np.hypot(dx, dy)
    # TL and BR quadrants black, TR and BL white.
    val = np.where((dx < 0) == (dy < 0), 0.0, 1.0)
    for k in range(1, rings + 1):
        # Wide enough to survive sigma~1 video blur for classification.
        band_center = radius * (1.0 - 0.17 * k)
        band_half = max(0.085 * radius, 1.0)
        in_band = np.abs(r - band_center) <= band_half
        val = np.where(in_band, 1.0 - val, val)
    return np.where(r <= radius, val, 0.5)


def render_marker(side: int, class_id: int) -> MarkerTemplate:
    """Deterministic marker patch: inscribed quadrant disk on 0.5 gray.

    4x4 supersampling gives the 1-px anti-aliased boundaries. Odd classes
    are the exact inversion (1 - pixels) of their even partner.
    """
    if side % 2 == 0 or side < 15:
        raise ValueError(f"marker side must be odd and >= 15, got {side}")
    if class_id < 0:
        raise ValueError(f"class_id must be non-negative, got {class_id}")
    phase = class_id % 2
    rings = class_id // 2
    c = (side - 1) / 2.0
    radius = side / 2.0
    coords = np.arange(side, dtype=np.float64)
    # Per-pixel 4x4 subsample grid, evaluated in one vectorized pass.
    sub = coords[:, None] + _SUBSAMPLES[None, :]  # (side, 4)
    dy = (sub - c).reshape(side, 1, 4, 1)
    dx = (sub - c).reshape(1, side, 1, 4)
    values = _marker_field(np.broadcast_to(dx, (side, side, 4, 4)),
                           np.broadcast_to(dy, (side, side, 4, 4)),
                           radius, rings)
    patch = values.mean(axis=(2, 3))
    if phase == 1:
        patch = 1.0 - patch
    return MarkerTemplate(class_id=class_id, image=Image(patch), phase=phase)


def marker_bank(side: int, n_classes: int) -> list[MarkerTemplate]:
    return [render_marker(side, c) for c in range(n_classes)]


def paint_marker(canvas: np.ndarray, cx: float, cy: float, side: int, class_id: int) -> None:
    """Blend a marker disk at a subpixel center into a canvas, in place.

    Uses the same analytic field and supersampling as render_marker, so a
    painted marker matches the procedural template up to the subpixel
    shift. The canvas may be (h, w) or (h, w, 3); coverage outside the
    disk leaves the canvas untouched.
    """
    if side % 2 == 0 or side < 15:
        raise ValueError(f"marker side must be odd and >= 15, got {side}")
    h, w = canvas.shape[:2]
    radius = side / 2.0
    phase = class_id % 2
    rings = class_id // 2
    x0 = max(int(math.floor(cx - radius - 1.0)), 0)
    x1 = min(int(math.ceil(cx + radius + 1.0)) + 1, w)
    y0 = max(int(math.floor(cy - radius - 1.0)), 0)
    y1 = min(int(math.ceil(cy + radius + 1.0)) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1, dtype=np.float64)
    ys = np.arange(y0, y1, dtype=np.float64)
    dx = (xs[None, :, None, None] + _SUBSAMPLES[None, None, None, :]) - cx
    dy = (ys[:, None, None, None] + _SUBSAMPLES[None, None, :, None]) - cy
    shape = (ys.size, xs.size, 4, 4)
    dx = np.broadcast_to(dx, shape)
    dy = np.broadcast_to(dy, shape)
    vals = _marker_field(dx, dy, radius, rings)
    if phase == 1:
        vals = 1.0 - vals
    inside = np.hypot(dx, dy) <= radius
    coverage = inside.mean(axis=(2, 3))
    count = inside.sum(axis=(2, 3))
    mean_val = (vals * inside).sum(axis=(2, 3)) / np.maximum(count, 1)
    if canvas.ndim == 3:
        coverage = coverage[:, :, None]
        mean_val = mean_val[:, :, None]
    region = canvas[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1] = (1.0 - coverage) * region + coverage * mean_val


# ---------------------------------------------------------------- NCC

# Cached template spectra, keyed by template identity then FFT shape.
# Pair entries hold the combined conj(Ta) + i conj(Tb) spectrum so two
# correlation maps come out of a single inverse transform per frame.
_SPECTRUM_CACHE: "weakref.WeakKeyDictionary[MarkerTemplate, dict]" = weakref.WeakKeyDictionary()


def _zero_mean(tpl: MarkerTemplate) -> tuple[np.ndarray, float]:
    t = tpl.image.pixels
    tz = t - t.mean()
    return tz, float(np.sqrt((tz * tz).sum()))


def template_norm(tpl: MarkerTemplate) -> float:
    return _zero_mean(tpl)[1]


def _conj_spectrum(tpl: MarkerTemplate, shape: tuple[int, int], dtype) -> np.ndarray:
    per_tpl = _SPECTRUM_CACHE.setdefault(tpl, {})
    key = (shape, np.dtype(dtype).name)
    entry = per_tpl.get(key)
    if entry is None:
        tz, _ = _zero_mean(tpl)
        padded = np.zeros(shape, dtype=dtype)
        padded[: tz.shape[0], : tz.shape[1]] = tz
        entry = np.conj(scipy.fft.fft2(padded, workers=2))
        per_tpl[key] = entry
    return entry


def _pair_spectrum(a: MarkerTemplate, b: MarkerTemplate | None, shape, dtype) -> np.ndarray:
    if b is None:
        return _conj_spectrum(a, shape, dtype)
    per_tpl = _SPECTRUM_CACHE.setdefault(a, {})
    key = ("pair", shape, np.dtype(dtype).name, id(b))
    entry = per_tpl.get(key)
    if entry is None or entry[0]() is not b:
        combined = _conj_spectrum(a, shape, dtype) + 1j * _conj_spectrum(b, shape, dtype)
        entry = (weakref.ref(b), combined)
        per_tpl[key] = entry
    return entry[1]


def _negation_partner(templates, i: int):
    t = templates[i].image.pixels
    for j in range(i):
        if templates[j].side == templates[i].side and np.array_equal(
            templates[j].image.pixels, 1.0 - t
        ):
            return j
    return None


# Matched-filter bank cache: template -> {sigma: filtered template}.
_FILTERED_CACHE: "weakref.WeakKeyDictionary[MarkerTemplate, dict]" = weakref.WeakKeyDictionary()


def _filtered_bank(bank, sigma: float):
    """Bank blurred to match the detection pre-filter (matched filtering).

    The scene is Gaussian-filtered before correlation, so the templates
    see the same blur; that keeps thin ring features comparable between
    template and scene. Exact inversion pairs stay exact (the partner's
    filtered image is negated rather than re-blurred).
    """
    if sigma <= 0:
        return list(bank)
    out = []
    for i, tpl in enumerate(bank):
        per = _FILTERED_CACHE.setdefault(tpl, {})
        got = per.get(sigma)
        if got is None:
            partner = _negation_partner(bank, i)
            if partner is not None:
                img = Image(1.0 - out[partner].image.pixels)
            else:
                img = gaussian_filter(tpl.image, sigma)
            got = MarkerTemplate(class_id=tpl.class_id, image=img, phase=tpl.phase)
            per[sigma] = got
        out.append(got)
    return out


def _integral_tables(plane: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = plane.shape
    s = np.zeros((h + 1, w + 1))
    s2 = np.zeros((h + 1, w + 1))
    _kernels.integral_tables(plane, s, s2)
    return s, s2


def _ncc_valid_maps(plane: np.ndarray, templates, use_f32: bool = False) -> list[np.ndarray]:
    """Zero-mean NCC per template over the valid window grid.

    Map [y, x] scores the window whose top-left corner is (x, y); the
    center sits at (x + side//2, y + side//2). The scene transform is
    computed once; independent templates are evaluated two at a time
    through a packed complex spectrum, and a template that is the exact
    inversion of an earlier one reuses that map negated (equal values up
    to float rounding). use_f32 runs the transforms in single precision
    (score error ~1e-6, used by the real-time detection path); window
    statistics stay in double precision either way.
    """
    h, w = plane.shape
    n_tpl = len(templates)
    derive: dict[int, int] = {}
    unique: list[int] = []
    for i, tpl in enumerate(templates):
        if tpl.side > min(h, w):
            raise ValueError(f"template side {tpl.side} exceeds image {w}x{h}")
        partner = _negation_partner(templates, i)
        if partner is not None:
            derive[i] = partner
        else:
            unique.append(i)

    s_table, s2_table = _integral_tables(plane)
    maps: list[np.ndarray | None] = [None] * n_tpl
    dtype = np.float32 if use_f32 else np.float64

    # Circular correlation never wraps inside the valid region (top-left
    # shifts stay within [0, dim - side]), so the transform runs at the
    # image size itself; only a non-fast dimension gets padded up.
    shape = (scipy.fft.next_fast_len(h), scipy.fft.next_fast_len(w))
    if shape == (h, w):
        scene = plane.astype(dtype) if use_f32 else plane
    else:
        scene = np.zeros(shape, dtype=dtype)
        scene[:h, :w] = plane
    scene_fft = scipy.fft.fft2(scene, workers=2)

    for j in range(0, len(unique), 2):
        ia = unique[j]
        ib = unique[j + 1] if j + 1 < len(unique) else None
        spectrum = _pair_spectrum(
            templates[ia], None if ib is None else templates[ib], shape, dtype
        )
        z = scipy.fft.ifft2(scene_fft * spectrum, workers=2)
        for idx, part in ((ia, z.real), (ib, z.imag)):
            if idx is None:
                continue
            side = templates[idx].side
            cross = np.ascontiguousarray(part[: h - side + 1, : w - side + 1])
            out = np.empty_like(cross)
            _kernels.ncc_scores(
                cross, s_table, s2_table, side, template_norm(templates[idx]), out
            )
            maps[idx] = out

    for i in sorted(derive):
        maps[i] = -maps[derive[i]]
    return maps


def ncc_score_map(img: Image, tpl: MarkerTemplate) -> ScoreMap:
    """Zero-mean NCC of the template at every valid center.

    Window statistics come from integral images; the margin where the
    window does not fit holds 0.
    """
    plane = img.pixels if img.channels == 1 else to_grayscale(img).pixels
    h, w = plane.shape
    valid = _ncc_valid_maps(plane, [tpl])[0]
    r = tpl.side // 2
    full = np.zeros((h, w))
    full[r : h - tpl.side + 1 + r, r : w - tpl.side + 1 + r] = valid
    return ScoreMap(full)


# ---------------------------------------------------------------- Harris

def harris_response(img: Image, sigma_w: float, k: float) -> ScoreMap:
    """det(M) - k trace(M)^2 of the Gaussian-weighted structure tensor."""
    if not (sigma_w > 0):
        raise ValueError(f"sigma_w must be positive, got {sigma_w}")
    if not (0.0 < k < 0.25):
        raise ValueError(f"k must be in (0, 0.25), got {k}")
    if img.channels != 1:
        raise ValueError("harris_response expects a grayscale image")
    gx, gy = sobel_gradients(img)
    taps = gaussian_kernel(sigma_w).taps
    sxx = correlate_separable(gx.values * gx.values, taps)
    syy = correlate_separable(gy.values * gy.values, taps)
    sxy = correlate_separable(gx.values * gy.values, taps)
    det = sxx * syy - sxy * sxy
    trace = sxx + syy
    return ScoreMap(det - k * trace * trace)


# ---------------------------------------------------------------- edges/Hough

def edge_map(img: Image, thresh: float) -> ScoreMap:
    """Binary map of pixels whose Sobel gradient magnitude reaches thresh."""
    if not (thresh > 0):
        raise ValueError(f"edge threshold must be positive, got {thresh}")
    gx, gy = sobel_gradients(img)
    mag = np.hypot(gx.values, gy.values)
    return ScoreMap((mag >= thresh).astype(np.float64))


def hough_circles(
    edges: ScoreMap,
    grads: tuple[ScoreMap, ScoreMap],
    r_min: int,
    r_max: int,
    vote_frac: float,
) -> list[tuple[int, int, int, int]]:
    """Gradient-directed circle voting at 1-px center/radius resolution.

    Each edge pixel votes along +/- its gradient direction for every
    radius; peaks reaching vote_frac * 2 pi r survive a per-radius 3x3
    spatial non-max suppression. Sorted by votes descending.
    """
    if not (2 <= r_min <= r_max):
        raise ValueError(f"need 2 <= r_min <= r_max, got [{r_min}, {r_max}]")
    h, w = edges.values.shape
    ys, xs = np.nonzero(edges.values > 0.5)
    if ys.size == 0:
        return []
    gx = grads[0].values[ys, xs]
    gy = grads[1].values[ys, xs]
    mag = np.hypot(gx, gy)
    ok = mag > 1e-12
    ys, xs, gx, gy, mag = ys[ok], xs[ok], gx[ok], gy[ok], mag[ok]
    ux, uy = gx / mag, gy / mag

    radii = np.arange(r_min, r_max + 1)
    acc = np.zeros((radii.size, h, w), dtype=np.int64)
    for ri, r in enumerate(radii):
        for sign in (1.0, -1.0):
            cx = np.rint(xs + sign * r * ux).astype(np.int64)
            cy = np.rint(ys + sign * r * uy).astype(np.int64)
            keep = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            np.add.at(acc[ri], (cy[keep], cx[keep]), 1)

    # Per-radius 3x3 spatial NMS, vectorized across the whole accumulator.
    padded = np.full((radii.size, h + 2, w + 2), -1, dtype=np.int64)
    padded[:, 1:-1, 1:-1] = acc
    neigh_max = padded[:, :-2, :-2]
    for dy in range(3):
        for dx in range(3):
            if dy == 0 and dx == 0:
                continue
            neigh_max = np.maximum(neigh_max, padded[:, dy : dy + h, dx : dx + w])
    need = np.maximum(vote_frac * 2.0 * math.pi * radii, 1.0)
    mask = (acc >= need[:, None, None]) & (acc >= neigh_max)
    ris, ys_p, xs_p = np.nonzero(mask)
    results = [
        (int(x), int(y), int(radii[ri]), int(acc[ri, y, x]))
        for ri, y, x in zip(ris.tolist(), ys_p.tolist(), xs_p.tolist())
    ]
    results.sort(key=lambda t: (-t[3], t[2], t[1], t[0]))
    return results


# ---------------------------------------------------------------- detection

def _prefiltered_plane(img: Image, cfg: DetectionParams) -> np.ndarray:
    """Grayscale -> median -> Gaussian, kept as raw arrays.

    Runs the same kernels as to_grayscale / median_filter /
    gaussian_filter without re-boxing (and re-validating) an Image
    between stages; values are identical.
    """
    from .image import _separable  # shares the size-dependent dispatch

    if cfg.median_radius < 1:
        raise ValueError(f"median radius must be >= 1, got {cfg.median_radius}")
    if img.channels == 3:
        plane = np.empty(img.pixels.shape[:2])
        _kernels.luma(img.pixels, plane)
    else:
        plane = img.pixels
    med = np.empty_like(plane)
    if cfg.median_radius == 1:
        _kernels.median3x3(plane, med)
    else:
        _kernels.median_box(plane, med, cfg.median_radius)
    return _separable(med, gaussian_kernel(cfg.sigma).taps)


def _subpixel_peak(score: np.ndarray, x: int, y: int) -> tuple[float, float]:
    """Quadratic-fit refinement on the 3x3 neighborhood; falls back to (x, y)."""
    h, w = score.shape
    if not (1 <= x < w - 1 and 1 <= y < h - 1):
        return float(x), float(y)
    z = score[y - 1 : y + 2, x - 1 : x + 2]
    # Least-squares quadratic a + bx + cy + dx^2 + exy + fy^2 on the 9 samples.
    gx = np.array([-1.0, 0.0, 1.0])
    b = float((z * gx[None, :]).sum() / 6.0)
    c = float((z * gx[:, None]).sum() / 6.0)
    d = float((z * (gx * gx)[None, :]).sum() / 6.0 - z.sum() / 9.0)
    f = float((z * (gx * gx)[:, None]).sum() / 6.0 - z.sum() / 9.0)
    e = float((z * np.outer(gx, gx)).sum() / 4.0)
    hxx, hyy, hxy = 2.0 * d, 2.0 * f, e
    det = hxx * hyy - hxy * hxy
    if hxx >= 0 or det <= 0:  # not concave
        return float(x), float(y)
    ox = -(hyy * b - hxy * c) / det
    oy = -(hxx * c - hxy * b) / det
    if abs(ox) > 1.0 or abs(oy) > 1.0:
        return float(x), float(y)
    return x + ox, y + oy


def _harris_verify_batch(plane: np.ndarray, centers, cfg: DetectionParams) -> np.ndarray:
    """Batched Harris confirmation for integer candidate centers.

    A candidate passes when the Harris response has a local maximum of at
    least harris_floor within verify_radius. Computed by a fused kernel
    whose values match the full-frame harris_response at every pixel it
    examines (clamp-to-edge positions behave identically).
    """
    if not centers:
        return np.zeros(0, dtype=np.uint8)
    cxs = np.array([c[0] for c in centers], dtype=np.int64)
    cys = np.array([c[1] for c in centers], dtype=np.int64)
    out = np.zeros(len(centers), dtype=np.uint8)
    taps = gaussian_kernel(cfg.harris_sigma).taps
    _kernels.harris_verify(
        plane, cxs, cys,
        int(math.ceil(cfg.verify_radius)), float(cfg.verify_radius) ** 2,
        taps, cfg.harris_k, cfg.harris_floor, out,
    )
    return out


def _hough_verify_batch(plane: np.ndarray, centers, cfg: DetectionParams) -> np.ndarray:
    """Batched Hough confirmation: a qualifying circle center within the
    verify radius of each candidate (hough_circles semantics on an ROI)."""
    if not centers:
        return np.zeros(0, dtype=np.uint8)
    cxs = np.array([c[0] for c in centers], dtype=np.int64)
    cys = np.array([c[1] for c in centers], dtype=np.int64)
    out = np.zeros(len(centers), dtype=np.uint8)
    _kernels.hough_verify(
        plane, cxs, cys,
        cfg.hough_r_min, cfg.hough_r_max, cfg.hough_vote_frac,
        cfg.edge_thresh, float(cfg.verify_radius) ** 2, out,
    )
    return out


def detect_markers(img: Image, bank, cfg: DetectionParams | None = None) -> list[MarkerHit]:
    """NCC proposes, Harris and Hough confirm, quadratic fit refines.

    Pipeline: grayscale -> median -> Gaussian -> per-template NCC ->
    thresholded peaks -> cross-class non-max suppression (radius =
    side/2) -> Harris + Hough verification -> subpixel refinement.
    Empty result is valid.
    """
    if not bank:
        raise ValueError("template bank must not be empty")
    if not bank:
        raise ValueError("template bank must not be empty")
    cfg = cfg or DetectionParams()
    plane = _prefiltered_plane(img, cfg)
    maps = _ncc_valid_maps(plane, bank, use_f32=True)
    matched_bank = _filtered_bank(bank, cfg.sigma)

    candidates = []
    peak_buf = np.empty((4096, 2), dtype=np.int64)
    for idx, score in enumerate(maps):
        r = bank[idx].side // 2
        # Candidate peaks: above threshold and a 3x3 local maximum.
        count = min(_kernels.threshold_peaks(score, cfg.ncc_thresh, peak_buf), 4096)
        for x, y in peak_buf[:count].tolist():
            candidates.append((float(score[y, x]), idx, x + r, y + r))
    # Strongest first; deterministic tie-break.
    candidates.sort(key=lambda t: (-t[0], bank[t[1]].class_id, t[3], t[2]))

    kept = []
    for score, idx, x, y in candidates:
        suppress_r2 = (bank[idx].side / 2.0) ** 2
        if any((x - kx) ** 2 + (y - ky) ** 2 < suppress_r2 for _, _, kx, ky in kept):
            continue
        kept.append((score, idx, x, y))

    kept_xy = [(x, y) for _, _, x, y in kept]
    harris_ok = _harris_verify_batch(plane, kept_xy, cfg)
    survivors = [item for item, ok in zip(kept, harris_ok) if ok]
    hough_ok = _hough_verify_batch(plane, [(x, y) for _, _, x, y in survivors], cfg)
    hits: list[MarkerHit] = []
    for (score, idx, x, y), c_ok in zip(survivors, hough_ok):
        if not c_ok:
            continue
        side = bank[idx].side
        r = side // 2
        sx, sy = _subpixel_peak(maps[idx], x - r, y - r)
        # Final class: NCC argmax of the filtered-scene patch against the
        # equally blurred bank (matched filtering keeps thin ring features
        # comparable even on soft video).
        patch = Image(plane[y - r : y + r + 1, x - r : x + r + 1])
        same_side = [t for t in matched_bank if t.side == side]
        class_id, m_score = classify_marker(patch, same_side)
        hits.append(
            MarkerHit(
                center=(sx + r, sy + r),
                score=m_score,
                class_id=class_id,
                radius=side / 2.0,
                corner_role=ROLE_NAMES[class_id % 4],
            )
        )
    return hits


def classify_marker(patch: Image, bank) -> tuple[int, float]:
    """Best NCC class for an equal-size patch; ties go to the lowest class."""
    if not bank:
        raise ValueError("template bank must not be empty")
    if patch.channels != 1:
        raise ValueError("classify_marker expects a grayscale patch")
    p = patch.pixels
    pz = p - p.mean()
    p_norm = math.sqrt(float((pz * pz).sum()))
    best: tuple[int, float] | None = None
    for tpl in sorted(bank, key=lambda t: t.class_id):
        if tpl.image.pixels.shape != p.shape:
            raise ValueError("patch and template sides differ")
        t = tpl.image.pixels
        tz = t - t.mean()
        t_norm = math.sqrt(float((tz * tz).sum()))
        score = 0.0
        if p_norm > 1e-12 and t_norm > 1e-12:
            score = float((pz * tz).sum() / (p_norm * t_norm))
            score = max(-1.0, min(1.0, score))
        if best is None or score > best[1]:
            best = (tpl.class_id, score)
    return best


def corners_to_quad(hits) -> tuple[list[MirrorQuad], list[int]]:
    """Assemble one quad per complete TL/TR/BR/BL class quadruple.

    Corners are ordered by marker role, not geometry. Returns the quads
    plus mirror ids that had markers but no complete quadruple; collinear
    corners raise DegenerateQuadError.
    """
    by_mirror: dict[int, dict[int, MarkerHit]] = {}
    for hit in hits:
        slot = by_mirror.setdefault(hit.mirror_id, {})
        prev = slot.get(hit.role)
        if prev is None or hit.score > prev.score:
            slot[hit.role] = hit
    quads = []
    incomplete = []
    for mirror_id in sorted(by_mirror):
        roles = by_mirror[mirror_id]
        if len(roles) < 4:
            incomplete.append(mirror_id)
            continue
        corners = np.array([roles[r].center for r in range(4)])
        quads.append(MirrorQuad(corners=corners, mirror_id=mirror_id))
    return quads, incomplete


def single_marker_quads(hits, width: float, height: float) -> list[MirrorQuad]:
    """Single-fiducial mode: a configured rectangle centered on each hit."""
    quads = []
    for hit in sorted(hits, key=lambda h: h.class_id):
        cx, cy = hit.center
        hw, hh = width / 2.0, height / 2.0
        corners = np.array([
            [cx - hw, cy - hh],
            [cx + hw, cy - hh],
            [cx + hw, cy + hh],
            [cx - hw, cy + hh],
        ])
        quads.append(MirrorQuad(corners=corners, mirror_id=hit.class_id))
    return quads
