"""Projective math for the mirror pipeline.

Homography estimation and application, the reflected-camera mirror model,
the one-parameter scaled-homography family (the depth ambiguity of a
single-camera view shows up as apparent subject size), automatic scale
resolution, and field-angle cropping.

All matrices are 3x3 row-major float64. Homographies are normalized so the
bottom-right entry is 1 when it is not tiny, otherwise to unit Frobenius
norm; comparisons in tests happen after this normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .image import Image


class GeometryError(ValueError):
    """Invalid or degenerate projective configuration."""


class PointAtInfinityError(GeometryError):
    """Mapped point has a vanishing homogeneous w."""


# Camera-space horizontal flip; left-handed poses compose this after R.
_FLIP_X = np.diag([-1.0, 1.0, 1.0])


def _normalized_matrix(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.isfinite(m).all():
        raise GeometryError(f"homography must be a finite 3x3 matrix, got {m.shape}")
    if abs(m[2, 2]) > 1e-9:
        m = m / m[2, 2]
    else:
        norm = np.linalg.norm(m)
        if not (norm > 0):
            raise GeometryError("zero homography matrix")
        m = m / norm
    det = np.linalg.det(m)
    if not (abs(det) > 1e-12):
        raise GeometryError("singular homography")
    return m


@dataclass(eq=False)
class Homography:
    """Invertible 3x3 projective map, stored normalized."""

    m: np.ndarray

    def __post_init__(self):
        self.m = _normalized_matrix(self.m)


@dataclass(eq=False)
class Plane3:
    """Plane {p : n.p + d = 0} with unit normal, world units."""

    n: np.ndarray
    d: float

    def __post_init__(self):
        n = np.asarray(self.n, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise GeometryError("plane normal must be unit length")
        self.n = n
        self.d = float(self.d)


@dataclass(eq=False)
class CameraPose:
    """Pinhole camera: world center, world-to-camera rotation, intrinsics.

    handedness is +1 for a physical camera and -1 for a mirror image of
    one; a left-handed pose applies a camera-space horizontal flip after
    R, which downstream becomes the mirror's left-right parity flip.
    """

    center: np.ndarray
    R: np.ndarray
    K: np.ndarray
    handedness: int = 1

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        R = np.asarray(self.R, dtype=np.float64)
        K = np.asarray(self.K, dtype=np.float64)
        if R.shape != (3, 3) or np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise GeometryError("R must be orthonormal")
        if np.linalg.det(R) < 0:
            raise GeometryError("R must be a proper rotation (det +1)")
        if K.shape != (3, 3) or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError("K must have positive focal lengths")
        if abs(K[1, 0]) > 0 or abs(K[2, 0]) > 0 or abs(K[2, 1]) > 0 or abs(K[0, 1]) > 0:
            raise GeometryError("K must be upper-triangular with zero skew")
        if self.handedness not in (1, -1):
            raise GeometryError("handedness must be +1 or -1")
        self.center, self.R, self.K = c, R, K

    def world_to_camera(self) -> np.ndarray:
        """Effective linear map including the handedness flip (may be improper)."""
        return self.R if self.handedness == 1 else _FLIP_X @ self.R


@dataclass(eq=False)
class ScaledHomography:
    """One member of the solution ray: base composed with a scale about anchor."""

    base: Homography
    anchor: tuple[float, float]
    s: float

    def __post_init__(self):
        if not (math.isfinite(self.s) and self.s > 0):
            raise GeometryError(f"scale must be positive, got {self.s}")

    def realize(self) -> Homography:
        return scaled_homography(self.base, self.anchor, self.s)


# ---------------------------------------------------------------- application

def apply_homography(h: Homography, p) -> tuple[float, float]:
    """Map one point; raises PointAtInfinityError when w' vanishes."""
    x, y = float(p[0]), float(p[1])
    m = h.m
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(w) <= 1e-12:
        raise PointAtInfinityError(f"point ({x}, {y}) maps to infinity")
    return (
        (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w,
        (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w,
    )


def apply_homography_many(h: Homography, pts: np.ndarray) -> np.ndarray:
    """Vectorized apply for an (n, 2) array of points."""
    pts = np.asarray(pts, dtype=np.float64)
    ones = np.ones((pts.shape[0], 1))
    q = np.hstack([pts, ones]) @ h.m.T
    w = q[:, 2]
    if np.abs(w).min() <= 1e-12:
        raise PointAtInfinityError("a point maps to infinity")
    return q[:, :2] / w[:, None]


def invert_homography(h: Homography) -> Homography:
    return Homography(np.linalg.inv(h.m))


def compose(ha: Homography, hb: Homography) -> Homography:
    """ha after hb: compose(ha, hb)(p) = ha(hb(p))."""
    return Homography(ha.m @ hb.m)


# ---------------------------------------------------------------- estimation

def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin and mean radius to sqrt(2)."""
    centroid = pts.mean(axis=0)
    radii = np.linalg.norm(pts - centroid, axis=1)
    mean_r = radii.mean()
    if mean_r <= 1e-12:
        raise GeometryError("degenerate correspondences: coincident points")
    s = math.sqrt(2.0) / mean_r
    return np.array([
        [s, 0.0, -s * centroid[0]],
        [0.0, s, -s * centroid[1]],
        [0.0, 0.0, 1.0],
    ])


def _solve_pivoted(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # LAPACK gesv is Gaussian elimination with partial pivoting. The normal
    # matrix is exactly singular for noiseless data, so shift by a tiny
    # relative ridge: a diagonal shift leaves the eigenvectors untouched and
    # inverse iteration still lands on the null direction in one step.
    ridge = 1e-13 * max(float(np.trace(a)), 1.0)
    return np.linalg.solve(a + ridge * np.eye(a.shape[0]), b)


def _smallest_eigenpair(n: np.ndarray) -> tuple[np.ndarray, float]:
    """Deterministic inverse-power iteration (shift 0) on a symmetric matrix."""
    v = np.ones(n.shape[0]) / math.sqrt(n.shape[0])
    for _ in range(200):
        w = _solve_pivoted(n, v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        w = w / norm
        if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < 1e-14:
            v = w
            break
        v = w
    # Deterministic sign: largest-magnitude component positive.
    k = int(np.argmax(np.abs(v)))
    if v[k] < 0:
        v = -v
    lam = float(v @ n @ v)
    return v, lam


def dlt_homography(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Normalized DLT over >= 4 correspondences (least squares for more).

    Hartley pre-conditioning on both sides, smallest eigenvector of the
    9x9 normal matrix by inverse-power iteration, then denormalization.
    Collinear or otherwise rank-deficient configurations are rejected.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape or src.shape[0] < 4:
        raise GeometryError(f"need >= 4 correspondences, got {src.shape[0]}")
    if not (np.isfinite(src).all() and np.isfinite(dst).all()):
        raise GeometryError("correspondences must be finite")

    t_src = _hartley_normalization(src)
    t_dst = _hartley_normalization(dst)
    sn = (np.hstack([src, np.ones((len(src), 1))]) @ t_src.T)[:, :2]
    dn = (np.hstack([dst, np.ones((len(dst), 1))]) @ t_dst.T)[:, :2]

    a = np.zeros((2 * len(sn), 9))
    a[0::2, 0] = sn[:, 0]
    a[0::2, 1] = sn[:, 1]
    a[0::2, 2] = 1.0
    a[0::2, 6] = -dn[:, 0] * sn[:, 0]
    a[0::2, 7] = -dn[:, 0] * sn[:, 1]
    a[0::2, 8] = -dn[:, 0]
    a[1::2, 3] = sn[:, 0]
    a[1::2, 4] = sn[:, 1]
    a[1::2, 5] = 1.0
    a[1::2, 6] = -dn[:, 1] * sn[:, 0]
    a[1::2, 7] = -dn[:, 1] * sn[:, 1]
    a[1::2, 8] = -dn[:, 1]

    normal = a.T @ a
    v1, lam1 = _smallest_eigenpair(normal)
    # Second-smallest via deflation: shifting v1's eigenvalue by trace(N)
    # (>= lambda_max) leaves lambda_2 as the new minimum.
    deflated = normal + float(np.trace(normal)) * np.outer(v1, v1)
    v2, _ = _smallest_eigenpair(deflated)
    lam2 = float(v2 @ normal @ v2)

    lam1 = max(lam1, 0.0)
    lam2 = max(lam2, 0.0)
    scale = float(np.trace(normal))
    if lam2 <= 1e-12 * scale:
        raise GeometryError("degenerate correspondences: rank-deficient system")
    if lam1 / lam2 > 0.99:
        raise GeometryError("degenerate correspondences: solution not unique")

    h_norm = v1.reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h_norm @ t_src
    return Homography(h)


def quad_to_quad(src, dst) -> Homography:
    """Exact homography through 4 point pairs (fixes h33 = 1)."""
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i in range(4):
        x, y = src[i]
        u, v = dst[i]
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        sol = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise GeometryError("degenerate quad: cannot interpolate homography") from exc
    h = Homography(np.append(sol, 1.0).reshape(3, 3))
    back = apply_homography_many(h, src)
    if np.abs(back - dst).max() > 1e-6:
        raise GeometryError("degenerate quad: interpolation did not reproduce corners")
    return h


# ---------------------------------------------------------------- reflection

def reflect_point(plane: Plane3, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(3)
    return p - 2.0 * (plane.n @ p + plane.d) * plane.n


def reflect_camera(cam: CameraPose, plane: Plane3) -> CameraPose:
    """Mirror image of a camera: reflected center, reflected view, flipped parity."""
    mirror = np.eye(3) - 2.0 * np.outer(plane.n, plane.n)
    effective = cam.world_to_camera() @ mirror
    handedness = -cam.handedness
    rot = effective if handedness == 1 else _FLIP_X @ effective
    return CameraPose(reflect_point(plane, cam.center), rot, cam.K, handedness)


def project_point(cam: CameraPose, q) -> tuple[float, float]:
    """Pinhole projection of a world point, honoring the handedness flip."""
    q = np.asarray(q, dtype=np.float64).reshape(3)
    v = cam.world_to_camera() @ (q - cam.center)
    if abs(v[2]) <= 1e-12:
        raise PointAtInfinityError("point projects to infinity")
    u = cam.K @ v
    return u[0] / u[2], u[1] / u[2]


def plane_basis(plane: Plane3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Canonical in-plane frame (origin, e1, e2) with e1 x e2 = n."""
    origin = -plane.d * plane.n
    seed = np.array([1.0, 0.0, 0.0]) if abs(plane.n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = seed - (seed @ plane.n) * plane.n
    e1 = e1 / np.linalg.norm(e1)
    e2 = np.cross(plane.n, e1)
    return origin, e1, e2


def mirror_view_homography(cam: CameraPose, mirror: Plane3, frame=None) -> tuple[Homography, bool]:
    """Plane-induced homography from the reflected camera's image to the real one.

    frame is an in-plane basis (origin, e1, e2); omitted, the canonical
    basis of the plane is used. For any point q on the mirror plane,
    project_point(cam, q) equals the homography applied to
    project_point(reflect_camera(cam, mirror), q) -- that consistency is
    the definition this function is tested against. The returned flag
    reports that the virtual view carries flipped parity.
    """
    if abs(mirror.n @ cam.center + mirror.d) <= 1e-9:
        raise GeometryError("camera center lies on the mirror plane")
    origin, e1, e2 = plane_basis(mirror) if frame is None else frame
    virtual = reflect_camera(cam, mirror)

    def plane_to_image(pose: CameraPose) -> np.ndarray:
        e = pose.world_to_camera()
        cols = np.column_stack([e @ e1, e @ e2, e @ (origin - pose.center)])
        return pose.K @ cols

    g_real = plane_to_image(cam)
    g_virt = plane_to_image(virtual)
    if abs(np.linalg.det(g_virt)) <= 1e-15 or abs(np.linalg.det(g_real)) <= 1e-15:
        raise GeometryError("degenerate camera/plane configuration")
    h = Homography(g_real @ np.linalg.inv(g_virt))
    return h, virtual.handedness != cam.handedness


# ---------------------------------------------------------------- scale family

def scaled_homography(base: Homography, anchor, s: float) -> Homography:
    """base composed with a scale by s about the feed-space anchor point."""
    if not (math.isfinite(s) and s > 0):
        raise GeometryError(f"scale must be positive, got {s}")
    ax, ay = float(anchor[0]), float(anchor[1])
    z = np.array([
        [s, 0.0, (1.0 - s) * ax],
        [0.0, s, (1.0 - s) * ay],
        [0.0, 0.0, 1.0],
    ])
    return Homography(base.m @ z)


def _quad_corners(quad) -> np.ndarray:
    corners = np.asarray(getattr(quad, "corners", quad), dtype=np.float64).reshape(4, 2)
    if not np.isfinite(corners).all():
        raise GeometryError("quad corners must be finite")
    return corners


def signed_area(corners: np.ndarray) -> float:
    """Shoelace area; positive for clockwise order under y-down image coords."""
    x, y = corners[:, 0], corners[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _points_in_convex_quad(pts: np.ndarray, corners: np.ndarray) -> bool:
    # Positive-area corner order puts interior points at non-negative edge cross.
    for i in range(4):
        p0 = corners[i]
        edge = corners[(i + 1) % 4] - p0
        rel = pts - p0
        if np.min(edge[0] * rel[:, 1] - edge[1] * rel[:, 0]) < -1e-9:
            return False
    return True


def resolve_scale(
    base: Homography,
    anchor,
    subject_bbox,
    quad,
    margin: float,
    s_min: float = 0.25,
    s_max: float = 4.0,
) -> tuple[float, bool]:
    """Largest s in [s_min, s_max] keeping the warped bbox inside the quad.

    The quad is shrunk toward its centroid by the margin fraction first.
    Returns (s, in_sight); when even s_min spills outside, s_min comes
    back with in_sight False. Bisection to relative tolerance 1e-4.
    """
    x0, y0, x1, y1 = (float(v) for v in subject_bbox)
    if not (x0 < x1 and y0 < y1):
        raise GeometryError(f"empty subject bbox {subject_bbox}")
    if not (0.0 <= margin < 0.5):
        raise GeometryError(f"margin must be in [0, 0.5), got {margin}")
    if not (0 < s_min <= s_max):
        raise GeometryError(f"bad scale bounds [{s_min}, {s_max}]")
    corners = _quad_corners(quad)
    if signed_area(corners) <= 0:
        raise GeometryError("degenerate quad: non-positive area")
    centroid = corners.mean(axis=0)
    shrunk = centroid + (1.0 - margin) * (corners - centroid)
    bbox_pts = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])

    def contained(s: float) -> bool:
        h = scaled_homography(base, anchor, s)
        try:
            warped = apply_homography_many(h, bbox_pts)
        except PointAtInfinityError:
            return False
        return _points_in_convex_quad(warped, shrunk)

    if contained(s_max):
        return s_max, True
    if not contained(s_min):
        return s_min, False
    lo, hi = s_min, s_max
    while (hi - lo) > 1e-4 * hi:
        mid = 0.5 * (lo + hi)
        if contained(mid):
            lo = mid
        else:
            hi = mid
    return lo, True


# ---------------------------------------------------------------- cropping

def crop_field_angle(img: Image, fov_deg: float, focal_px: float) -> tuple[Image, tuple[int, int]]:
    """Centered crop of width 2*focal*tan(fov/2), aspect preserved.

    Returns the crop and its top-left offset in original coordinates so
    homographies can be composed across the crop.
    """
    if not (0.0 < fov_deg < 180.0):
        raise GeometryError(f"fov must be in (0, 180) degrees, got {fov_deg}")
    if not (math.isfinite(focal_px) and focal_px > 0):
        raise GeometryError(f"focal length must be positive, got {focal_px}")
    w, h = img.width, img.height
    crop_w = int(min(round(2.0 * focal_px * math.tan(math.radians(fov_deg) / 2.0)), w))
    crop_w = max(crop_w, 1)
    crop_h = max(min(int(round(h * crop_w / w)), h), 1)
    if (crop_w, crop_h) == (w, h):
        return img, (0, 0)  # full-frame case: the image is immutable, share it
    x0 = (w - crop_w) // 2
    y0 = (h - crop_h) // 2
    return Image(img.pixels[y0:y0 + crop_h, x0:x0 + crop_w].copy()), (x0, y0)


# ---------------------------------------------------------------- text format

def homography_to_text(h: Homography) -> str:
    """9 whitespace-separated decimals, row-major, after normalization."""
    return " ".join(repr(float(v)) for v in h.m.ravel()) + "\n"


def homography_from_text(text: str) -> Homography:
    parts = text.split()
    if len(parts) != 9:
        raise GeometryError(f"homography text needs 9 numbers, got {len(parts)}")
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise GeometryError(f"bad number in homography text: {exc}") from exc
    return Homography(np.array(vals).reshape(3, 3))
