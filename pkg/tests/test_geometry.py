import math

import numpy as np
import pytest

from mirrorcast.geometry import (
    CameraPose,
    GeometryError,
    Homography,
    Plane3,
    PointAtInfinityError,
    ScaledHomography,
    apply_homography,
    apply_homography_many,
    compose,
    crop_field_angle,
    dlt_homography,
    homography_from_text,
    homography_to_text,
    invert_homography,
    mirror_view_homography,
    plane_basis,
    project_point,
    quad_to_quad,
    reflect_camera,
    reflect_point,
    resolve_scale,
    scaled_homography,
    signed_area,
)
from mirrorcast.image import Image

UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_mild_homography(rng, max_cond=100.0):
    """Random invertible H with bounded condition number and mild perspective."""
    while True:
        m = np.eye(3) + 0.3 * rng.uniform(-1, 1, size=(3, 3))
        m[2, 0:2] = rng.uniform(-1e-3, 1e-3, size=2)
        m[2, 2] = 1.0
        if abs(np.linalg.det(m)) > 1e-3 and np.linalg.cond(m) <= max_cond:
            return Homography(m)


def grid_search_scale(base, anchor, bbox, quad, margin, s_min, s_max, steps=10_000):
    """Independent oracle: densest-grid maximizer of the containment predicate."""
    x0, y0, x1, y1 = bbox
    pts = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    corners = np.asarray(quad, dtype=float)
    centroid = corners.mean(axis=0)
    shrunk = centroid + (1.0 - margin) * (corners - centroid)

    def inside(s):
        h = scaled_homography(base, anchor, s)
        warped = apply_homography_many(h, pts)
        for i in range(4):
            p0 = shrunk[i]
            e = shrunk[(i + 1) % 4] - p0
            rel = warped - p0
            if np.min(e[0] * rel[:, 1] - e[1] * rel[:, 0]) < -1e-9:
                return False
        return True

    best = None
    for s in np.linspace(s_min, s_max, steps):
        if inside(s):
            best = s
    return s_min if best is None else best


# ---------------------------------------------------------------- apply

def test_apply_identity():
    h = Homography(np.eye(3))
    assert apply_homography(h, (3.5, -2.0)) == (3.5, -2.0)


def test_apply_translation():
    m = np.eye(3)
    m[0, 2] = 3.0
    m[1, 2] = -2.0
    assert apply_homography(Homography(m), (0.0, 0.0)) == (3.0, -2.0)


def test_apply_matches_homogeneous_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        h = random_mild_homography(rng)
        p = rng.uniform(-50, 50, size=2)
        v = h.m @ np.array([p[0], p[1], 1.0])
        want = (v[0] / v[2], v[1] / v[2])
        got = apply_homography(h, p)
        assert abs(got[0] - want[0]) <= 1e-12
        assert abs(got[1] - want[1]) <= 1e-12


def test_apply_point_at_infinity():
    m = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]])
    with pytest.raises(PointAtInfinityError):
        apply_homography(Homography(m), (-1.0, 0.0))


def test_projective_equivalence_of_scaling():
    rng = np.random.default_rng(2)
    h = random_mild_homography(rng)
    h_scaled = Homography(17.3 * h.m)
    assert np.abs(h.m - h_scaled.m).max() <= 1e-12  # normalization idempotent
    p = (4.2, -1.1)
    assert np.allclose(apply_homography(h, p), apply_homography(h_scaled, p), atol=1e-12)


# ---------------------------------------------------------------- invert/compose

def test_invert_identity():
    assert np.allclose(invert_homography(Homography(np.eye(3))).m, np.eye(3), atol=1e-15)


def test_compose_with_identity():
    rng = np.random.default_rng(3)
    h = random_mild_homography(rng)
    assert np.abs(compose(h, Homography(np.eye(3))).m - h.m).max() <= 1e-12


def test_invert_round_trip():
    rng = np.random.default_rng(4)
    h = random_mild_homography(rng)
    ident = compose(invert_homography(h), h)
    assert np.abs(ident.m - np.eye(3)).max() <= 1e-9
    for _ in range(100):
        p = rng.uniform(-100, 100, size=2)
        q = apply_homography(ident, p)
        assert abs(q[0] - p[0]) <= 1e-9 and abs(q[1] - p[1]) <= 1e-9


def test_singular_matrix_rejected():
    with pytest.raises(GeometryError):
        Homography(np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 0]]) * 0 + np.outer([1, 2, 1], [1, 0, 1]))


# ---------------------------------------------------------------- DLT

def test_dlt_fixed_unit_square():
    h = dlt_homography(UNIT_SQUARE, UNIT_SQUARE)
    assert np.abs(h.m - np.eye(3)).max() <= 1e-9


def test_dlt_translation():
    want = np.eye(3)
    want[0, 2] = 5.0
    want[1, 2] = 7.0
    h = dlt_homography(UNIT_SQUARE, UNIT_SQUARE + [5.0, 7.0])
    assert np.abs(h.m - want).max() <= 1e-9


def test_dlt_recovers_known_homography():
    rng = np.random.default_rng(5)
    for _ in range(10):
        truth = random_mild_homography(rng)
        src = rng.uniform(0, 200, size=(12, 2))
        dst = apply_homography_many(truth, src)
        est = dlt_homography(src, dst)
        assert np.abs(est.m - truth.m).max() <= 1e-6
        reproj = apply_homography_many(est, src)
        assert np.abs(reproj - dst).max() < 1e-8


def test_dlt_rejects_collinear():
    src = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]])
    dst = src * 2.0
    with pytest.raises(GeometryError):
        dlt_homography(src, dst)


def test_dlt_rejects_too_few():
    with pytest.raises(GeometryError):
        dlt_homography(UNIT_SQUARE[:3], UNIT_SQUARE[:3])


# ---------------------------------------------------------------- quad_to_quad

def test_quad_to_quad_same_quad():
    h = quad_to_quad(UNIT_SQUARE, UNIT_SQUARE)
    assert np.abs(h.m - np.eye(3)).max() <= 1e-12


def test_quad_to_quad_pure_scale():
    h = quad_to_quad(UNIT_SQUARE, 2.0 * UNIT_SQUARE)
    assert np.abs(h.m - np.diag([2.0, 2.0, 1.0])).max() <= 1e-12


def test_quad_to_quad_random_convex():
    rng = np.random.default_rng(6)
    for _ in range(20):
        src = UNIT_SQUARE * 80 + rng.uniform(-12, 12, size=(4, 2))
        dst = UNIT_SQUARE * 60 + 30 + rng.uniform(-12, 12, size=(4, 2))
        h = quad_to_quad(src, dst)
        assert np.abs(apply_homography_many(h, src) - dst).max() < 1e-9
        est = dlt_homography(src, dst)
        assert np.abs(h.m - est.m).max() <= 1e-6


def test_quad_to_quad_rejects_degenerate():
    bad = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    with pytest.raises(GeometryError):
        quad_to_quad(bad, UNIT_SQUARE)


# ---------------------------------------------------------------- reflection

def test_reflect_point_fixed_on_plane():
    plane = Plane3(np.array([0.0, 0.0, 1.0]), -2.0)
    p = np.array([3.0, 4.0, 2.0])
    assert np.allclose(reflect_point(plane, p), p, atol=1e-15)


def test_reflect_point_z_plane():
    plane = Plane3(np.array([0.0, 0.0, 1.0]), 0.0)
    assert np.allclose(reflect_point(plane, [0.0, 0.0, 1.0]), [0.0, 0.0, -1.0])


def test_reflect_point_involution():
    rng = np.random.default_rng(7)
    for _ in range(25):
        n = rng.normal(size=3)
        plane = Plane3(n / np.linalg.norm(n), rng.uniform(-3, 3))
        p = rng.uniform(-5, 5, size=3)
        assert np.abs(reflect_point(plane, reflect_point(plane, p)) - p).max() <= 1e-12


def make_camera(rng):
    k = np.array([
        [rng.uniform(400, 800), 0.0, rng.uniform(250, 400)],
        [0.0, rng.uniform(400, 800), rng.uniform(180, 300)],
        [0.0, 0.0, 1.0],
    ])
    return CameraPose(rng.uniform(-3, 3, size=3), random_rotation(rng), k)


def test_reflect_camera_involution():
    rng = np.random.default_rng(8)
    for _ in range(25):
        cam = make_camera(rng)
        n = rng.normal(size=3)
        plane = Plane3(n / np.linalg.norm(n), rng.uniform(-2, 2))
        back = reflect_camera(reflect_camera(cam, plane), plane)
        assert np.abs(back.center - cam.center).max() <= 1e-12
        assert np.abs(back.R - cam.R).max() <= 1e-9
        assert back.handedness == cam.handedness


def test_reflect_camera_flips_handedness():
    rng = np.random.default_rng(9)
    cam = make_camera(rng)
    plane = Plane3(np.array([0.0, 0.0, 1.0]), 0.0)
    assert reflect_camera(cam, plane).handedness == -1


# ---------------------------------------------------------------- mirror view

def test_mirror_view_symmetric_configuration():
    # Camera on the z axis looking straight at the z=0 mirror: the virtual
    # and real images of the plane coincide, all that remains is parity.
    k = np.array([[500.0, 0.0, 320.0], [0.0, 500.0, 240.0], [0.0, 0.0, 1.0]])
    r = np.diag([1.0, -1.0, -1.0])  # looks along -z, proper rotation
    cam = CameraPose(np.array([0.0, 0.0, 5.0]), r, k)
    plane = Plane3(np.array([0.0, 0.0, 1.0]), 0.0)
    basis = (np.zeros(3), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    h, flipped = mirror_view_homography(cam, plane, basis)
    assert flipped
    assert np.abs(h.m - np.eye(3)).max() <= 1e-9


def test_mirror_view_consistency_contract():
    rng = np.random.default_rng(10)
    checked = 0
    while checked < 100:
        cam = make_camera(rng)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        plane = Plane3(n, rng.uniform(-2, 2))
        if abs(plane.n @ cam.center + plane.d) < 0.5:
            continue
        h, flipped = mirror_view_homography(cam, plane)
        assert flipped
        origin, e1, e2 = plane_basis(plane)
        virtual = reflect_camera(cam, plane)
        tried = 0
        for _ in range(50):
            u, v = rng.uniform(-2, 2, size=2)
            q = origin + u * e1 + v * e2
            depth_real = (cam.world_to_camera() @ (q - cam.center))[2]
            depth_virt = (virtual.world_to_camera() @ (q - virtual.center))[2]
            if abs(depth_real) < 0.3 or abs(depth_virt) < 0.3:
                continue
            real_px = project_point(cam, q)
            virt_px = project_point(virtual, q)
            if max(map(abs, real_px + virt_px)) > 1e5:
                continue
            mapped = apply_homography(h, virt_px)
            assert abs(mapped[0] - real_px[0]) <= 1e-6
            assert abs(mapped[1] - real_px[1]) <= 1e-6
            tried += 1
            if tried >= 3:
                break
        if tried:
            checked += 1


def test_mirror_view_rejects_camera_on_plane():
    k = np.array([[500.0, 0.0, 320.0], [0.0, 500.0, 240.0], [0.0, 0.0, 1.0]])
    cam = CameraPose(np.zeros(3), np.eye(3), k)
    plane = Plane3(np.array([0.0, 0.0, 1.0]), 0.0)
    with pytest.raises(GeometryError):
        mirror_view_homography(cam, plane)


# ---------------------------------------------------------------- scale family

def test_scaled_homography_unit_scale():
    rng = np.random.default_rng(11)
    base = random_mild_homography(rng)
    h = scaled_homography(base, (3.0, 4.0), 1.0)
    assert np.abs(h.m - base.m).max() <= 1e-12


def test_scaled_homography_anchor_fixed():
    rng = np.random.default_rng(12)
    base = random_mild_homography(rng)
    anchor = (12.0, 7.0)
    images = [apply_homography(scaled_homography(base, anchor, s), anchor) for s in (0.5, 1.0, 2.0)]
    spread = max(
        math.hypot(a[0] - b[0], a[1] - b[1]) for a in images for b in images
    )
    assert spread <= 1e-9


def test_scaled_homography_about_anchor():
    h = scaled_homography(Homography(np.eye(3)), (10.0, 10.0), 2.0)
    assert np.allclose(apply_homography(h, (11.0, 10.0)), (12.0, 10.0), atol=1e-12)


def test_scaled_homography_anchor_fixed_log_grid():
    rng = np.random.default_rng(13)
    base = random_mild_homography(rng)
    anchor = (5.0, -2.0)
    ref = apply_homography(base, anchor)
    for s in np.logspace(-1, 1, 15):
        got = apply_homography(scaled_homography(base, anchor, s), anchor)
        assert math.hypot(got[0] - ref[0], got[1] - ref[1]) <= 1e-9


def test_scaled_homography_rejects_nonpositive():
    with pytest.raises(GeometryError):
        scaled_homography(Homography(np.eye(3)), (0.0, 0.0), 0.0)
    with pytest.raises(GeometryError):
        ScaledHomography(Homography(np.eye(3)), (0.0, 0.0), -1.0)


# ---------------------------------------------------------------- resolve_scale

QUAD_100 = np.array([[100.0, 100.0], [300.0, 100.0], [300.0, 260.0], [100.0, 260.0]])


def test_resolve_scale_upper_bound_active():
    base = quad_to_quad(np.array([[0.0, 0.0], [400.0, 0.0], [400.0, 300.0], [0.0, 300.0]]), QUAD_100)
    bbox = (180.0, 130.0, 220.0, 170.0)
    s, in_sight = resolve_scale(base, (200.0, 150.0), bbox, QUAD_100, margin=0.0, s_max=1.0)
    assert in_sight and s == 1.0


def test_resolve_scale_analytic_half():
    # Identity mapping, bbox twice the quad size and concentric: s = 0.5.
    quad = np.array([[100.0, 100.0], [200.0, 100.0], [200.0, 200.0], [100.0, 200.0]])
    bbox = (50.0, 50.0, 250.0, 250.0)
    base = Homography(np.eye(3))
    s, in_sight = resolve_scale(base, (150.0, 150.0), bbox, quad, margin=0.0)
    assert in_sight
    assert abs(s - 0.5) <= 1e-3


def test_resolve_scale_out_of_sight_flag():
    quad = np.array([[100.0, 100.0], [110.0, 100.0], [110.0, 110.0], [100.0, 110.0]])
    bbox = (0.0, 0.0, 400.0, 400.0)
    s, in_sight = resolve_scale(Homography(np.eye(3)), (200.0, 200.0), bbox, quad, margin=0.0)
    assert not in_sight and s == 0.25


def test_resolve_scale_matches_grid_oracle():
    rng = np.random.default_rng(14)
    for _ in range(15):
        base = random_mild_homography(rng)
        anchor_src = rng.uniform(140, 260, size=2)
        cx, cy = rng.uniform(150, 250, size=2)
        half_w, half_h = rng.uniform(60, 140, size=2)
        quad_center = apply_homography(base, anchor_src)
        quad = np.array([
            [quad_center[0] - half_w, quad_center[1] - half_h],
            [quad_center[0] + half_w, quad_center[1] - half_h],
            [quad_center[0] + half_w, quad_center[1] + half_h],
            [quad_center[0] - half_w, quad_center[1] + half_h],
        ]) + rng.uniform(-10, 10, size=(4, 2))
        if signed_area(quad) <= 0:
            continue
        bw, bh = rng.uniform(10, 120, size=2)
        bbox = (anchor_src[0] - bw, anchor_src[1] - bh, anchor_src[0] + bw, anchor_src[1] + bh)
        margin = rng.uniform(0.0, 0.2)
        s, _ = resolve_scale(base, tuple(anchor_src), bbox, quad, margin)
        oracle = grid_search_scale(base, tuple(anchor_src), bbox, quad, margin, 0.25, 4.0)
        assert abs(s - oracle) <= 1e-3


def test_resolve_scale_containment_monotone():
    rng = np.random.default_rng(15)
    for _ in range(10):
        base = random_mild_homography(rng)
        anchor = (200.0, 150.0)
        center = apply_homography(base, anchor)
        quad = np.array([
            [center[0] - 90, center[1] - 70],
            [center[0] + 90, center[1] - 70],
            [center[0] + 90, center[1] + 70],
            [center[0] - 90, center[1] + 70],
        ])
        bbox = (170.0, 130.0, 230.0, 170.0)
        pts = np.array([[bbox[0], bbox[1]], [bbox[2], bbox[1]], [bbox[2], bbox[3]], [bbox[0], bbox[3]]])
        centroid = quad.mean(axis=0)

        def inside(s):
            warped = apply_homography_many(scaled_homography(base, anchor, s), pts)
            for i in range(4):
                p0 = quad[i]
                e = quad[(i + 1) % 4] - p0
                rel = warped - p0
                if np.min(e[0] * rel[:, 1] - e[1] * rel[:, 0]) < -1e-9:
                    return False
            return True

        flags = [inside(s) for s in np.linspace(0.25, 4.0, 200)]
        # once containment is lost it stays lost
        seen_false = False
        for f in flags:
            if not f:
                seen_false = True
            elif seen_false:
                pytest.fail("containment predicate was not monotone in s")


def test_resolve_scale_rejects_bad_input():
    with pytest.raises(GeometryError):
        resolve_scale(Homography(np.eye(3)), (0, 0), (10, 10, 10, 20), QUAD_100, 0.0)
    bad_quad = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    with pytest.raises(GeometryError):
        resolve_scale(Homography(np.eye(3)), (0, 0), (0, 0, 1, 1), bad_quad, 0.0)


# ---------------------------------------------------------------- crop

def test_crop_full_frame_identity():
    img = Image(np.zeros((48, 64)))
    out, offset = crop_field_angle(img, 120.0, 640.0)
    assert offset == (0, 0)
    assert out.pixels.shape == (48, 64)


def test_crop_known_width():
    img = Image(np.zeros((480, 640)))
    out, offset = crop_field_angle(img, 53.13, 500.0)
    assert out.width == 500
    assert offset[0] == (640 - 500) // 2


def test_crop_rejects_bad_fov():
    img = Image(np.zeros((8, 8)))
    with pytest.raises(GeometryError):
        crop_field_angle(img, 180.0, 100.0)
    with pytest.raises(GeometryError):
        crop_field_angle(img, 60.0, 0.0)


# ---------------------------------------------------------------- text format

def test_homography_text_round_trip():
    rng = np.random.default_rng(16)
    h = random_mild_homography(rng)
    back = homography_from_text(homography_to_text(h))
    assert np.array_equal(back.m, h.m)


def test_homography_text_rejects_short():
    with pytest.raises(GeometryError):
        homography_from_text("1 0 0 0 1 0 0 0")
