"""Acceptance suite: one test per criterion, at the stated tolerances.

Each test prints a single `criterion N (<name>): PASS/FAIL` line with the
measured numbers (run pytest with -s to see them live). The detection
corpus (criteria 4 and 6) is 100 seeded 640x480 scenes of 5 frames with
per-seed noise sigma in [0, 0.02], blur sigma in {0, 1/3, 2/3, 1} and
drifting, slowly tilting quads; it is generated once per module.
"""

import math
import time

import numpy as np
import pytest

from mirrorcast.cli import main as cli_main
from mirrorcast.compose import compose_frame
from mirrorcast.geometry import (
    CameraPose,
    Homography,
    Plane3,
    apply_homography,
    apply_homography_many,
    dlt_homography,
    mirror_view_homography,
    plane_basis,
    project_point,
    reflect_camera,
    reflect_point,
    resolve_scale,
    scaled_homography,
)
from mirrorcast.image import (
    Image,
    Kernel,
    convolve2d,
    gaussian_filter,
    gaussian_kernel,
    integral_images,
    median_filter,
    rect_sum,
)
from mirrorcast.markers import DetectionParams, detect_markers, marker_bank, ncc_score_map
from mirrorcast.media import (
    Config,
    ConfigError,
    QuadMotion,
    parse_config,
    read_ppm,
    synth_feed,
    synth_scene,
    write_ppm,
)
from mirrorcast.tracking import TrackParams, smooth_homography, update_track
from mirrorcast.geometry import quad_to_quad
from mirrorcast.markers import MirrorQuad

FEED_RECT_640 = np.array([[0.0, 0.0], [639.0, 0.0], [639.0, 479.0], [0.0, 479.0]])


def report(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"criterion {num} ({name}): {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_bounded_homography(rng, max_cond=100.0):
    while True:
        m = np.eye(3) + 0.3 * rng.uniform(-1, 1, size=(3, 3))
        m[2, 0:2] = rng.uniform(-1e-3, 1e-3, size=2)
        m[2, 2] = 1.0
        if abs(np.linalg.det(m)) > 1e-3 and np.linalg.cond(m) <= max_cond:
            return Homography(m)


# ================================================================ corpus

@pytest.fixture(scope="module")
def corpus_results():
    bank = marker_bank(31, 4)
    det_params = Config().detection_params()
    compose_cfg = Config().compose_config(bank=bank)

    total_truth = total_hits = matched = 0
    center_errs = []
    corner_errs = []
    outside_ok = True
    detect_seconds = 0.0

    for seed in range(100):
        noise = (seed % 5) * 0.005          # up to 0.02
        blur = (seed % 4) / 3.0             # up to 1.0
        motion = QuadMotion(
            center=(320.0 + (seed % 9) - 4, 240.0 + (seed % 7) - 3),
            half_w=110.0, half_h=80.0,
            drift_amp=(4.0, 3.0), drift_period=80.0,
            tilt_amp=0.02, phase=seed * 0.7,
        )
        frames, records = synth_scene(seed, 5, motion=motion, noise_sigma=noise,
                                      blur_sigma=blur, width=640, height=480)
        feeds, _ = synth_feed(seed + 1000, 5, width=640, height=480)
        tracks = {}
        for k, (img, rec) in enumerate(zip(frames, records)):
            t0 = time.perf_counter()
            hits = detect_markers(img, bank, det_params)
            detect_seconds += time.perf_counter() - t0
            total_hits += len(hits)
            total_truth += 4
            best = {}
            for h in hits:
                if h.class_id not in best or h.score > best[h.class_id].score:
                    best[h.class_id] = h
            for cls in range(4):
                if cls in best:
                    tx, ty = rec.corners[cls]
                    hx, hy = best[cls].center
                    d = math.hypot(hx - tx, hy - ty)
                    if d <= 2.0:
                        matched += 1
                        center_errs.append(d)

            out, _stats = compose_frame(img, feeds[k], tracks, compose_cfg, feeds[0])
            if 0 in tracks and tracks[0].alive:
                est = apply_homography_many(tracks[0].smoothed_h, FEED_RECT_640)
                corner_errs.extend(np.hypot(*(est - rec.corners).T).tolist())
                if seed % 10 == 0:
                    # scene pixels outside the (feathered) mirror polygon stay put
                    changed = np.any(out.pixels != img.pixels, axis=2)
                    ys, xs = np.nonzero(changed)
                    if ys.size:
                        slack = compose_cfg.feather_px * 2 + 2
                        for i in range(4):
                            p0 = est[i]
                            e = est[(i + 1) % 4] - p0
                            norm = math.hypot(e[0], e[1])
                            d = (e[0] * (ys - p0[1]) - e[1] * (xs - p0[0])) / norm
                            if d.min() < -slack:
                                outside_ok = False

    return {
        "recall": matched / total_truth,
        "precision": matched / total_hits if total_hits else 0.0,
        "center_mean": float(np.mean(center_errs)) if center_errs else math.inf,
        "center_max": float(np.max(center_errs)) if center_errs else math.inf,
        "corner_median": float(np.median(corner_errs)) if corner_errs else math.inf,
        "corner_p95": float(np.percentile(corner_errs, 95)) if corner_errs else math.inf,
        "outside_ok": outside_ok,
        "detect_seconds": detect_seconds,
    }


# ================================================================ criteria

def test_criterion_1_homography_recovery():
    rng = np.random.default_rng(100)
    worst = 0.0
    for _ in range(100):
        truth = random_bounded_homography(rng)
        src = rng.uniform(0, 300, size=(12, 2))
        dst = apply_homography_many(truth, src)
        est = dlt_homography(src, dst)
        worst = max(worst, float(np.abs(apply_homography_many(est, src) - dst).max()))
    noiseless_ok = worst < 1e-8

    trial_errs = []
    for _ in range(100):
        truth = random_bounded_homography(rng)
        src = rng.uniform(0, 300, size=(20, 2))
        dst = apply_homography_many(truth, src)
        noisy = dst + rng.normal(0.0, 0.5, size=dst.shape)
        est = dlt_homography(src, noisy)
        err = np.hypot(*(apply_homography_many(est, src) - dst).T)
        trial_errs.append(float(err.mean()))
    median_err = float(np.median(trial_errs))
    noisy_ok = median_err <= 1.0
    report(1, "homography recovery", noiseless_ok and noisy_ok,
           f"noiseless max reproj={worst:.2e} px (<1e-8); "
           f"noisy median err={median_err:.3f} px (<=1.0)")


def test_criterion_2_reflection_and_mirror_view():
    rng = np.random.default_rng(200)
    inv_ok = True
    for _ in range(100):
        n = rng.normal(size=3)
        plane = Plane3(n / np.linalg.norm(n), rng.uniform(-3, 3))
        p = rng.uniform(-5, 5, size=3)
        if np.abs(reflect_point(plane, reflect_point(plane, p)) - p).max() > 1e-12:
            inv_ok = False
        k = np.array([[rng.uniform(400, 800), 0, 320], [0, rng.uniform(400, 800), 240],
                      [0, 0, 1.0]])
        cam = CameraPose(rng.uniform(-3, 3, size=3), random_rotation(rng), k)
        back = reflect_camera(reflect_camera(cam, plane), plane)
        if (np.abs(back.center - cam.center).max() > 1e-12
                or np.abs(back.R - cam.R).max() > 1e-9
                or back.handedness != cam.handedness):
            inv_ok = False

    worst_px = 0.0
    checked = 0
    while checked < 100:
        k = np.array([[rng.uniform(400, 800), 0, rng.uniform(250, 400)],
                      [0, rng.uniform(400, 800), rng.uniform(180, 300)],
                      [0, 0, 1.0]])
        cam = CameraPose(rng.uniform(-3, 3, size=3), random_rotation(rng), k)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        plane = Plane3(n, rng.uniform(-2, 2))
        if abs(plane.n @ cam.center + plane.d) < 0.5:
            continue
        h, flipped = mirror_view_homography(cam, plane)
        assert flipped
        origin, e1, e2 = plane_basis(plane)
        virt = reflect_camera(cam, plane)
        good = 0
        for _ in range(60):
            u, v = rng.uniform(-2, 2, size=2)
            q = origin + u * e1 + v * e2
            dr = (cam.world_to_camera() @ (q - cam.center))[2]
            dv = (virt.world_to_camera() @ (q - virt.center))[2]
            if abs(dr) < 0.3 or abs(dv) < 0.3:
                continue
            real_px = project_point(cam, q)
            virt_px = project_point(virt, q)
            if max(map(abs, real_px + virt_px)) > 1e5:
                continue
            mapped = apply_homography(h, virt_px)
            worst_px = max(worst_px, math.hypot(mapped[0] - real_px[0],
                                                mapped[1] - real_px[1]))
            good += 1
            if good >= 3:
                break
        if good:
            checked += 1
    view_ok = worst_px <= 1e-6
    report(2, "reflection and mirror view", inv_ok and view_ok,
           f"involutions ok={inv_ok}; point consistency worst={worst_px:.2e} px (<=1e-6)")


def test_criterion_3_scaled_homography_ray():
    rng = np.random.default_rng(300)
    worst_spread = 0.0
    for _ in range(100):
        base = random_bounded_homography(rng)
        anchor = tuple(rng.uniform(-20, 20, size=2))
        images = [apply_homography(scaled_homography(base, anchor, s), anchor)
                  for s in (0.5, 1.0, 2.0)]
        spread = max(math.hypot(a[0] - b[0], a[1] - b[1])
                     for a in images for b in images)
        worst_spread = max(worst_spread, spread)
    anchor_ok = worst_spread <= 1e-9

    from test_geometry import grid_search_scale

    worst_gap = 0.0
    done = 0
    while done < 50:
        base = random_bounded_homography(rng)
        anchor_src = rng.uniform(140, 260, size=2)
        half_w, half_h = rng.uniform(60, 140, size=2)
        center = apply_homography(base, anchor_src)
        quad = np.array([
            [center[0] - half_w, center[1] - half_h],
            [center[0] + half_w, center[1] - half_h],
            [center[0] + half_w, center[1] + half_h],
            [center[0] - half_w, center[1] + half_h],
        ]) + rng.uniform(-10, 10, size=(4, 2))
        x, y = quad[:, 0], quad[:, 1]
        if 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) <= 0:
            continue
        bw, bh = rng.uniform(10, 120, size=2)
        bbox = (anchor_src[0] - bw, anchor_src[1] - bh,
                anchor_src[0] + bw, anchor_src[1] + bh)
        margin = rng.uniform(0.0, 0.2)
        s, _ = resolve_scale(base, tuple(anchor_src), bbox, quad, margin)
        oracle = grid_search_scale(base, tuple(anchor_src), bbox, quad, margin,
                                   0.25, 4.0, steps=10_000)
        worst_gap = max(worst_gap, abs(s - oracle))
        done += 1
    resolve_ok = worst_gap <= 1e-3
    report(3, "scaled-homography ray", anchor_ok and resolve_ok,
           f"anchor spread={worst_spread:.2e} px (<=1e-9); "
           f"grid-oracle gap={worst_gap:.2e} (<=1e-3 over 50 configs)")


def test_criterion_4_detection_corpus(corpus_results):
    r = corpus_results
    ok = (r["recall"] >= 0.95 and r["precision"] >= 0.95
          and r["center_mean"] <= 1.0 and r["center_max"] <= 2.0
          and r["detect_seconds"] < 300.0)
    report(4, "detection corpus", ok,
           f"recall={r['recall']:.4f} precision={r['precision']:.4f} "
           f"mean err={r['center_mean']:.3f} px max={r['center_max']:.3f} px "
           f"detect time={r['detect_seconds']:.0f}s (<300s)")


def test_criterion_5_filter_oracles():
    from test_image import convolve_oracle, median_oracle
    from test_markers import ncc_map_oracle

    rng = np.random.default_rng(500)
    gauss_worst = 0.0
    for sigma in (0.7, 1.2):
        px = rng.random((48, 48))
        taps = gaussian_kernel(sigma).taps
        sep = gaussian_filter(Image(px), sigma).pixels
        dense = convolve_oracle(px, np.outer(taps, taps))
        gauss_worst = max(gauss_worst, float(np.abs(sep - dense).max()))
    gauss_ok = gauss_worst <= 1e-6

    median_ok = True
    for radius in (1, 2):
        px = rng.random((24, 24))
        if not np.array_equal(median_filter(Image(px), radius).pixels,
                              median_oracle(px, radius)):
            median_ok = False

    tpl = marker_bank(15, 3)[2]
    px = rng.random((64, 64))
    got = ncc_score_map(Image(px), tpl).values
    ncc_worst = float(np.abs(got - ncc_map_oracle(px, tpl.image.pixels)).max())
    ncc_ok = ncc_worst <= 1e-6

    px = rng.random((30, 40))
    s, s2 = integral_images(Image(px))
    integral_worst = 0.0
    for _ in range(100):
        x0, x1 = sorted(rng.integers(0, 41, size=2))
        y0, y1 = sorted(rng.integers(0, 31, size=2))
        integral_worst = max(
            integral_worst,
            abs(rect_sum(s, x0, y0, x1, y1) - px[y0:y1, x0:x1].sum()),
            abs(rect_sum(s2, x0, y0, x1, y1) - (px[y0:y1, x0:x1] ** 2).sum()),
        )
    integral_ok = integral_worst <= 1e-9

    report(5, "filter oracles", gauss_ok and median_ok and ncc_ok and integral_ok,
           f"gauss diff={gauss_worst:.2e} (<=1e-6); median exact={median_ok}; "
           f"ncc diff={ncc_worst:.2e} (<=1e-6); integral diff={integral_worst:.2e} (<=1e-9)")


def test_criterion_6_end_to_end_compositing(corpus_results):
    r = corpus_results
    motion = QuadMotion(center=(320.0, 240.0), half_w=110.0, half_h=80.0,
                        drift_amp=(4.0, 3.0), tilt_amp=0.02)
    frames, _ = synth_scene(7, 2, motion=motion, width=640, height=480)
    feeds, _ = synth_feed(1007, 2, width=640, height=480)
    cfg = Config().compose_config()
    outs = []
    for _ in range(2):
        tracks = {}
        compose_frame(frames[0], feeds[0], tracks, cfg, feeds[0])
        out, _ = compose_frame(frames[1], feeds[1], tracks, cfg, feeds[0])
        outs.append(out.pixels)
    deterministic = bool(np.array_equal(outs[0], outs[1]))

    ok = (r["corner_median"] <= 1.0 and r["corner_p95"] <= 2.5
          and r["outside_ok"] and deterministic)
    report(6, "end-to-end compositing", ok,
           f"corner median={r['corner_median']:.3f} px (<=1.0) "
           f"p95={r['corner_p95']:.3f} px (<=2.5); outside intact={r['outside_ok']}; "
           f"bit-deterministic={deterministic}")


def test_criterion_7_temporal_smoothing():
    alpha = 0.3
    quad_a = np.array([[100.0, 80.0], [220.0, 80.0], [220.0, 170.0], [100.0, 170.0]])
    cur = quad_to_quad(FEED_RECT_640, quad_a)
    prev = quad_to_quad(FEED_RECT_640, quad_a + [40.0, -25.0])
    h = prev
    geo_worst = 0.0
    err0 = np.abs(prev.m - cur.m).max()
    for k in range(1, 21):
        h = smooth_homography(h, cur, alpha)
        want = (1.0 - alpha) ** k * (prev.m - cur.m)
        geo_worst = max(geo_worst, float(np.abs((h.m - cur.m) - want).max()) / err0)
    geo_ok = geo_worst <= 1e-9

    rng = np.random.default_rng(700)
    cfg = TrackParams(alpha=alpha)
    state = None
    raw_track, smooth_track = [], []
    for _ in range(300):
        jitter = rng.uniform(-2.0, 2.0, size=(4, 2))
        quad = MirrorQuad(corners=quad_a + jitter)
        state = update_track(state, quad, quad_to_quad(FEED_RECT_640, quad.corners),
                             None, cfg)
        raw_track.append(quad.corners.copy())
        smooth_track.append(apply_homography_many(state.smoothed_h, FEED_RECT_640))
    var_raw = np.array(raw_track)[50:].var(axis=0).mean()
    var_smooth = np.array(smooth_track)[50:].var(axis=0).mean()
    ratio = var_raw / var_smooth
    jitter_ok = ratio >= 3.0

    cfg15 = TrackParams(alpha=alpha, hold_frames=15)
    quad = MirrorQuad(corners=quad_a)
    state = update_track(None, quad, quad_to_quad(FEED_RECT_640, quad_a), None, cfg15)
    alive_at_15 = dead_at_16 = False
    for k in range(1, 17):
        state = update_track(state, None, None, None, cfg15)
        if k == 15:
            alive_at_15 = state.alive
        if k == 16:
            dead_at_16 = not state.alive
    dropout_ok = alive_at_15 and dead_at_16

    report(7, "temporal smoothing", geo_ok and jitter_ok and dropout_ok,
           f"geometric decay residual={geo_worst:.2e} (<=1e-9); "
           f"jitter variance ratio={ratio:.2f} (>=3); "
           f"holdover boundary exact={dropout_ok}")


def test_criterion_8_real_time(capsys):
    rc = cli_main(["bench", "--width", "640", "--height", "480",
                   "--frames", "300", "--seed", "0"])
    out = capsys.readouterr().out
    assert rc == 0
    fps = float(next(l for l in out.splitlines() if l.startswith("fps=")).split("=")[1])
    ok = fps >= 15.0
    report(8, "real-time throughput", ok,
           f"measured {fps:.1f} fps at 640x480 (desktop target 30, CI floor 15)")


def test_criterion_9_format_conformance(tmp_path):
    rng = np.random.default_rng(900)
    img = Image(rng.integers(0, 256, size=(15, 17, 3)) / 255.0)
    p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
    write_ppm(img, p1)
    write_ppm(read_ppm(p1), p2)
    round_trip_ok = p1.read_bytes() == p2.read_bytes()

    try:
        parse_config("smooth.aplha = 0.3\n")
        unknown_rejected = False
    except ConfigError:
        unknown_rejected = True

    _, records = synth_scene(11, 3, width=640, height=480, feed_dims=(640, 480))
    worst = 0.0
    for rec in records:
        mapped = apply_homography_many(rec.homography, FEED_RECT_640)
        worst = max(worst, float(np.abs(mapped - rec.corners).max()))
    manifest_ok = worst <= 1e-6

    report(9, "format conformance", round_trip_ok and unknown_rejected and manifest_ok,
           f"ppm round-trip byte-identical={round_trip_ok}; "
           f"unknown key rejected={unknown_rejected}; "
           f"manifest self-consistency={worst:.2e} px (<=1e-6)")
