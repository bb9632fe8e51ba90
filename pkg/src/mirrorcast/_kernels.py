"""Numba-compiled per-pixel kernels.

These are the throughput-critical inner loops (median, separable
correlation, inverse-map warping). All of them write each output pixel
from exactly one thread and run with fastmath disabled, so results are
bit-identical across thread counts and repeated runs.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def median3x3(src, dst):
    # 19-op minimal exchange network for the 9-pixel window, clamp borders.
    h, w = src.shape
    for y in prange(h):
        ym = max(y - 1, 0)
        yp = min(y + 1, h - 1)
        for x in range(w):
            xm = max(x - 1, 0)
            xp = min(x + 1, w - 1)
            p0 = src[ym, xm]; p1 = src[ym, x]; p2 = src[ym, xp]
            p3 = src[y, xm];  p4 = src[y, x];  p5 = src[y, xp]
            p6 = src[yp, xm]; p7 = src[yp, x]; p8 = src[yp, xp]
            a = min(p1, p2); p2 = max(p1, p2); p1 = a
            a = min(p4, p5); p5 = max(p4, p5); p4 = a
            a = min(p7, p8); p8 = max(p7, p8); p7 = a
            a = min(p0, p1); p1 = max(p0, p1); p0 = a
            a = min(p3, p4); p4 = max(p3, p4); p3 = a
            a = min(p6, p7); p7 = max(p6, p7); p6 = a
            a = min(p1, p2); p2 = max(p1, p2); p1 = a
            a = min(p4, p5); p5 = max(p4, p5); p4 = a
            a = min(p7, p8); p8 = max(p7, p8); p7 = a
            p3 = max(p0, p3)
            p5 = min(p5, p8)
            a = min(p4, p7); p7 = max(p4, p7); p4 = a
            p6 = max(p3, p6)
            p4 = max(p1, p4)
            p2 = min(p2, p5)
            p4 = min(p4, p7)
            a = min(p4, p2); p2 = max(p4, p2); p4 = a
            p4 = max(p6, p4)
            dst[y, x] = min(p4, p2)


@njit(cache=True, parallel=True)
def median_box(src, dst, r):
    # Generic odd-window median, insertion sort per window. Used for r >= 2.
    h, w = src.shape
    n = (2 * r + 1) * (2 * r + 1)
    for y in prange(h):
        buf = np.empty(n)
        for x in range(w):
            k = 0
            for dy in range(-r, r + 1):
                yy = min(max(y + dy, 0), h - 1)
                for dx in range(-r, r + 1):
                    xx = min(max(x + dx, 0), w - 1)
                    buf[k] = src[yy, xx]
                    k += 1
            for i in range(1, n):
                v = buf[i]
                j = i - 1
                while j >= 0 and buf[j] > v:
                    buf[j + 1] = buf[j]
                    j -= 1
                buf[j + 1] = v
            dst[y, x] = buf[n // 2]


@njit(cache=True, parallel=True)
def correlate_rows(src, taps, dst):
    # 1-D correlation along x with clamp-to-edge borders.
    h, w = src.shape
    r = taps.size // 2
    for y in prange(h):
        for x in range(w):
            acc = 0.0
            for i in range(taps.size):
                xx = min(max(x + i - r, 0), w - 1)
                acc += taps[i] * src[y, xx]
            dst[y, x] = acc


@njit(cache=True, parallel=True)
def correlate_cols(src, taps, dst):
    # 1-D correlation along y with clamp-to-edge borders.
    h, w = src.shape
    r = taps.size // 2
    for y in prange(h):
        for x in range(w):
            acc = 0.0
            for i in range(taps.size):
                yy = min(max(y + i - r, 0), h - 1)
                acc += taps[i] * src[yy, x]
            dst[y, x] = acc


@njit(cache=True, parallel=True)
def luma(px, out):
    # Same left-to-right association as the scalar definition.
    h, w = out.shape
    for y in prange(h):
        for x in range(w):
            out[y, x] = 0.299 * px[y, x, 0] + 0.587 * px[y, x, 1] + 0.114 * px[y, x, 2]


@njit(cache=True, parallel=True)
def integral_tables(plane, s, s2):
    # Running sums, identical order to sequential cumsum along each axis.
    h, w = plane.shape
    for y in prange(h):
        acc = 0.0
        acc2 = 0.0
        for x in range(w):
            v = plane[y, x]
            acc += v
            acc2 += v * v
            s[y + 1, x + 1] = acc
            s2[y + 1, x + 1] = acc2
    for x in prange(1, w + 1):
        for y in range(1, h):
            s[y + 1, x] += s[y, x]
            s2[y + 1, x] += s2[y, x]


@njit(cache=True)
def correlate_rows_serial(src, taps, dst):
    # Same math as correlate_rows without the thread-pool dispatch cost;
    # identical summation order, so results are bit-equal.
    h, w = src.shape
    r = taps.size // 2
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for i in range(taps.size):
                xx = min(max(x + i - r, 0), w - 1)
                acc += taps[i] * src[y, xx]
            dst[y, x] = acc


@njit(cache=True)
def correlate_cols_serial(src, taps, dst):
    h, w = src.shape
    r = taps.size // 2
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for i in range(taps.size):
                yy = min(max(y + i - r, 0), h - 1)
                acc += taps[i] * src[yy, x]
            dst[y, x] = acc


@njit(cache=True, parallel=True)
def ncc_scores(cross, s_table, s2_table, side, t_norm, out):
    """Fused NCC from the raw correlation and the integral tables.

    out[y, x] is the score for the window whose top-left pixel is (x, y);
    windows with variance below 1e-8 (or a flat template) score 0.
    """
    n = float(side * side)
    vh, vw = out.shape
    if t_norm <= 1e-12:
        for y in prange(vh):
            for x in range(vw):
                out[y, x] = 0.0
        return
    for y in prange(vh):
        for x in range(vw):
            s1 = (
                s_table[y + side, x + side] - s_table[y, x + side]
                - s_table[y + side, x] + s_table[y, x]
            )
            s2 = (
                s2_table[y + side, x + side] - s2_table[y, x + side]
                - s2_table[y + side, x] + s2_table[y, x]
            )
            mean = s1 / n
            var = s2 / n - mean * mean
            if var < 1e-8:
                out[y, x] = 0.0
                continue
            q = s2 - s1 * s1 / n
            if q < 0.0:
                q = 0.0
            v = cross[y, x] / (t_norm * np.sqrt(q))
            if v > 1.0:
                v = 1.0
            elif v < -1.0:
                v = -1.0
            out[y, x] = v


@njit(cache=True, parallel=True)
def harris_verify(plane, cxs, cys, vr_box, vr2, taps, k, floor, out):
    """Per-candidate Harris check: a local max with response >= floor
    within sqrt(vr2) pixels of each (cx, cy).

    Evaluates the same response a full-frame computation would produce:
    Sobel gradients and the Gaussian-weighted structure tensor, with
    positions clamped to the image exactly like clamp-to-edge filtering.
    """
    h, w = plane.shape
    g = taps.size // 2
    half = vr_box + 1       # response needed in a box +/-(vr_box+1)
    pext = half + g         # products needed +/-g beyond that
    bp = 2 * pext + 1
    br = 2 * half + 1
    for ci in prange(cxs.size):
        cx = cxs[ci]
        cy = cys[ci]
        gxx = np.empty((bp, bp))
        gyy = np.empty((bp, bp))
        gxy = np.empty((bp, bp))
        for jy in range(bp):
            y = min(max(cy - pext + jy, 0), h - 1)
            ym = max(y - 1, 0)
            yp = min(y + 1, h - 1)
            for jx in range(bp):
                x = min(max(cx - pext + jx, 0), w - 1)
                xm = max(x - 1, 0)
                xp = min(x + 1, w - 1)
                p00 = plane[ym, xm]; p01 = plane[ym, x]; p02 = plane[ym, xp]
                p10 = plane[y, xm];                      p12 = plane[y, xp]
                p20 = plane[yp, xm]; p21 = plane[yp, x]; p22 = plane[yp, xp]
                gx = (p02 + 2.0 * p12 + p22) - (p00 + 2.0 * p10 + p20)
                gy = (p20 + 2.0 * p21 + p22) - (p00 + 2.0 * p01 + p02)
                gxx[jy, jx] = gx * gx
                gyy[jy, jx] = gy * gy
                gxy[jy, jx] = gx * gy
        # Separable Gaussian over the product patches; only the central
        # br x br region is consumed.
        resp = np.empty((br, br))
        tmp = np.empty((bp, br))
        sm = np.empty((3, br, br))
        for m in range(3):
            src = gxx if m == 0 else (gyy if m == 1 else gxy)
            for jy in range(bp):
                for jx in range(br):
                    acc = 0.0
                    for i in range(taps.size):
                        acc += taps[i] * src[jy, jx + i]
                    tmp[jy, jx] = acc
            for jy in range(br):
                for jx in range(br):
                    acc = 0.0
                    for i in range(taps.size):
                        acc += taps[i] * tmp[jy + i, jx]
                    sm[m, jy, jx] = acc
        for jy in range(br):
            for jx in range(br):
                det = sm[0, jy, jx] * sm[1, jy, jx] - sm[2, jy, jx] * sm[2, jy, jx]
                tr = sm[0, jy, jx] + sm[1, jy, jx]
                resp[jy, jx] = det - k * tr * tr
        ok = False
        for jy in range(1, br - 1):
            dy = float(jy - half)
            for jx in range(1, br - 1):
                dx = float(jx - half)
                if dx * dx + dy * dy > vr2:
                    continue
                v = resp[jy, jx]
                if v < floor:
                    continue
                if (
                    v >= resp[jy - 1, jx - 1] and v >= resp[jy - 1, jx]
                    and v >= resp[jy - 1, jx + 1] and v >= resp[jy, jx - 1]
                    and v >= resp[jy, jx + 1] and v >= resp[jy + 1, jx - 1]
                    and v >= resp[jy + 1, jx] and v >= resp[jy + 1, jx + 1]
                ):
                    ok = True
                    break
            if ok:
                break
        out[ci] = 1 if ok else 0


@njit(cache=True)
def threshold_peaks(score, thresh, out_xy):
    """Above-threshold 3x3 local maxima; returns the count written."""
    h, w = score.shape
    cap = out_xy.shape[0]
    n = 0
    for y in range(h):
        for x in range(w):
            v = score[y, x]
            if v < thresh:
                continue
            ok = True
            for ny in range(max(y - 1, 0), min(y + 2, h)):
                for nx in range(max(x - 1, 0), min(x + 2, w)):
                    if score[ny, nx] > v:
                        ok = False
                        break
                if not ok:
                    break
            if ok and n < cap:
                out_xy[n, 0] = x
                out_xy[n, 1] = y
                n += 1
    return n


@njit(cache=True, parallel=True)
def hough_verify(plane, cxs, cys, r_min, r_max, vote_frac, edge_thresh, vr2, out):
    """Per-candidate gradient-voted circle check on an ROI.

    Matches the standalone Hough transform's semantics: Sobel edges at
    the threshold, +/- gradient-direction votes per radius, a peak needs
    vote_frac * 2 pi r votes and a per-radius 3x3 spatial local max, and
    its center must lie within sqrt(vr2) of the candidate. Edge pixels
    whose Sobel support was cut by the ROI boundary are skipped; they
    are too far away to vote for qualifying centers.
    """
    h, w = plane.shape
    nr = r_max - r_min + 1
    rad = int(np.ceil(np.sqrt(vr2)))
    half = r_max + rad + 3
    for ci in prange(cxs.size):
        cx = cxs[ci]
        cy = cys[ci]
        x0 = max(cx - half, 0)
        x1 = min(cx + half + 1, w)
        y0 = max(cy - half, 0)
        y1 = min(cy + half + 1, h)
        bh = y1 - y0
        bw = x1 - x0
        acc = np.zeros((nr, bh, bw), dtype=np.int32)
        ys_lo = 1 if y0 > 0 else 0
        ys_hi = bh - 1 if y1 < h else bh
        xs_lo = 1 if x0 > 0 else 0
        xs_hi = bw - 1 if x1 < w else bw
        for yy in range(ys_lo, ys_hi):
            iy = y0 + yy
            ym = max(iy - 1, 0)
            yp = min(iy + 1, h - 1)
            for xx in range(xs_lo, xs_hi):
                ix = x0 + xx
                xm = max(ix - 1, 0)
                xp = min(ix + 1, w - 1)
                p00 = plane[ym, xm]; p01 = plane[ym, ix]; p02 = plane[ym, xp]
                p10 = plane[iy, xm];                      p12 = plane[iy, xp]
                p20 = plane[yp, xm]; p21 = plane[yp, ix]; p22 = plane[yp, xp]
                gx = (p02 + 2.0 * p12 + p22) - (p00 + 2.0 * p10 + p20)
                gy = (p20 + 2.0 * p21 + p22) - (p00 + 2.0 * p01 + p02)
                mag = np.hypot(gx, gy)
                if mag < edge_thresh or mag <= 1e-12:
                    continue
                ux = gx / mag
                uy = gy / mag
                for ri in range(nr):
                    r = float(r_min + ri)
                    for s in range(2):
                        sign = 1.0 if s == 0 else -1.0
                        vx = int(np.rint(xx + sign * r * ux))
                        vy = int(np.rint(yy + sign * r * uy))
                        if 0 <= vx < bw and 0 <= vy < bh:
                            acc[ri, vy, vx] += 1
        found = False
        ccx = cx - x0
        ccy = cy - y0
        for ri in range(nr):
            if found:
                break
            need = vote_frac * 2.0 * np.pi * (r_min + ri)
            if need < 1.0:
                need = 1.0
            for vy in range(max(ccy - rad, 0), min(ccy + rad + 1, bh)):
                if found:
                    break
                dy = float(vy - ccy)
                for vx in range(max(ccx - rad, 0), min(ccx + rad + 1, bw)):
                    dx = float(vx - ccx)
                    if dx * dx + dy * dy > vr2:
                        continue
                    v = acc[ri, vy, vx]
                    if v < need:
                        continue
                    ok = True
                    for ny in range(max(vy - 1, 0), min(vy + 2, bh)):
                        for nx in range(max(vx - 1, 0), min(vx + 2, bw)):
                            if acc[ri, ny, nx] > v:
                                ok = False
                                break
                        if not ok:
                            break
                    if ok:
                        found = True
                        break
        out[ci] = 1 if found else 0


@njit(cache=True, parallel=True)
def warp_bilinear(src, hinv, x0, y0, out_img, out_valid):
    """Inverse-map a destination window through hinv and sample bilinearly.

    src is (h, w, c). Destination pixel (x0+i, y0+j) samples the source at
    hinv @ (x, y, 1); samples outside [0, w-1] x [0, h-1] write 0 with
    out_valid 0, inside samples write the blend with out_valid 1.
    """
    sh, sw = src.shape[0], src.shape[1]
    nc = src.shape[2]
    bh, bw = out_valid.shape
    for j in prange(bh):
        yd = float(y0 + j)
        for i in range(bw):
            xd = float(x0 + i)
            wz = hinv[6] * xd + hinv[7] * yd + hinv[8]
            if abs(wz) < 1e-12:
                for c in range(nc):
                    out_img[j, i, c] = 0.0
                out_valid[j, i] = 0.0
                continue
            xs = (hinv[0] * xd + hinv[1] * yd + hinv[2]) / wz
            ys = (hinv[3] * xd + hinv[4] * yd + hinv[5]) / wz
            if xs < 0.0 or ys < 0.0 or xs > sw - 1.0 or ys > sh - 1.0:
                for c in range(nc):
                    out_img[j, i, c] = 0.0
                out_valid[j, i] = 0.0
            else:
                xf = int(np.floor(xs))
                yf = int(np.floor(ys))
                x1 = min(xf + 1, sw - 1)
                y1 = min(yf + 1, sh - 1)
                fx = xs - xf
                fy = ys - yf
                for c in range(nc):
                    top = src[yf, xf, c] * (1.0 - fx) + src[yf, x1, c] * fx
                    bot = src[y1, xf, c] * (1.0 - fx) + src[y1, x1, c] * fx
                    out_img[j, i, c] = top * (1.0 - fy) + bot * fy
                out_valid[j, i] = 1.0
