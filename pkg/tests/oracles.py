"""Brute-force reference implementations. Deliberately loop-based and independent of the
vectorised code paths under test."""
from __future__ import annotations

import math

import numpy as np


def _round(x: float) -> int:
    return math.floor(x + 0.5)


def ray_depth(col, row, intr, boxes, pose_t, camera_height, d_max):
    """Depth along the pixel ray by testing every box face and the ground plane."""
    dx = (col - intr.cx) / intr.fx
    dy = (row - intr.cy) / intr.fy
    best = math.inf
    if dy > 0:
        t = (camera_height - pose_t[1]) / dy
        if t > 0:
            best = t
    for box in boxes:
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        # camera -> local: inverse of rotation about y
        def to_local(v):
            return (c * v[0] - s * v[2], v[1], s * v[0] + c * v[2])
        o = to_local((-box.center[0], -box.center[1], -box.center[2]))
        d = to_local((dx, dy, 1.0))
        half = box.size / 2.0
        for axis in range(3):
            if d[axis] == 0:
                continue
            for sign in (-1.0, 1.0):
                t = (sign * half[axis] - o[axis]) / d[axis]
                if t <= 0 or t >= best:
                    continue
                p = [o[k] + t * d[k] for k in range(3)]
                if all(abs(p[k]) <= half[k] + 1e-9 for k in range(3) if k != axis):
                    best = t
    return best if best <= d_max else 0.0


def nearest_fill(sparse):
    """O(N^2) nearest-valid fill; row-major scan keeps the first minimum."""
    h, w = sparse.shape
    valid = [(r, c) for r in range(h) for c in range(w) if sparse[r, c] > 0]
    out = sparse.copy()
    for r in range(h):
        for c in range(w):
            if sparse[r, c] > 0:
                continue
            best, best_d = None, None
            for vr, vc in valid:
                d2 = (vr - r) ** 2 + (vc - c) ** 2
                if best_d is None or d2 < best_d:
                    best, best_d = (vr, vc), d2
            out[r, c] = sparse[best]
    return out


def reproject_accumulate(frames, index, window):
    """Per-point reprojection into frame ``index`` with a dictionary z-buffer."""
    tgt = frames[index]
    intr = tgt.intrinsics
    h, w = tgt.lidar_depth.shape
    zbuf = {}
    lo, hi = max(0, index - window), min(len(frames) - 1, index + window)
    for k in range(lo, hi + 1):
        f = frames[k]
        for r in range(h):
            for c in range(w):
                z = f.lidar_depth[r, c]
                if z <= 0:
                    continue
                if k == index:
                    rr, cc, zz = r, c, z
                else:
                    p = np.array([(c - intr.cx) / intr.fx * z, (r - intr.cy) / intr.fy * z, z])
                    world = f.pose.rotation @ p + f.pose.translation
                    q = tgt.pose.rotation.T @ (world - tgt.pose.translation)
                    if q[2] <= 0:
                        continue
                    cc = _round(intr.fx * q[0] / q[2] + intr.cx)
                    rr = _round(intr.fy * q[1] / q[2] + intr.cy)
                    zz = q[2]
                    if not (0 <= rr < h and 0 <= cc < w):
                        continue
                cur = zbuf.get((rr, cc))
                if cur is None or zz < cur[0] or (zz == cur[0] and k > cur[1]):
                    zbuf[(rr, cc)] = (zz, k)
    out = np.zeros((h, w))
    for (r, c), (z, _) in zbuf.items():
        out[r, c] = z
    return out


def contains(box, p) -> bool:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    v = p - box.center
    local = (c * v[0] - s * v[2], v[1], s * v[0] + c * v[2])
    return all(abs(local[k]) <= box.size[k] / 2.0 for k in range(3))


def assign_box(point, boxes):
    best, best_vol = None, math.inf
    for b, box in enumerate(boxes):
        vol = box.size[0] * box.size[1] * box.size[2]
        if contains(box, point) and vol < best_vol:
            best, best_vol = b, vol
    return best


def confidence_bruteforce(frame, depth_acc, tau, patch_w, patch_h, style="ours"):
    intr = frame.intrinsics
    h, w = depth_acc.shape
    conf = np.zeros((h, w))
    for pt in frame.radar_points:
        x, y, z = pt.position
        if z <= 0:
            continue
        col = _round(intr.fx * x / z + intr.cx)
        row = _round(intr.fy * y / z + intr.cy)
        if not (0 <= col < w and 0 <= row < h):
            continue
        b = assign_box(pt.position, frame.boxes) if style == "ours" else None
        if b is not None:
            x1, y1, x2, y2 = frame.boxes[b].corners2d
            x1, x2 = max(x1, 0), min(x2, w - 1)
            y1, y2 = max(y1, 0), min(y2, h - 1)
            if x2 <= x1 or y2 <= y1:
                x1 = x2 = col
                y1 = y2 = row
        else:
            x1 = max(math.ceil(col - patch_w / 2), 0)
            x2 = min(math.floor(col + patch_w / 2), w - 1)
            y1 = max(math.ceil(row - patch_h / 2), 0)
            y2 = min(math.floor(row + patch_h / 2), h - 1)
        for r in range(y1, y2 + 1):
            for c in range(x1, x2 + 1):
                if depth_acc[r, c] > 0 and abs(depth_acc[r, c] - z) <= tau:
                    conf[r, c] = 1.0
    return conf


def radar_image_bruteforce(frame):
    intr = frame.intrinsics
    h, w = frame.lidar_depth.shape
    grid = np.zeros((h, w, 5))
    for pt in frame.radar_points:
        x, y, z = pt.position
        if z <= 0:
            continue
        col = _round(intr.fx * x / z + intr.cx)
        row = _round(intr.fy * y / z + intr.cy)
        if not (0 <= col < w and 0 <= row < h):
            continue
        if grid[row, col, 4] == 0 or z < grid[row, col, 0]:
            grid[row, col] = (z, pt.vx, pt.vy, pt.rcs, 1.0)
    return grid


def metrics_loop(pred, gt, cap):
    pred, gt = np.ravel(pred), np.ravel(gt)
    keep = [(float(d), float(g)) for d, g in zip(pred, gt) if 0 < g <= cap]
    n = len(keep)
    mae = sum(abs(d - g) for d, g in keep) / n
    rmse = math.sqrt(sum((d - g) ** 2 for d, g in keep) / n)
    absrel = sum(abs(d - g) / g for d, g in keep) / n
    log10 = sum(abs(math.log10(d) - math.log10(g)) for d, g in keep) / n
    rmselog = math.sqrt(sum((math.log10(d) - math.log10(g)) ** 2 for d, g in keep) / n)
    deltas = [sum(1 for d, g in keep if max(d / g, g / d) < 1.25 ** k) / n for k in (1, 2, 3)]
    return dict(mae=mae, rmse=rmse, absrel=absrel, log10=log10, rmselog=rmselog,
                delta1=deltas[0], delta2=deltas[1], delta3=deltas[2], valid_pixel_count=n)


def depth_loss_loop(coarse, final, target, m):
    tc = tf = 0.0
    n = 0
    for c, f, t in zip(np.ravel(coarse), np.ravel(final), np.ravel(target)):
        if t > 0:
            tc += abs(t - c)
            tf += abs(t - f)
            n += 1
    return m * tc / n + tf / n


def smoothness_loop(depth, image):
    """depth: H x W, image: 3 x H x W."""
    h, w = depth.shape
    lum = [[sum(image[ch][r][c] for ch in range(3)) / 3.0 for c in range(w)] for r in range(h)]
    su = sum(abs(depth[r][c + 1] - depth[r][c]) * math.exp(-abs(lum[r][c + 1] - lum[r][c]))
             for r in range(h) for c in range(w - 1)) / (h * (w - 1))
    sv = sum(abs(depth[r + 1][c] - depth[r][c]) * math.exp(-abs(lum[r + 1][c] - lum[r][c]))
             for r in range(h - 1) for c in range(w)) / ((h - 1) * w)
    return su + sv


def bce_loop(pred, target, clamp=1e-7):
    total = 0.0
    vals = list(zip(np.ravel(pred), np.ravel(target)))
    for p, t in vals:
        p = min(max(p, clamp), 1 - clamp)
        total += t * math.log(p) + (1 - t) * math.log(1 - p)
    return -total / len(vals)


def avg_pool_loop(grid, s):
    h, w = grid.shape
    out = np.zeros((h // s, w // s))
    for i in range(h // s):
        for j in range(w // s):
            acc = 0.0
            for a in range(s):
                for b in range(s):
                    acc += grid[i * s + a, j * s + b]
            out[i, j] = acc / (s * s)
    return out


def normalized_conv_loop(x, m, k, bias, eps):
    """Single-channel sparsity-invariant conv with a k x k kernel and zero padding."""
    h, w = x.shape
    r = k.shape[0] // 2
    y = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            num = den = 0.0
            for a in range(-r, r + 1):
                for b in range(-r, r + 1):
                    ii, jj = i + a, j + b
                    if 0 <= ii < h and 0 <= jj < w:
                        num += k[a + r, b + r] * x[ii, jj] * m[ii, jj]
                        den += m[ii, jj]
            y[i, j] = num / (den + eps) + bias
    return y


def cagf_loop(f_r, f_c, conf, scale, p, q):
    """f_r: Cr x h x w, f_c: Cc x h x w, conf: H x W."""
    cr, h, w = f_r.shape
    cc = f_c.shape[0]
    s = 2 ** scale
    out = np.zeros_like(f_c)
    for i in range(h):
        for j in range(w):
            z = sum(p[k] * f_r[k, i, j] for k in range(cr))
            alpha = 1.0 / (1.0 + math.exp(-z))
            chat = sum(conf[i * s + a, j * s + b] for a in range(s) for b in range(s)) / (s * s)
            for d in range(cc):
                beta = sum(q[k, d] * f_r[k, i, j] for k in range(cr))
                out[d, i, j] = alpha * beta * chat + f_c[d, i, j]
    return out
