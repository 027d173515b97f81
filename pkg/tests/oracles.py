"""Independent numpy references used by the tests. Nothing here imports the
package's numerics; inputs arrive as plain arrays."""

from __future__ import annotations

import math

import numpy as np


def quat_rot(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def naive_render(mu, scale_raw, quat_raw, opacity_raw, color_raw, R, t, fx, fy, cx, cy, W, H,
                 background=(1.0, 1.0, 1.0), dilation=0.3, z_far=100.0):
    """Per-pixel loop: EWA projection, (depth, index) order, no clamp, no early
    stop, no culling. Returns rgb (H, W, 3), depth (H, W), T_final (H, W), mass (H, W)."""
    mu = np.asarray(mu, dtype=np.float64)
    P = mu.shape[0]
    R = np.asarray(R, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    prims = []
    for i in range(P):
        pc = R @ mu[i] + t
        x, y, z = pc
        if z <= 0.01:
            continue
        J = np.array([[fx / z, 0, -fx * x / z**2], [0, fy / z, -fy * y / z**2]])
        rot = quat_rot(quat_raw[i])
        s = np.exp(scale_raw[i])
        cov3 = rot @ np.diag(s**2) @ rot.T
        cov2 = J @ R @ cov3 @ R.T @ J.T + dilation * np.eye(2)
        prims.append((z, i, np.array([fx * x / z + cx, fy * y / z + cy]), np.linalg.inv(cov2),
                      float(sigmoid(opacity_raw[i])), sigmoid(color_raw[i])))
    prims.sort(key=lambda p: (p[0], p[1]))
    bg = np.asarray(background, dtype=np.float64)
    rgb = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    tfin = np.zeros((H, W))
    mass = np.zeros((H, W))
    for py in range(H):
        for px in range(W):
            T = 1.0
            c = np.zeros(3)
            d = 0.0
            m = 0.0
            for z, _, center, conic, op, col in prims:
                dx = np.array([px, py], dtype=np.float64) - center
                a = op * math.exp(-0.5 * dx @ conic @ dx)
                w = a * T
                c += w * col
                d += w * z
                m += w
                T *= 1 - a
            rgb[py, px] = c + T * bg
            depth[py, px] = d + T * z_far
            tfin[py, px] = T
            mass[py, px] = m
    return rgb, depth, tfin, mass


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_bruteforce(a, b, k1=0.01, k2=0.03):
    """Mean SSIM over every valid 11x11 window and channel, one window at a time."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = gaussian_window()
    H, W, C = a.shape
    c1, c2 = k1**2, k2**2
    vals = []
    for ch in range(C):
        for i in range(H - 10):
            for j in range(W - 10):
                pa = a[i:i + 11, j:j + 11, ch]
                pb = b[i:i + 11, j:j + 11, ch]
                ma, mb = (w * pa).sum(), (w * pb).sum()
                va = (w * (pa - ma) ** 2).sum()
                vb = (w * (pb - mb) ** 2).sum()
                cov = (w * (pa - ma) * (pb - mb)).sum()
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def l1_loops(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    total = 0.0
    for idx in np.ndindex(a.shape):
        total += abs(a[idx] - b[idx])
    return total / a.size


def geo_bruteforce(depth, trans, threshold=0.5):
    """Depth TV over adjacent foreground pairs plus mean squared difference of
    adjacent forward-difference normals, with explicit pixel loops."""
    d = np.asarray(depth, dtype=np.float64)
    fg = np.asarray(trans) < threshold
    H, W = d.shape
    tv_sum, tv_n = 0.0, 0
    for y in range(H):
        for x in range(W):
            if x + 1 < W and fg[y, x] and fg[y, x + 1]:
                tv_sum += abs(d[y, x + 1] - d[y, x])
                tv_n += 1
            if y + 1 < H and fg[y, x] and fg[y + 1, x]:
                tv_sum += abs(d[y + 1, x] - d[y, x])
                tv_n += 1

    def normal(y, x):
        n = np.array([-(d[y, x + 1] - d[y, x]), -(d[y + 1, x] - d[y, x]), 1.0])
        return n / np.linalg.norm(n)

    def valid(y, x):
        return y + 1 < H and x + 1 < W and fg[y, x] and fg[y, x + 1] and fg[y + 1, x]

    n_sum, n_n = 0.0, 0
    for y in range(H):
        for x in range(W):
            if not valid(y, x):
                continue
            if valid(y, x + 1):
                n_sum += float(((normal(y, x + 1) - normal(y, x)) ** 2).sum())
                n_n += 1
            if valid(y + 1, x):
                n_sum += float(((normal(y + 1, x) - normal(y, x)) ** 2).sum())
                n_n += 1
    return (tv_sum / tv_n if tv_n else 0.0) + (n_sum / n_n if n_n else 0.0)


def sc_direct(g, inds, k, tau):
    """-log(exp(sim_k / tau) / sum_i exp(sim_i / tau)) with plain cosines."""
    g = np.asarray(g, dtype=np.float64).ravel()

    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    sims = [cos(g, np.asarray(v, dtype=np.float64).ravel()) for v in inds]
    num = math.exp(sims[k] / tau)
    den = sum(math.exp(s / tau) for s in sims)
    return -math.log(num / den)
