"""Slow, obviously-correct reference implementations used by the tests."""

import math

import numpy as np


def loop_soft_argmax_2d(hm):
    h, w = hm.shape
    mx = my = 0.0
    for j in range(h):
        for i in range(w):
            mx += hm[j, i] * i
            my += hm[j, i] * j
    return np.array([mx, my])


def loop_soft_argmax_3d(vol):
    d, h, w = vol.shape
    out = np.zeros(3)
    for k in range(d):
        for j in range(h):
            for i in range(w):
                out += vol[k, j, i] * np.array([i, j, k])
    return out


def loop_marginals(vol):
    d, h, w = vol.shape
    xy = np.zeros((h, w))
    zy = np.zeros((h, d))
    xz = np.zeros((d, w))
    for k in range(d):
        for j in range(h):
            for i in range(w):
                v = vol[k, j, i]
                xy[j, i] += v
                zy[j, k] += v
                xz[k, i] += v
    return xy, zy, xz


def loop_gaussian(cx, cy, sigma, h, w):
    g = np.zeros((h, w))
    for j in range(h):
        for i in range(w):
            g[j, i] = math.exp(-((i - cx) ** 2 + (j - cy) ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def loop_kl(p, q):
    total = 0.0
    for a, b in zip(np.ravel(p), np.ravel(q)):
        if a > 0:
            total += a * math.log(a / max(b, 1e-12))
    return total


def loop_jsd(p, q):
    m = 0.5 * (np.asarray(p) + np.asarray(q))
    return 0.5 * loop_kl(p, m) + 0.5 * loop_kl(q, m)


def loop_conv2d(x, weight, bias, stride=1):
    """Direct convolution of a single image ``(C, H, W)`` with zero padding ``k // 2``."""
    cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for r in range(ho):
            for c in range(wo):
                acc = bias[o]
                for ci in range(cin):
                    for a in range(k):
                        for b in range(k):
                            y = r * stride + a - pad
                            xx = c * stride + b - pad
                            if 0 <= y < h and 0 <= xx < w:
                                acc += weight[o, ci, a, b] * x[ci, y, xx]
                out[o, r, c] = acc
    return out


def random_pmf(rng, shape):
    a = rng.random(shape) ** 3
    return a / a.sum()


def loop_mpjpe(pred, gt, idx):
    total = 0.0
    for j in idx:
        total += math.sqrt(sum((pred[j][k] - gt[j][k]) ** 2 for k in range(3)))
    return total / len(idx)


def loop_pck(pred, gt, idx, threshold):
    hits = 0
    for j in idx:
        if math.sqrt(sum((pred[j][k] - gt[j][k]) ** 2 for k in range(3))) < threshold:
            hits += 1
    return 100.0 * hits / len(idx)


def loop_auc(pred, gt, idx, thresholds):
    return sum(loop_pck(pred, gt, idx, t) for t in thresholds) / len(thresholds)


def horn_similarity(x, y):
    """Similarity ``y ~ s R x + t`` via the unit-quaternion method (an eigenproblem, not an SVD)."""
    mx, my = x.mean(0), y.mean(0)
    a, b = x - mx, y - my
    m = a.T @ b
    sxx, sxy, sxz = m[0]
    syx, syy, syz = m[1]
    szx, szy, szz = m[2]
    n = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    vals, vecs = np.linalg.eigh(n)
    q0, qx, qy, qz = vecs[:, -1]
    rot = np.array([
        [q0**2 + qx**2 - qy**2 - qz**2, 2 * (qx * qy - q0 * qz), 2 * (qx * qz + q0 * qy)],
        [2 * (qy * qx + q0 * qz), q0**2 - qx**2 + qy**2 - qz**2, 2 * (qy * qz - q0 * qx)],
        [2 * (qz * qx - q0 * qy), 2 * (qz * qy + q0 * qx), q0**2 - qx**2 - qy**2 + qz**2],
    ])
    scale = vals[-1] / (a**2).sum()
    return scale, rot, my - scale * rot @ mx
