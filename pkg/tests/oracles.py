"""Slow, independent reference implementations used only by the tests.

Nothing here imports the package: loops over indices, O(L^2) DFT sums and
formulas evaluated in plain Python floats.
"""

from __future__ import annotations

import cmath
import math

import numpy as np


def conv1d_loop(x, w, b=None, stride=1, pad=0):
    x, w = np.asarray(x, float), np.asarray(w, float)
    B, C, L = x.shape
    Co, _, K = w.shape
    xp = np.zeros((B, C, L + 2 * pad))
    xp[:, :, pad : pad + L] = x
    Lo = (L + 2 * pad - K) // stride + 1
    out = np.zeros((B, Co, Lo))
    for n in range(B):
        for o in range(Co):
            for i in range(Lo):
                acc = 0.0 if b is None else float(b[o])
                for c in range(C):
                    for k in range(K):
                        acc += xp[n, c, i * stride + k] * w[o, c, k]
                out[n, o, i] = acc
    return out


def conv2d_loop(x, w, b=None, stride=1, pad=0):
    x, w = np.asarray(x, float), np.asarray(w, float)
    B, C, H, W = x.shape
    Co, _, K, _ = w.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad : pad + H, pad : pad + W] = x
    Ho = (H + 2 * pad - K) // stride + 1
    Wo = (W + 2 * pad - K) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for n in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(C):
                        for ki in range(K):
                            for kj in range(K):
                                acc += xp[n, c, i * stride + ki, j * stride + kj] * w[o, c, ki, kj]
                    out[n, o, i, j] = acc
    return out


def dft_naive(x):
    x = list(np.asarray(x, complex))
    L = len(x)
    return np.array([sum(x[n] * cmath.exp(-2j * math.pi * k * n / L) for n in range(L)) for k in range(L)])


def idft_naive(X):
    X = list(np.asarray(X, complex))
    L = len(X)
    return np.array([sum(X[k] * cmath.exp(2j * math.pi * k * n / L) for k in range(L)) / L for n in range(L)])


def ramp_filter_naive(row, padded_length):
    """Zero-pad, multiply the naive DFT by |frequency| (cycles per sample), invert, crop."""
    L = len(row)
    buf = np.zeros(padded_length)
    buf[:L] = row
    spec = dft_naive(buf)
    freqs = [min(k, padded_length - k) / padded_length for k in range(padded_length)]
    out = idft_naive(spec * np.array(freqs))
    return out.real[:L]


def bilinear_sample(img, r, c):
    """Value at fractional (row, col) with zero outside the grid."""
    n_r, n_c = img.shape
    r0, c0 = math.floor(r), math.floor(c)
    fr, fc = r - r0, c - c0
    total = 0.0
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            if 0 <= rr < n_r and 0 <= cc < n_c and wr * wc != 0:
                total += wr * wc * img[rr, cc]
    return total


def rotate_loop(img, theta, supersample=1):
    """Pull rotation about (N-1)/2 with x = column, y = row offsets from the centre.

    Output (r, c) reads the input at (x cos + y sin, -x sin + y cos),
    averaged over an s x s grid of sub-pixel positions.
    """
    img = np.asarray(img, float)
    n = img.shape[0]
    ctr = (n - 1) / 2
    ct, st = math.cos(theta), math.sin(theta)
    offs = [(k + 0.5) / supersample - 0.5 for k in range(supersample)]
    out = np.zeros_like(img)
    for r in range(n):
        for c in range(n):
            acc = 0.0
            for oy in offs:
                for ox in offs:
                    x, y = c + ox - ctr, r + oy - ctr
                    xs = round(ct * x + st * y + ctr, 9)
                    ys = round(-st * x + ct * y + ctr, 9)
                    acc += bilinear_sample(img, ys, xs)
            out[r, c] = acc / supersample**2
    return out


def radon_loop(img, thetas, supersample=1):
    """Splat projector: transpose of the pull rotation, then column sums.

    For each output pixel p of the pull rotation, every bilinear weight
    w(p -> q) becomes a deposit of w * img[p] into q.
    """
    img = np.asarray(img, float)
    n = img.shape[0]
    ctr = (n - 1) / 2
    offs = [(k + 0.5) / supersample - 0.5 for k in range(supersample)]
    sino = np.zeros((len(thetas), n))
    for v, t in enumerate(thetas):
        ct, st = math.cos(t), math.sin(t)
        splat = np.zeros_like(img)
        for r in range(n):
            for c in range(n):
                if img[r, c] == 0:
                    continue
                for oy in offs:
                    for ox in offs:
                        x, y = c + ox - ctr, r + oy - ctr
                        xs = round(ct * x + st * y + ctr, 9)
                        ys = round(-st * x + ct * y + ctr, 9)
                        r0, c0 = math.floor(ys), math.floor(xs)
                        fr, fc = ys - r0, xs - c0
                        for dr, wr in ((0, 1 - fr), (1, fr)):
                            for dc, wc in ((0, 1 - fc), (1, fc)):
                                rr, cc = r0 + dr, c0 + dc
                                if 0 <= rr < n and 0 <= cc < n:
                                    splat[rr, cc] += wr * wc * img[r, c] / supersample**2
        sino[v] = splat.sum(axis=0)
    return sino


def ssim_global(Y, X, R=1.0, k1=0.01, k2=0.03):
    """SSIM with whole-image means, population variances and covariance, in Python floats."""
    y = [float(v) for v in np.ravel(Y)]
    x = [float(v) for v in np.ravel(X)]
    n = len(y)
    my, mx = sum(y) / n, sum(x) / n
    vy = sum((a - my) ** 2 for a in y) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    cov = sum((a - my) * (b - mx) for a, b in zip(y, x)) / n
    c1, c2 = (k1 * R) ** 2, (k2 * R) ** 2
    return ((2 * my * mx + c1) * (2 * cov + c2)) / ((my * my + mx * mx + c1) * (vy + vx + c2))


def mse_loop(Y, X):
    y, x = np.ravel(Y), np.ravel(X)
    return sum((float(a) - float(b)) ** 2 for a, b in zip(y, x)) / len(y)


def adam_reference(x0, grad_fn, steps, lr, b1, b2, eps):
    """Scalar Adam written out from the update rule."""
    x, m, v = float(x0), 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        x -= lr * mh / (math.sqrt(vh) + eps)
    return x


def disk_image(n, radius, value=1.0):
    ctr = (n - 1) / 2
    rr, cc = np.mgrid[0:n, 0:n]
    return np.where((rr - ctr) ** 2 + (cc - ctr) ** 2 <= radius**2, value, 0.0)
