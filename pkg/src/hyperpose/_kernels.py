"""Hot inner loops, compiled with numba when available.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
fallback with the same signature and semantics.  The numba path is used
unless ``HYPERPOSE_DISABLE_NUMBA`` is set to a truthy value or numba cannot
be imported.  Both variants are always importable (``*_numpy`` / ``*_numba``)
so tests and ``benchmarks/bench_kernels.py`` can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _env_disabled() -> bool:
    return os.environ.get("HYPERPOSE_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = HAVE_NUMBA and not _env_disabled()


# ---------------------------------------------------------------------------
# im2col / col2im for conv2d.  Column layout: (N, C, k, k, H_out, W_out).


def im2col_numpy(xp: np.ndarray, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (h_out - 1) * stride + 1 : stride, : (w_out - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, k, k) -> (N, C, k, k, Ho, Wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))


def col2im_numpy(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    n, c, k, _, h_out, w_out = cols.shape
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        hi = i + stride * (h_out - 1) + 1
        for j in range(k):
            wj = j + stride * (w_out - 1) + 1
            out[:, :, i:hi:stride, j:wj:stride] += cols[:, :, i, j]
    return out


@njit(cache=True)
def im2col_numba(xp, k, stride, h_out, w_out):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c, k, k, h_out, w_out), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    for y in range(h_out):
                        row = y * stride + i
                        for x in range(w_out):
                            cols[b, ch, i, j, y, x] = xp[b, ch, row, x * stride + j]
    return cols


@njit(cache=True)
def col2im_numba(cols, hp, wp, stride):
    n, c, k = cols.shape[0], cols.shape[1], cols.shape[2]
    h_out, w_out = cols.shape[4], cols.shape[5]
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    # Same accumulation order as the numpy fallback: kernel offset outermost.
    for i in range(k):
        for j in range(k):
            for b in range(n):
                for ch in range(c):
                    for y in range(h_out):
                        row = y * stride + i
                        for x in range(w_out):
                            out[b, ch, row, x * stride + j] += cols[b, ch, i, j, y, x]
    return out


# ---------------------------------------------------------------------------
# Gaussian splatting for the synthetic renderer.
#   centers: (K, 2) pixel coords (u, v); sigmas: (K,); colors: (K, 3)
#   Each blob touches pixels within ``cutoff`` sigmas of its center.


def splat_numpy(centers, sigmas, colors, size, cutoff):
    img = np.zeros((3, size, size), dtype=np.float64)
    ys = np.arange(size, dtype=np.float64)[:, None]
    xs = np.arange(size, dtype=np.float64)[None, :]
    for b in range(centers.shape[0]):
        u, v, s = centers[b, 0], centers[b, 1], sigmas[b]
        d2 = (xs - u) ** 2 + (ys - v) ** 2
        w = np.exp(-d2 / (2.0 * s * s))
        w[d2 > (cutoff * s) ** 2] = 0.0
        img += colors[b][:, None, None] * w[None]
    return img


@njit(cache=True)
def splat_numba(centers, sigmas, colors, size, cutoff):
    img = np.zeros((3, size, size), dtype=np.float64)
    for b in range(centers.shape[0]):
        u, v, s = centers[b, 0], centers[b, 1], sigmas[b]
        reach = cutoff * s
        x0 = max(0, int(np.floor(u - reach)))
        x1 = min(size - 1, int(np.ceil(u + reach)))
        y0 = max(0, int(np.floor(v - reach)))
        y1 = min(size - 1, int(np.ceil(v + reach)))
        lim = reach * reach
        inv = 1.0 / (2.0 * s * s)
        for y in range(y0, y1 + 1):
            dy = y - v
            for x in range(x0, x1 + 1):
                dx = x - u
                d2 = dx * dx + dy * dy
                if d2 > lim:
                    continue
                w = np.exp(-d2 * inv)
                for ch in range(3):
                    img[ch, y, x] += colors[b, ch] * w
    return img


# ---------------------------------------------------------------------------
# Nearest-centroid assignment for k-means.  Ties go to the lowest index.


def assign_numpy(points, centroids):
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels.astype(np.int64), d2[np.arange(points.shape[0]), labels]


@njit(cache=True)
def assign_numba(points, centroids):
    n, d = points.shape
    k = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    best_d = np.empty(n, dtype=np.float64)
    for i in range(n):
        best = np.inf
        arg = 0
        for c in range(k):
            acc = 0.0
            for j in range(d):
                t = points[i, j] - centroids[c, j]
                acc += t * t
            if acc < best:
                best = acc
                arg = c
        labels[i] = arg
        best_d[i] = best
    return labels, best_d


# ---------------------------------------------------------------------------
# Dispatch


def im2col(xp, k, stride, h_out, w_out):
    if USE_NUMBA:
        return im2col_numba(np.ascontiguousarray(xp), k, stride, h_out, w_out)
    return im2col_numpy(xp, k, stride, h_out, w_out)


def col2im(cols, hp, wp, stride):
    if USE_NUMBA:
        return col2im_numba(np.ascontiguousarray(cols), hp, wp, stride)
    return col2im_numpy(cols, hp, wp, stride)


def splat(centers, sigmas, colors, size, cutoff=3.0):
    centers = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 2)
    sigmas = np.ascontiguousarray(sigmas, dtype=np.float64).reshape(-1)
    colors = np.ascontiguousarray(colors, dtype=np.float64).reshape(-1, 3)
    if USE_NUMBA:
        return splat_numba(centers, sigmas, colors, int(size), float(cutoff))
    return splat_numpy(centers, sigmas, colors, int(size), float(cutoff))


def assign(points, centroids):
    points = np.ascontiguousarray(points, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    if USE_NUMBA:
        return assign_numba(points, centroids)
    return assign_numpy(points, centroids)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
