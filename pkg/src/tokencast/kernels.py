"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The public names at the bottom (``nearest_code``, ``im2col``, ``col2im``,
``render_cells``, ``crps_pixels``, ``ensemble_ranks``) are bound to one of
the two implementations at import time according to
:mod:`tokencast.backend`. Both variants of a kernel compute the same
function; the pairs are exercised against each other in the test suite and
timed against each other in ``bench/bench_kernels.py``.

Floating-point caveat: ``render_cells`` calls ``exp`` whose last-ulp
behaviour may differ between numpy and numba, so generated fields are only
guaranteed bit-identical within one backend.
"""

import numpy as np

from tokencast.backend import NUMBA_ENABLED, njit, prange

# ---------------------------------------------------------------------------
# nearest codebook vector (exact, float64, ties -> lowest index)
# ---------------------------------------------------------------------------


def nearest_code_numpy(latents: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook row for each latent row.

    Distances are accumulated in float64 as plain sums of squared
    differences so that ties are exact and ``argmin`` (first minimum)
    resolves them to the lowest index, matching the brute-force scan.
    """
    la = latents.astype(np.float64, copy=False)
    cb = codebook.astype(np.float64, copy=False)
    d2 = ((la[:, None, :] - cb[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1).astype(np.int64)


@njit(cache=True, parallel=True)
def nearest_code_numba(latents, codebook):  # pragma: no cover - numba path
    n, d = latents.shape
    k = codebook.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in prange(n):
        best = 0
        best_d = np.inf
        for j in range(k):
            acc = 0.0
            for c in range(d):
                diff = latents[i, c] - codebook[j, c]
                acc += diff * diff
            if acc < best_d:
                best_d = acc
                best = j
        out[i] = best
    return out


def _nearest_code_numba_entry(latents: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    return nearest_code_numba(
        np.ascontiguousarray(latents, dtype=np.float64),
        np.ascontiguousarray(codebook, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# im2col / col2im for 2-D convolution
#
# Column layout: row index b*Ho*Wo + ho*Wo + wo, column index c*k*k + ki*k + kj.
# col2im accumulates in ascending (ki, kj) order in both variants so the two
# backends produce bit-identical float32 results.
# ---------------------------------------------------------------------------


def _out_hw(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def im2col_numpy(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Gather conv patches of ``x`` (B,C,H,W) into a (B*Ho*Wo, C*k*k) matrix."""
    b, c, h, w = x.shape
    ho, wo = _out_hw(h, w, k, stride, pad)
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * ho * wo, c * k * k)


@njit(cache=True, parallel=True)
def im2col_numba(x, k, stride, pad):  # pragma: no cover - numba path
    b, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.zeros((b * ho * wo, c * k * k), dtype=x.dtype)
    for bi in prange(b):
        for oy in range(ho):
            for ox in range(wo):
                row = bi * ho * wo + oy * wo + ox
                for ci in range(c):
                    for ki in range(k):
                        iy = oy * stride + ki - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kj in range(k):
                            ix = ox * stride + kj - pad
                            if ix < 0 or ix >= w:
                                continue
                            cols[row, ci * k * k + ki * k + kj] = x[bi, ci, iy, ix]
    return cols


def _im2col_numba_entry(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    return im2col_numba(np.ascontiguousarray(x), k, stride, pad)


def col2im_numpy(cols: np.ndarray, xshape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add a (B*Ho*Wo, C*k*k) matrix back onto the input grid."""
    b, c, h, w = xshape
    ho, wo = _out_hw(h, w, k, stride, pad)
    c6 = cols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride] += c6[:, :, ki, kj]
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + w])
    return dxp


@njit(cache=True, parallel=True)
def col2im_numba(cols, b, c, h, w, k, stride, pad):  # pragma: no cover - numba path
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    dx = np.zeros((b, c, h, w), dtype=cols.dtype)
    for bi in prange(b):
        for ci in range(c):
            for ki in range(k):
                for kj in range(k):
                    col = ci * k * k + ki * k + kj
                    for oy in range(ho):
                        iy = oy * stride + ki - pad
                        if iy < 0 or iy >= h:
                            continue
                        base = bi * ho * wo + oy * wo
                        for ox in range(wo):
                            ix = ox * stride + kj - pad
                            if ix < 0 or ix >= w:
                                continue
                            dx[bi, ci, iy, ix] += cols[base + ox, col]
    return dx


def _col2im_numba_entry(cols: np.ndarray, xshape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = xshape
    return col2im_numba(np.ascontiguousarray(cols), b, c, h, w, k, stride, pad)


# ---------------------------------------------------------------------------
# synthetic precipitation cells: pixelwise max of anisotropic Gaussians
#
# cells is a (n, 6) float64 array of rows (cy, cx, qyy, qxy, qxx, peak) where
# q** are the coefficients of the quadratic form of the inverse covariance:
# value = peak * exp(-0.5 * (qyy*dy^2 + 2*qxy*dy*dx + qxx*dx^2)).
# ---------------------------------------------------------------------------


def render_cells_numpy(h: int, w: int, cells: np.ndarray) -> np.ndarray:
    field = np.zeros((h, w), dtype=np.float64)
    if cells.shape[0] == 0:
        return field
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    for row in cells:
        cy, cx, qyy, qxy, qxx, peak = row
        dy = ys - cy
        dx = xs - cx
        quad = qyy * dy * dy + 2.0 * qxy * dy * dx + qxx * dx * dx
        np.maximum(field, peak * np.exp(-0.5 * quad), out=field)
    return field


@njit(cache=True, parallel=True)
def render_cells_numba(h, w, cells):  # pragma: no cover - numba path
    field = np.zeros((h, w), dtype=np.float64)
    n = cells.shape[0]
    for i in range(n):
        cy = cells[i, 0]
        cx = cells[i, 1]
        qyy = cells[i, 2]
        qxy = cells[i, 3]
        qxx = cells[i, 4]
        peak = cells[i, 5]
        for y in prange(h):
            dy = y - cy
            for x in range(w):
                dx = x - cx
                quad = qyy * dy * dy + 2.0 * qxy * dy * dx + qxx * dx * dx
                val = peak * np.exp(-0.5 * quad)
                if val > field[y, x]:
                    field[y, x] = val
    return field


def _render_cells_numba_entry(h: int, w: int, cells: np.ndarray) -> np.ndarray:
    return render_cells_numba(h, w, np.ascontiguousarray(cells, dtype=np.float64))


# ---------------------------------------------------------------------------
# ensemble CRPS per pixel (empirical formula, sorted-member identity)
#
# crps = mean_i |x_i - y| - (1 / n^2) * sum_k (2k - n + 1) * x_(k)
# which equals mean|X - y| - 0.5 * mean|X - X'| over all ordered pairs.
# ---------------------------------------------------------------------------


def crps_pixels_numpy(members: np.ndarray, obs: np.ndarray) -> np.ndarray:
    m = members.astype(np.float64, copy=False)
    y = obs.astype(np.float64, copy=False)
    n = m.shape[0]
    term1 = np.abs(m - y[None, :]).mean(axis=0)
    ms = np.sort(m, axis=0)
    weights = (2.0 * np.arange(n, dtype=np.float64) - n + 1.0) / (n * n)
    term2 = weights @ ms
    return term1 - term2


@njit(cache=True, parallel=True)
def crps_pixels_numba(members, obs):  # pragma: no cover - numba path
    n, p = members.shape
    out = np.empty(p, dtype=np.float64)
    for j in prange(p):
        col = np.empty(n, dtype=np.float64)
        t1 = 0.0
        for i in range(n):
            col[i] = members[i, j]
            t1 += abs(members[i, j] - obs[j])
        t1 /= n
        col.sort()
        t2 = 0.0
        for k in range(n):
            t2 += (2.0 * k - n + 1.0) * col[k]
        out[j] = t1 - t2 / (n * n)
    return out


def _crps_pixels_numba_entry(members: np.ndarray, obs: np.ndarray) -> np.ndarray:
    return crps_pixels_numba(
        np.ascontiguousarray(members, dtype=np.float64),
        np.ascontiguousarray(obs, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# observation rank within an ensemble, ties randomized
#
# rank = (#members strictly below obs) + floor(u * (ties + 1)) with u drawn
# by the caller, one uniform per sample regardless of ties, so the random
# stream does not depend on the data.
# ---------------------------------------------------------------------------


def ensemble_ranks_numpy(members: np.ndarray, obs: np.ndarray, tie_u: np.ndarray) -> np.ndarray:
    below = (members < obs[None, :]).sum(axis=0)
    ties = (members == obs[None, :]).sum(axis=0)
    return (below + np.floor(tie_u * (ties + 1.0))).astype(np.int64)


@njit(cache=True, parallel=True)
def ensemble_ranks_numba(members, obs, tie_u):  # pragma: no cover - numba path
    n, p = members.shape
    out = np.empty(p, dtype=np.int64)
    for j in prange(p):
        below = 0
        ties = 0
        for i in range(n):
            if members[i, j] < obs[j]:
                below += 1
            elif members[i, j] == obs[j]:
                ties += 1
        out[j] = below + int(np.floor(tie_u[j] * (ties + 1.0)))
    return out


def _ensemble_ranks_numba_entry(members: np.ndarray, obs: np.ndarray, tie_u: np.ndarray) -> np.ndarray:
    return ensemble_ranks_numba(
        np.ascontiguousarray(members, dtype=np.float64),
        np.ascontiguousarray(obs, dtype=np.float64),
        np.ascontiguousarray(tie_u, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# backend dispatch
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:
    nearest_code = _nearest_code_numba_entry
    im2col = _im2col_numba_entry
    col2im = _col2im_numba_entry
    render_cells = _render_cells_numba_entry
    crps_pixels = _crps_pixels_numba_entry
    ensemble_ranks = _ensemble_ranks_numba_entry
else:
    nearest_code = nearest_code_numpy
    im2col = im2col_numpy
    col2im = col2im_numpy
    render_cells = render_cells_numpy
    crps_pixels = crps_pixels_numpy
    ensemble_ranks = ensemble_ranks_numpy

KERNEL_PAIRS = {
    "nearest_code": (nearest_code_numpy, _nearest_code_numba_entry),
    "im2col": (im2col_numpy, _im2col_numba_entry),
    "col2im": (col2im_numpy, _col2im_numba_entry),
    "render_cells": (render_cells_numpy, _render_cells_numba_entry),
    "crps_pixels": (crps_pixels_numpy, _crps_pixels_numba_entry),
    "ensemble_ranks": (ensemble_ranks_numpy, _ensemble_ranks_numba_entry),
}
