"""Hot loops of the render path.

Each kernel has a numba implementation and a pure numpy twin with identical
semantics. The numba versions are used when numba imports and the
environment variable ``P2S_NUMBA`` is not ``0``; :func:`use_backend` switches
at run time (tests exercise both).
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_backend = "numba" if HAVE_NUMBA and os.environ.get("P2S_NUMBA", "1") != "0" else "numpy"


def backend() -> str:
    return _backend


def use_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not available")
    prev, _backend = _backend, name
    return prev


# ---------------------------------------------------------------------------
# numpy reference implementations

def _compose_np(filtered, beta):
    # sequential accumulation over m, the same order as the compiled loop
    out = filtered[0].copy()
    for m in range(beta.shape[0]):
        out += beta[m] * filtered[m + 1]
    return out


def _warp_np(img, tilt):
    h, w = img.shape
    rows = np.arange(h, dtype=np.float64)[:, None] - tilt[0]
    cols = np.arange(w, dtype=np.float64)[None, :] - tilt[1]
    rows = np.clip(rows, 0.0, h - 1)
    cols = np.clip(cols, 0.0, w - 1)
    r0 = np.minimum(np.floor(rows).astype(np.intp), h - 2 if h > 1 else 0)
    c0 = np.minimum(np.floor(cols).astype(np.intp), w - 2 if w > 1 else 0)
    fr = rows - r0
    fc = cols - c0
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
    return (top * (1 - fr) + bot * fr).astype(img.dtype, copy=False)


def _gather_np(x, psfs):
    h, w = x.shape
    s = psfs.shape[-1]
    r = s // 2
    xp = np.pad(x, r, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(xp, (s, s))
    # y[n] = sum_k h_n[k] x[n - (k - r)]: flip the window to align offsets
    return np.einsum("hwij,hwij->hw", psfs, win[:, :, ::-1, ::-1], optimize=True)


# ---------------------------------------------------------------------------
# compiled implementations

if HAVE_NUMBA:
    @njit(cache=True, fastmath=False)
    def _compose_nb(filtered, beta):
        m_count, h, w = beta.shape
        out = filtered[0].copy()
        for m in range(m_count):
            fm = filtered[m + 1]
            bm = beta[m]
            for i in range(h):
                for j in range(w):
                    out[i, j] += bm[i, j] * fm[i, j]
        return out

    @njit(cache=True)
    def _warp_nb(img, tilt):
        h, w = img.shape
        out = np.empty_like(img)
        rmax = h - 2 if h > 1 else 0
        cmax = w - 2 if w > 1 else 0
        for i in range(h):
            for j in range(w):
                r = min(max(i - tilt[0, i, j], 0.0), h - 1.0)
                c = min(max(j - tilt[1, i, j], 0.0), w - 1.0)
                r0 = min(int(np.floor(r)), rmax)
                c0 = min(int(np.floor(c)), cmax)
                fr = r - r0
                fc = c - c0
                r1 = min(r0 + 1, h - 1)
                c1 = min(c0 + 1, w - 1)
                top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
                bot = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
                out[i, j] = top * (1 - fr) + bot * fr
        return out

    @njit(cache=True)
    def _gather_nb(x, psfs):
        h, w = x.shape
        s = psfs.shape[-1]
        r = s // 2
        out = np.zeros((h, w))
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for a in range(s):
                    ii = min(max(i - (a - r), 0), h - 1)
                    for b in range(s):
                        jj = min(max(j - (b - r), 0), w - 1)
                        acc += psfs[i, j, a, b] * x[ii, jj]
                out[i, j] = acc
        return out


def compose(filtered, beta):
    """``filtered[0] + sum_m beta[m] * filtered[m + 1]`` per pixel."""
    if _backend == "numba":
        return _compose_nb(filtered, beta)
    return _compose_np(filtered, beta)


def warp(img, tilt):
    """Backward bilinear warp ``out[n] = img(n - tilt[n])`` with edge clamping."""
    if _backend == "numba":
        return _warp_nb(img, tilt)
    return _warp_np(img, tilt)


def gather(x, psfs):
    """Spatially varying convolution ``y[n] = sum_k psfs[n][k] x[n - k]`` (edge replicate)."""
    if _backend == "numba":
        return _gather_nb(np.ascontiguousarray(x, dtype=np.float64),
                          np.ascontiguousarray(psfs, dtype=np.float64))
    return _gather_np(np.asarray(x, dtype=np.float64), np.asarray(psfs, dtype=np.float64))
