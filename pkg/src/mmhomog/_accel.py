"""Numpy-side hot kernels with an optional numba backend.

Every kernel exists twice: a ``@njit`` loop version and a vectorised numpy
version with identical semantics. The numba path is used when numba imports
and ``MMHOMOG_DISABLE_NUMBA`` is unset (or ``0``); set it to ``1`` to force
the numpy path. ``benchmarks/bench_kernels.py`` compares the two.

These kernels are not differentiable; the torch code in ``geometry`` and
``warping`` covers the training paths.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("MMHOMOG_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by MMHOMOG_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# four-point DLT


def _normalizer_np(pts):
    # pts: (N, 4, 2) -> (N, 3, 3) similarity moving the centroid to 0 and the
    # mean distance to sqrt(2)
    c = pts.mean(axis=1)
    d = np.sqrt(((pts - c[:, None, :]) ** 2).sum(axis=2)).mean(axis=1)
    s = np.sqrt(2.0) / np.where(d > 0, d, 1.0)
    t = np.zeros((pts.shape[0], 3, 3))
    t[:, 0, 0] = s
    t[:, 1, 1] = s
    t[:, 0, 2] = -s * c[:, 0]
    t[:, 1, 2] = -s * c[:, 1]
    t[:, 2, 2] = 1.0
    return t


def _dlt_batch_numpy(src, dst):
    n = src.shape[0]
    ts = _normalizer_np(src)
    td = _normalizer_np(dst)
    sn = src * ts[:, None, 0, 0:1] + ts[:, None, 0:2, 2]
    dn = dst * td[:, None, 0, 0:1] + td[:, None, 0:2, 2]
    x, y = sn[..., 0], sn[..., 1]
    u, v = dn[..., 0], dn[..., 1]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    rows_u = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y], axis=-1)
    rows_v = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y], axis=-1)
    a = np.stack([rows_u, rows_v], axis=2).reshape(n, 8, 8)
    b = np.stack([u, v], axis=2).reshape(n, 8)
    cond = np.linalg.cond(a)
    ok = np.isfinite(cond) & (cond < 1e12)
    h = np.full((n, 3, 3), np.nan)
    if ok.any():
        sol = np.linalg.solve(a[ok], b[ok][..., None])[..., 0]
        hn = np.concatenate([sol, np.ones((sol.shape[0], 1))], axis=1).reshape(-1, 3, 3)
        hp = np.linalg.inv(td[ok]) @ hn @ ts[ok]
        h[ok] = hp / hp[:, 2:3, 2:3]
    return h, cond


def _project_numpy(h, pts):
    x, y = pts[..., 0], pts[..., 1]
    w = h[:, None, 2, 0] * x + h[:, None, 2, 1] * y + h[:, None, 2, 2]
    px = (h[:, None, 0, 0] * x + h[:, None, 0, 1] * y + h[:, None, 0, 2]) / w
    py = (h[:, None, 1, 0] * x + h[:, None, 1, 1] * y + h[:, None, 1, 2]) / w
    return np.stack([px, py], axis=-1), w


def _sample_numpy(img, m, out_h, out_w):
    c, hh, ww = img.shape
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    den = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
    sx = (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / den
    sy = (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / den
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = np.zeros((c, out_h, out_w))
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < ww) & (yi >= 0) & (yi < hh)
            wgt = np.where(valid, wx * wy, 0.0)
            vals = img[:, np.clip(yi, 0, hh - 1), np.clip(xi, 0, ww - 1)]
            out += vals * wgt
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def _normalizer_nb(pts):
        cx = 0.0
        cy = 0.0
        for k in range(4):
            cx += pts[k, 0]
            cy += pts[k, 1]
        cx /= 4.0
        cy /= 4.0
        d = 0.0
        for k in range(4):
            d += np.sqrt((pts[k, 0] - cx) ** 2 + (pts[k, 1] - cy) ** 2)
        d /= 4.0
        s = np.sqrt(2.0) / d if d > 0 else np.sqrt(2.0)
        t = np.zeros((3, 3))
        t[0, 0] = s
        t[1, 1] = s
        t[0, 2] = -s * cx
        t[1, 2] = -s * cy
        t[2, 2] = 1.0
        return t

    @njit(cache=True)
    def _dlt_batch_numba(src, dst):
        n = src.shape[0]
        h = np.full((n, 3, 3), np.nan)
        cond = np.empty(n)
        a = np.zeros((8, 8))
        b = np.zeros(8)
        sn = np.empty((4, 2))
        dn = np.empty((4, 2))
        for i in range(n):
            ts = _normalizer_nb(src[i])
            td = _normalizer_nb(dst[i])
            for k in range(4):
                sn[k, 0] = ts[0, 0] * src[i, k, 0] + ts[0, 2]
                sn[k, 1] = ts[1, 1] * src[i, k, 1] + ts[1, 2]
                dn[k, 0] = td[0, 0] * dst[i, k, 0] + td[0, 2]
                dn[k, 1] = td[1, 1] * dst[i, k, 1] + td[1, 2]
            a[:] = 0.0
            for k in range(4):
                x = sn[k, 0]
                y = sn[k, 1]
                u = dn[k, 0]
                v = dn[k, 1]
                r = 2 * k
                a[r, 0] = x
                a[r, 1] = y
                a[r, 2] = 1.0
                a[r, 6] = -u * x
                a[r, 7] = -u * y
                a[r + 1, 3] = x
                a[r + 1, 4] = y
                a[r + 1, 5] = 1.0
                a[r + 1, 6] = -v * x
                a[r + 1, 7] = -v * y
                b[r] = u
                b[r + 1] = v
            if not np.all(np.isfinite(a)):
                cond[i] = np.inf
                continue
            c = np.linalg.cond(a)
            cond[i] = c
            if not (c < 1e12):
                continue
            sol = np.linalg.solve(a, b)
            hn = np.ones((3, 3))
            for r in range(8):
                hn[r // 3, r % 3] = sol[r]
            hp = np.linalg.inv(td) @ hn @ ts
            h[i] = hp / hp[2, 2]
        return h, cond

    @njit(cache=True)
    def _project_numba(h, pts):
        n, m = pts.shape[0], pts.shape[1]
        out = np.empty((n, m, 2))
        w = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                x = pts[i, j, 0]
                y = pts[i, j, 1]
                den = h[i, 2, 0] * x + h[i, 2, 1] * y + h[i, 2, 2]
                w[i, j] = den
                out[i, j, 0] = (h[i, 0, 0] * x + h[i, 0, 1] * y + h[i, 0, 2]) / den
                out[i, j, 1] = (h[i, 1, 0] * x + h[i, 1, 1] * y + h[i, 1, 2]) / den
        return out, w

    @njit(cache=True)
    def _sample_numba(img, m, out_h, out_w):
        c, hh, ww = img.shape
        out = np.zeros((c, out_h, out_w))
        for y in range(out_h):
            for x in range(out_w):
                den = m[2, 0] * x + m[2, 1] * y + m[2, 2]
                sx = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / den
                sy = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / den
                fx0 = np.floor(sx)
                fy0 = np.floor(sy)
                fx = sx - fx0
                fy = sy - fy0
                x0 = int(fx0)
                y0 = int(fy0)
                for dy in range(2):
                    yi = y0 + dy
                    if yi < 0 or yi >= hh:
                        continue
                    wy = fy if dy == 1 else 1.0 - fy
                    for dx in range(2):
                        xi = x0 + dx
                        if xi < 0 or xi >= ww:
                            continue
                        wx = fx if dx == 1 else 1.0 - fx
                        wgt = wx * wy
                        for ch in range(c):
                            out[ch, y, x] += img[ch, yi, xi] * wgt
        return out


def dlt_batch(src: np.ndarray, dst: np.ndarray, use_numba: bool | None = None):
    """Solve N four-point homographies. Returns ``(h, cond)``.

    ``h[i]`` is NaN wherever the normalised 8x8 system has condition number
    >= 1e12; callers decide whether that is an error.
    """
    src = np.ascontiguousarray(src, dtype=np.float64)
    dst = np.ascontiguousarray(dst, dtype=np.float64)
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba:
        return _dlt_batch_numba(src, dst)
    return _dlt_batch_numpy(src, dst)


def project(h: np.ndarray, pts: np.ndarray, use_numba: bool | None = None):
    """Apply N homographies (N,3,3) to point sets (N,M,2). Returns ``(points, w)``."""
    h = np.ascontiguousarray(h, dtype=np.float64)
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba:
        return _project_numba(h, pts)
    return _project_numpy(h, pts)


def sample_projective(img: np.ndarray, m: np.ndarray, out_h: int, out_w: int, use_numba: bool | None = None):
    """Bilinear lookup of ``img`` (C,H,W) at ``m @ (x, y, 1)`` for every output pixel.

    Neighbours outside the source grid contribute zero.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    m = np.ascontiguousarray(m, dtype=np.float64)
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba:
        return _sample_numba(img, m, int(out_h), int(out_w))
    return _sample_numpy(img, m, int(out_h), int(out_w))
