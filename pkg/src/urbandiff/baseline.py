"""Fast-marching inpainting baseline (Telea-style).

Hidden pixels are finalised in order of their arrival distance ``T`` from
the revealed region, computed with the first-order Eikonal update on the
4-neighbourhood. When a pixel is finalised its value is the weighted mean
of every already-known pixel ``q`` within ``radius``, with weight
``dir * dst * lev``:

* ``dir = |(p - q) . N(p)| / |p - q|`` with ``N`` the unit gradient of ``T``
  (floored at 1e-6),
* ``dst = 1 / |p - q|**2``,
* ``lev = 1 / (1 + |T(p) - T(q)|)``.

``use_gradient=True`` adds the first-order extrapolation term
``grad I(q) . (p - q)``; it is off by default because the estimated
gradients compound across wide gaps and the fill diverges.

Filling at finalisation time (rather than on band insertion) means every
contributing neighbour has a smaller or equal arrival distance.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import BaselineError

KNOWN, BAND, UNKNOWN = 0, 1, 2
DEFAULT_RADIUS = 5
_INF = 1e6


@dataclass
class FillFront:
    values: np.ndarray
    distance: np.ndarray
    state: np.ndarray
    order: list


def _solve_eikonal(T, flags, i, j):
    h, w = T.shape

    def nb(a, b):
        if 0 <= a < h and 0 <= b < w and flags[a, b] == KNOWN:
            return T[a, b]
        return _INF

    ty = min(nb(i - 1, j), nb(i + 1, j))
    tx = min(nb(i, j - 1), nb(i, j + 1))
    lo, hi = min(tx, ty), max(tx, ty)
    if hi - lo >= 1.0:
        return lo + 1.0
    return 0.5 * (lo + hi + np.sqrt(2.0 - (hi - lo) ** 2))


def _grad(field, ok, i, j):
    """Central difference on ``ok`` pixels, one-sided at gaps, 0 if isolated."""
    h, w = field.shape
    g = []
    for di, dj in ((1, 0), (0, 1)):
        a = (i + di, j + dj)
        b = (i - di, j - dj)
        fa = 0 <= a[0] < h and 0 <= a[1] < w and ok[a]
        fb = 0 <= b[0] < h and 0 <= b[1] < w and ok[b]
        if fa and fb:
            g.append(0.5 * (field[a] - field[b]))
        elif fa:
            g.append(field[a] - field[i, j])
        elif fb:
            g.append(field[i, j] - field[b])
        else:
            g.append(0.0)
    return g


def fmm_fill(observed, mask, radius: int = DEFAULT_RADIUS, use_gradient: bool = False) -> FillFront:
    img = np.array(observed, dtype=np.float64)
    known0 = np.asarray(mask) != 0
    if img.shape != known0.shape:
        raise BaselineError("observed and mask shapes differ")
    if not known0.any():
        raise BaselineError("no revealed pixels to propagate from")
    h, w = img.shape
    flags = np.where(known0, KNOWN, UNKNOWN).astype(np.int8)
    T = np.where(known0, 0.0, _INF)

    # precomputed neighbourhood offsets within the radius
    r = int(radius)
    oy, ox = np.mgrid[-r : r + 1, -r : r + 1]
    keep = (oy**2 + ox**2 <= r * r) & ((oy != 0) | (ox != 0))
    oy, ox = oy[keep], ox[keep]
    odist2 = (oy**2 + ox**2).astype(np.float64)

    # gradients of known pixels, refreshed as pixels are filled
    gy = np.zeros_like(img)
    gx = np.zeros_like(img)
    if use_gradient:
        for i, j in zip(*np.nonzero(known0)):
            gy[i, j], gx[i, j] = _grad(img, known0, i, j)

    heap = []
    for i, j in zip(*np.nonzero(~known0)):
        for a, b in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            if 0 <= a < h and 0 <= b < w and known0[a, b]:
                flags[i, j] = BAND
                T[i, j] = _solve_eikonal(T, flags, i, j)
                heapq.heappush(heap, (T[i, j], i, j))
                break

    order = []
    known = known0.copy()
    while heap:
        t, i, j = heapq.heappop(heap)
        if flags[i, j] == KNOWN or t > T[i, j]:
            continue

        ny, nx = _grad(T, known, i, j)
        nrm = np.hypot(ny, nx)
        ny, nx = (ny / nrm, nx / nrm) if nrm > 0 else (0.0, 0.0)

        qy, qx = i + oy, j + ox
        inside = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
        qy, qx, dy, dx, d2 = qy[inside], qx[inside], -oy[inside], -ox[inside], odist2[inside]
        sel = known[qy, qx]
        qy, qx, dy, dx, d2 = qy[sel], qx[sel], dy[sel], dx[sel], d2[sel]
        dist = np.sqrt(d2)
        dirw = np.maximum(np.abs(dy * ny + dx * nx) / dist, 1e-6)
        lev = 1.0 / (1.0 + np.abs(T[i, j] - T[qy, qx]))
        wgt = dirw * lev / d2
        est = img[qy, qx]
        if use_gradient:
            est = est + gy[qy, qx] * dy + gx[qy, qx] * dx
        # offsets from a reference neighbour keep constant fields bit-exact
        ref = est[np.argmax(wgt)]
        img[i, j] = float(ref + np.sum(wgt * (est - ref)) / np.sum(wgt))

        flags[i, j] = KNOWN
        known[i, j] = True
        order.append((i, j))
        if use_gradient:
            gy[i, j], gx[i, j] = _grad(img, known, i, j)

        for a, b in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            if 0 <= a < h and 0 <= b < w and flags[a, b] != KNOWN:
                t_new = _solve_eikonal(T, flags, a, b)
                if t_new < T[a, b]:
                    T[a, b] = t_new
                    flags[a, b] = BAND
                    heapq.heappush(heap, (t_new, a, b))

    img[known0] = np.asarray(observed, dtype=np.float64)[known0]
    return FillFront(img, T, flags, order)


def inpaint_fmm(observed, mask, radius: int = DEFAULT_RADIUS) -> np.ndarray:
    """Fill hidden pixels (``mask == 0``); revealed pixels are returned unchanged."""
    return fmm_fill(observed, mask, radius).values
