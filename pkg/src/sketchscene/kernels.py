"""Inner loops that dominate data preparation.

Each kernel has a jitted loop form and a vectorised numpy form with identical
results. :data:`sketchscene._accel.BACKEND` decides which one the public
function calls; both stay importable so tests and the benchmark can compare
them directly.
"""
import math

import numpy as np

from ._accel import HAVE_NUMBA, njit

# ---------------------------------------------------------------------------
# minimum distance between two point sets


@njit
def _min_set_distance_loop(a, b, stop):
    best = np.inf
    stop2 = stop * stop
    for i in range(a.shape[0]):
        ax = a[i, 0]
        ay = a[i, 1]
        az = a[i, 2]
        for j in range(b.shape[0]):
            dx = ax - b[j, 0]
            dy = ay - b[j, 1]
            dz = az - b[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                best = d2
                if best <= stop2:
                    return math.sqrt(best)
    return math.sqrt(best)


def _min_set_distance_numpy(a, b, stop=0.0, chunk=2048):
    best = np.inf
    for s in range(0, a.shape[0], chunk):
        block = a[s:s + chunk]
        d2 = ((block[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        best = min(best, float(d2.min()))
        if best <= stop * stop:
            break
    return math.sqrt(best)


def min_set_distance(a, b, stop=0.0):
    """Smallest euclidean distance between rows of ``a`` and rows of ``b``.

    ``stop`` allows an early exit: once a pair at distance <= ``stop`` is
    found, that distance is returned (it is an upper bound on the true
    minimum, exact when ``stop`` is 0).
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return math.inf
    if HAVE_NUMBA:
        return float(_min_set_distance_loop(a, b, float(stop)))
    return _min_set_distance_numpy(a, b, float(stop))


# ---------------------------------------------------------------------------
# segment rasterisation
#
# Segments come in image-centred coordinates (x right, y up, origin at the
# image centre). Pixels are addressed as col = W/2 + floor(x) and
# row = H/2 - 1 - floor(y), which makes the raster exactly mirror symmetric
# when the segment set is.


def _steps_for(length):
    return int(math.ceil(length * 4.0)) + 1


@njit
def _rasterize_loop(segs, width, height, out):
    hw = width // 2
    hh = height // 2
    for s in range(segs.shape[0]):
        x0 = segs[s, 0]
        y0 = segs[s, 1]
        x1 = segs[s, 2]
        y1 = segs[s, 3]
        dx = x1 - x0
        dy = y1 - y0
        n = int(math.ceil(math.sqrt(dx * dx + dy * dy) * 4.0)) + 1
        for k in range(n + 1):
            t = k / n
            x = x0 + t * dx
            y = y0 + t * dy
            c = hw + int(math.floor(x))
            r = hh - 1 - int(math.floor(y))
            if 0 <= c < width and 0 <= r < height:
                out[r, c] = 1
    return out


def _rasterize_numpy(segs, width, height, out):
    hw = width // 2
    hh = height // 2
    for x0, y0, x1, y1 in segs:
        dx = x1 - x0
        dy = y1 - y0
        n = _steps_for(math.sqrt(dx * dx + dy * dy))
        t = np.arange(n + 1) / n
        x = x0 + t * dx
        y = y0 + t * dy
        c = hw + np.floor(x).astype(np.int64)
        r = hh - 1 - np.floor(y).astype(np.int64)
        ok = (c >= 0) & (c < width) & (r >= 0) & (r < height)
        out[r[ok], c[ok]] = 1
    return out


def rasterize_segments(segs, width, height):
    """Draw 2D segments ``(n, 4)`` = ``x0, y0, x1, y1`` into a binary grid."""
    segs = np.ascontiguousarray(segs, dtype=np.float64).reshape(-1, 4)
    out = np.zeros((height, width), dtype=np.uint8)
    if segs.shape[0] == 0:
        return out
    if HAVE_NUMBA:
        return _rasterize_loop(segs, width, height, out)
    return _rasterize_numpy(segs, width, height, out)
