"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time.  Set ``SIMFREE_NUMBA=0`` to force
the numpy implementations (useful for debugging and for the benchmark in
``benchmarks/bench_kernels.py``).  Both backends produce bit-identical
results: the RNG kernel is pure integer arithmetic and the outer-product
kernel performs one multiply-add per output element in the same order.
"""

import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    import numba

    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "workqueue"
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("SIMFREE_NUMBA", "1") not in ("0", "false", "no")

PHILOX_M0 = 0xD2511F53
PHILOX_M1 = 0xCD9E8D57
PHILOX_W0 = 0x9E3779B9
PHILOX_W1 = 0xBB67AE85
_MASK32 = 0xFFFFFFFF
_INV53 = 1.0 / 9007199254740992.0


def backend():
    return "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# Philox4x32-10
# --------------------------------------------------------------------------

def philox4x32_np(c0, c1, c2, c3, key0, key1):
    """Vectorised Philox4x32-10 on uint32 counter words (any broadcastable shapes)."""
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK32 for c in (c0, c1, c2, c3))
    c0, c1, c2, c3 = np.broadcast_arrays(c0, c1, c2, c3)
    k0 = np.uint64(key0 & _MASK32)
    k1 = np.uint64(key1 & _MASK32)
    m0 = np.uint64(PHILOX_M0)
    m1 = np.uint64(PHILOX_M1)
    mask = np.uint64(_MASK32)
    sh = np.uint64(32)
    for _ in range(10):
        p0 = m0 * c0
        p1 = m1 * c2
        hi0, lo0 = p0 >> sh, p0 & mask
        hi1, lo1 = p1 >> sh, p1 & mask
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = (k0 + np.uint64(PHILOX_W0)) & mask
        k1 = (k1 + np.uint64(PHILOX_W1)) & mask
    return c0, c1, c2, c3


def _uniform_pairs_np(rows, npairs, c2, c3, key0, key1):
    p = np.arange(npairs, dtype=np.uint64)[None, :]
    r = np.asarray(rows, dtype=np.uint64)[:, None]
    w0, w1, w2, w3 = philox4x32_np(p, r, c2, c3, key0, key1)
    out = np.empty((len(rows), npairs, 2))
    # 53-bit mantissas, shifted half a ulp so values lie in the open interval (0, 1)
    out[..., 0] = ((w0 >> np.uint64(5)) * np.uint64(67108864) + (w1 >> np.uint64(6))).astype(np.float64)
    out[..., 1] = ((w2 >> np.uint64(5)) * np.uint64(67108864) + (w3 >> np.uint64(6))).astype(np.float64)
    out += 0.5
    out *= _INV53
    return out


if _HAVE_NUMBA:

    @numba.njit(cache=True, parallel=True)
    def _uniform_pairs_nb(rows, npairs, c2, c3, key0, key1):  # pragma: no cover - jitted
        n = rows.shape[0]
        out = np.empty((n, npairs, 2))
        for i in numba.prange(n):
            r = np.uint64(rows[i]) & np.uint64(0xFFFFFFFF)
            for p in range(npairs):
                x0 = np.uint64(p)
                x1 = r
                x2 = np.uint64(c2) & np.uint64(0xFFFFFFFF)
                x3 = np.uint64(c3) & np.uint64(0xFFFFFFFF)
                k0 = np.uint64(key0) & np.uint64(0xFFFFFFFF)
                k1 = np.uint64(key1) & np.uint64(0xFFFFFFFF)
                for _ in range(10):
                    p0 = np.uint64(0xD2511F53) * x0
                    p1 = np.uint64(0xCD9E8D57) * x2
                    hi0 = p0 >> np.uint64(32)
                    lo0 = p0 & np.uint64(0xFFFFFFFF)
                    hi1 = p1 >> np.uint64(32)
                    lo1 = p1 & np.uint64(0xFFFFFFFF)
                    y0 = hi1 ^ x1 ^ k0
                    y2 = hi0 ^ x3 ^ k1
                    x0 = y0
                    x1 = lo1
                    x2 = y2
                    x3 = lo0
                    k0 = (k0 + np.uint64(0x9E3779B9)) & np.uint64(0xFFFFFFFF)
                    k1 = (k1 + np.uint64(0xBB67AE85)) & np.uint64(0xFFFFFFFF)
                a = (x0 >> np.uint64(5)) * np.uint64(67108864) + (x1 >> np.uint64(6))
                b = (x2 >> np.uint64(5)) * np.uint64(67108864) + (x3 >> np.uint64(6))
                out[i, p, 0] = (np.float64(a) + 0.5) * (1.0 / 9007199254740992.0)
                out[i, p, 1] = (np.float64(b) + 0.5) * (1.0 / 9007199254740992.0)
        return out

    @numba.njit(cache=True, parallel=True)
    def _accumulate_outer_nb(buf, delta, act):  # pragma: no cover - jitted
        n, m, k = buf.shape
        stride = 0 if act.shape[0] == 1 else 1
        for i in numba.prange(n):
            row = act[i * stride]
            for a in range(m):
                da = delta[i, a]
                for b in range(k):
                    buf[i, a, b] += da * row[b]


def uniform_pairs(rows, npairs, c2, c3, key0, key1):
    """Open-interval uniforms of shape ``(len(rows), npairs, 2)``.

    Entry ``[i, p]`` is a pure function of ``(rows[i], p, c2, c3, key)``, so any
    subset or ordering of rows reproduces the same values.
    """
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    if USE_NUMBA:
        return _uniform_pairs_nb(rows, int(npairs), int(c2), int(c3), int(key0), int(key1))
    return _uniform_pairs_np(rows, npairs, c2, c3, key0, key1)


def accumulate_outer(buf, delta, act):
    """Per-row outer products: ``buf[i] += delta[i] ⊗ act[i]``.

    ``act`` may carry a single row that is shared by every row of ``delta``.
    """
    if USE_NUMBA:
        _accumulate_outer_nb(buf, np.ascontiguousarray(delta), np.ascontiguousarray(act))
    else:
        buf += delta[:, :, None] * act[:, None, :]
