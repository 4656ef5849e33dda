"""Counter-based normal variates (Philox4x32-10).

Every Gaussian draw is a pure function of ``(seed, stream, path, cell, pair)``,
so ensembles are bitwise reproducible no matter how paths are split across
chunks or workers.

Counter layout (four 32-bit words)::

    c0 = cell index
    c1 = path index
    c2 = stream & 0xffffffff
    c3 = ((stream >> 32) & 0xffff) | (pair << 16)

The key is the 64-bit seed split into two words. Each Philox block yields four
32-bit words, i.e. two 53-bit uniforms and, through Box-Muller, two normals;
``pair`` indexes those pairs when more than two normals are needed per cell.
"""

from __future__ import annotations

import numba
import numpy as np

MASK32 = np.uint64(0xFFFFFFFF)


@numba.njit(cache=True, nogil=True)
def _philox_block(c0, c1, c2, c3, k0, k1):
    m0 = np.uint64(0xD2511F53)
    m1 = np.uint64(0xCD9E8D57)
    w0 = np.uint64(0x9E3779B9)
    w1 = np.uint64(0xBB67AE85)
    mask = np.uint64(0xFFFFFFFF)
    s32 = np.uint64(32)
    for r in range(10):
        if r > 0:
            k0 = (k0 + w0) & mask
            k1 = (k1 + w1) & mask
        p0 = m0 * c0
        p1 = m1 * c2
        hi0 = p0 >> s32
        lo0 = p0 & mask
        hi1 = p1 >> s32
        lo1 = p1 & mask
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@numba.njit(cache=True)
def _philox_many(counters, key):
    out = np.empty_like(counters)
    k0 = key[0]
    k1 = key[1]
    for i in range(counters.shape[0]):
        a, b, c, d = _philox_block(counters[i, 0], counters[i, 1],
                                   counters[i, 2], counters[i, 3], k0, k1)
        out[i, 0] = a
        out[i, 1] = b
        out[i, 2] = c
        out[i, 3] = d
    return out


@numba.njit(cache=True, nogil=True)
def normals_into(k0, k1, stream, path, cell, d, buf):
    """Fill ``buf[:d]`` with the normals of one (stream, path, cell) counter."""
    mask = np.uint64(0xFFFFFFFF)
    s11 = np.uint64(11)
    s32 = np.uint64(32)
    s16 = np.uint64(16)
    inv53 = 1.0 / 9007199254740992.0
    twopi = 2.0 * np.pi
    c0 = np.uint64(cell) & mask
    c1 = np.uint64(path) & mask
    st = np.uint64(stream)
    c2 = st & mask
    hi = (st >> s32) & np.uint64(0xFFFF)
    for q in range((d + 1) // 2):
        c3 = hi | (np.uint64(q) << s16)
        x0, x1, x2, x3 = _philox_block(c0, c1, c2, c3, k0, k1)
        u1 = (float(((x1 << s32) | x0) >> s11) + 1.0) * inv53
        u2 = float(((x3 << s32) | x2) >> s11) * inv53
        rad = np.sqrt(-2.0 * np.log(u1))
        j = 2 * q
        buf[j] = rad * np.cos(twopi * u2)
        if j + 1 < d:
            buf[j + 1] = rad * np.sin(twopi * u2)


@numba.njit(cache=True, nogil=True)
def _normals_kernel(k0, k1, streams, paths, cell, d, out):
    for i in range(paths.shape[0]):
        normals_into(k0, k1, streams[i], paths[i], cell, d, out[i])


def philox4x32(counters, key):
    """Raw Philox4x32-10 blocks.

    Parameters
    ----------
    counters : array_like, shape (m, 4)
        32-bit counter words.
    key : array_like, shape (2,)
        32-bit key words.

    Returns
    -------
    numpy.ndarray of uint64, shape (m, 4), each entry < 2**32.
    """
    ctr = np.ascontiguousarray(np.atleast_2d(counters), dtype=np.uint64) & MASK32
    k = np.asarray(key, dtype=np.uint64) & MASK32
    return _philox_many(ctr, k)


def split_seed(seed):
    seed = int(seed)
    if seed < 0 or seed >= 1 << 64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)


def normals(seed, streams, paths, cell, d):
    """Standard normal draws for one grid cell.

    Parameters
    ----------
    seed : int
        Unsigned 64-bit master seed.
    streams, paths : array_like of int, shape (m,)
        Stream id and path index of every row (broadcast if scalar).
    cell : int
        Grid cell index.
    d : int
        Number of normals per row.

    Returns
    -------
    numpy.ndarray, shape (m, d)
    """
    paths = np.atleast_1d(np.asarray(paths, dtype=np.uint64))
    streams = np.broadcast_to(np.asarray(streams, dtype=np.uint64), paths.shape)
    streams = np.ascontiguousarray(streams)
    k0, k1 = split_seed(seed)
    out = np.empty((paths.shape[0], d))
    _normals_kernel(k0, k1, streams, np.ascontiguousarray(paths), int(cell), int(d), out)
    return out


def restart_stream(t_index, outer_index):
    """Stream id for the inner paths restarted from outer path ``outer_index``
    at knot ``t_index``; injective in both arguments, never equal to stream 0."""
    t_index = np.asarray(t_index, dtype=np.uint64)
    outer_index = np.asarray(outer_index, dtype=np.uint64)
    return ((t_index + np.uint64(1)) << np.uint64(32)) | outer_index
