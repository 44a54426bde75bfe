"""Reproducible random streams.

Every trajectory draws from its own Philox (counter-based) stream, keyed by
``(seed, stream_index)``.  Standard normals come from the Box-Muller transform
of uniform doubles, so a stream's normals depend only on the key and the
number of values consumed before them.
"""

import numpy as np

_TWO_PI = 2.0 * np.pi


def stream(seed: int, index: int = 0) -> np.random.Generator:
    """Return the generator for stream ``index`` of the 64-bit ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def box_muller(u1, u2):
    """Map two arrays of U[0, 1) draws to two arrays of independent N(0, 1)."""
    r = np.sqrt(-2.0 * np.log1p(-u1))
    return r * np.cos(_TWO_PI * u2), r * np.sin(_TWO_PI * u2)


def normals(gen: np.random.Generator, n_rows: int, width: int) -> np.ndarray:
    """Draw an ``(n_rows, width)`` block of standard normals from ``gen``.

    Each row consumes ``2 * ceil(width / 2)`` uniforms regardless of how the
    rows are batched, so drawing 10 rows then 5 rows gives the same values as
    drawing 15 rows at once.
    """
    half = (width + 1) // 2
    u = gen.random((n_rows, 2 * half))
    z1, z2 = box_muller(u[:, 0::2], u[:, 1::2])
    z = np.empty((n_rows, 2 * half))
    z[:, 0::2] = z1
    z[:, 1::2] = z2
    return z[:, :width]
