"""Counter-based normal variates shared by both integration backends.

A leg of the random Poincare map is identified by a 64 bit key and its noise
at Euler step ``j`` is a pure function of ``(key, j)``.  This makes every leg
reproducible independently of scheduling, and lets the compiled core and the
numpy fallback draw exactly the same numbers.

The generator is the splitmix64 finalizer applied to ``key + (c + 1) * G``
followed by a Box-Muller transform.  The compiled core mirrors these
definitions line for line.
"""

import numpy as np

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
C_STREAM_A = 0xD1B54A32D192ED03
C_STREAM_B = 0x8CB92BA72F3D8DD7
TWO_PI = 6.283185307179586

_G = np.uint64(GOLDEN)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 2.0 ** -53


def mix64_int(x):
    """splitmix64 finalizer on a Python int."""
    x &= MASK
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & MASK
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & MASK
    x ^= x >> 31
    return x


def stream_key(seed, a, b):
    """Key of stream ``(a, b)`` under ``seed``; all three are integers."""
    k = mix64_int((seed & MASK) ^ GOLDEN)
    k = mix64_int(k ^ mix64_int((a & MASK) + C_STREAM_A))
    k = mix64_int(k ^ mix64_int((b & MASK) + C_STREAM_B))
    return k


def stream_keys(seed, a, b):
    """Vectorized :func:`stream_key` over broadcast integer arrays."""
    a, b = np.broadcast_arrays(np.asarray(a), np.asarray(b))
    out = np.empty(a.shape, dtype=np.uint64)
    flat = out.reshape(-1)
    for i, (ai, bi) in enumerate(zip(a.reshape(-1).tolist(), b.reshape(-1).tolist())):
        flat[i] = stream_key(seed, int(ai), int(bi))
    return out


def mix64(x):
    x = x ^ (x >> _S30)
    x = x * _M1
    x = x ^ (x >> _S27)
    x = x * _M2
    return x ^ (x >> _S31)


def uniforms(keys, counter):
    """Open-interval uniforms for an array of keys at one counter value."""
    c = np.uint64((counter + 1) * GOLDEN & MASK)
    x = mix64(keys + c)
    return ((x >> _S11).astype(np.float64) + 0.5) * _INV53


def normals(keys, step, k):
    """Standard normals of shape ``(len(keys), k)`` for Euler step ``step``."""
    npairs = (k + 1) // 2
    out = np.empty((keys.shape[0], 2 * npairs))
    for p in range(npairs):
        c = 2 * (step * npairs + p)
        u1 = uniforms(keys, c)
        u2 = uniforms(keys, c + 1)
        rad = np.sqrt(-2.0 * np.log(u1))
        ang = TWO_PI * u2
        out[:, 2 * p] = rad * np.cos(ang)
        out[:, 2 * p + 1] = rad * np.sin(ang)
    return out[:, :k]
