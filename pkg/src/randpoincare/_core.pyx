# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled return-leg kernels for the radial catalog models.

Mirrors :func:`randpoincare.sde.simulate_legs` and the generator of
:mod:`randpoincare._rng` operation for operation, so results agree with the
numpy fallback up to libm rounding.
"""

from libc.math cimport log, sqrt, cos, sin, floor, fabs, isfinite
from libc.stdint cimport uint64_t, int8_t
import numpy as np

cdef double TWO_PI = 6.283185307179586
cdef double PI = 3.141592653589793
cdef double INV53 = 1.1102230246251565e-16
cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef double MARGIN = 1e-6


cdef inline uint64_t mix64(uint64_t x) noexcept nogil:
    x ^= x >> 30
    x *= 0xBF58476D1CE4E5B9ULL
    x ^= x >> 27
    x *= 0x94D049BB133111EBULL
    x ^= x >> 31
    return x


cdef inline double uniform(uint64_t key, uint64_t c) noexcept nogil:
    cdef uint64_t x = mix64(key + (c + 1) * GOLDEN)
    return (<double>(x >> 11) + 0.5) * INV53


cdef inline double wrap(double s) noexcept nogil:
    return s - TWO_PI * floor((s + 0.5 * TWO_PI) / TWO_PI)


cdef inline double drift_r(double r, const double* roots, int m) noexcept nogil:
    cdef double p = r - roots[0]
    cdef int i
    for i in range(1, m):
        p = p * (r - roots[i])
    return -p


cdef inline int crossing(double r0, double th0, double r1, double th1, double off,
                         double omega, const double* roots, int m, double dt, double tol,
                         double* frac, double* rc) noexcept nogil:
    cdef double s0 = wrap(th0 - off)
    cdef double s1 = wrap(th1 - off)
    cdef double lo, hi, mid, width, fr, fth
    if not (s0 < 0 and s1 >= 0 and s1 - s0 < 0.5 * TWO_PI):
        return 0
    lo = 0.0
    hi = 1.0
    width = 1.0
    while width * dt > tol:
        mid = 0.5 * (lo + hi)
        if wrap((th0 + mid * (th1 - th0)) - off) < 0:
            lo = mid
        else:
            hi = mid
        width *= 0.5
    rc[0] = r0 + hi * (r1 - r0)
    frac[0] = hi
    fr = drift_r(rc[0], roots, m)
    fth = omega
    if fabs(fth) < MARGIN * sqrt(fr * fr + fth * fth):
        return 0
    return 1


cdef int8_t leg(double r, const double* roots, int m, uint64_t key, double omega,
                double c, double tnoise, double dt, double max_time, double r_lo,
                double r_hi, bint killed, double tol, double* out_x,
                double* out_t) noexcept nogil:
    cdef double th = 0.0, r1, th1, u1, u2, rad, ang, z1, z2, fr, rc
    cdef long j = 0
    cdef int phase = 0
    while True:
        if j * dt >= max_time:
            out_t[0] = j * dt
            return 2
        u1 = uniform(key, 2 * j)
        u2 = uniform(key, 2 * j + 1)
        rad = sqrt(-2.0 * log(u1))
        ang = TWO_PI * u2
        z1 = rad * cos(ang)
        z2 = rad * sin(ang)
        r1 = r + drift_r(r, roots, m) * dt + c * z1
        th1 = th + omega * dt + c * (tnoise * z2)
        if not (isfinite(r1) and isfinite(th1)):
            out_t[0] = (j + 1) * dt
            return 3
        if killed and (r1 < r_lo or r1 > r_hi):
            out_t[0] = (j + 1) * dt
            return 1
        if phase == 0:
            if crossing(r, th, r1, th1, PI, omega, roots, m, dt, tol, &fr, &rc):
                phase = 1
        else:
            if crossing(r, th, r1, th1, 0.0, omega, roots, m, dt, tol, &fr, &rc):
                out_x[0] = rc
                out_t[0] = j * dt + fr * dt
                return 0
        r = r1
        th = th1
        j += 1


def radial_legs(double[::1] x0, uint64_t[::1] keys, double[::1] roots, double omega,
                double sigma, double theta_noise, double dt, double max_time,
                double r_lo, double r_hi, bint killed, double tol):
    """Independent one-return legs; returns ``(x, t, status)`` arrays."""
    cdef Py_ssize_t n = x0.shape[0], i
    cdef int m = roots.shape[0]
    x_arr = np.full(n, np.nan)
    t_arr = np.empty(n)
    s_arr = np.empty(n, dtype=np.int8)
    cdef double[::1] xo = x_arr
    cdef double[::1] to = t_arr
    cdef int8_t[::1] so = s_arr
    cdef double c = sigma * sqrt(dt)
    with nogil:
        for i in range(n):
            so[i] = leg(x0[i], &roots[0], m, keys[i], omega, c, theta_noise, dt, max_time,
                        r_lo, r_hi, killed, tol, &xo[i], &to[i])
    return x_arr, t_arr, s_arr


def radial_chain(double x0, uint64_t[::1] keys, double[::1] roots, double omega,
                 double sigma, double theta_noise, double dt, double max_time,
                 double r_lo, double r_hi, bint killed, double tol):
    """Sequential legs of one chain, leg ``n`` using ``keys[n]``.

    Returns the points ``X_0..X_m``, the leg durations and the status of the
    last leg; the chain stops early at the first leg that does not return.
    """
    cdef Py_ssize_t n = keys.shape[0], i
    cdef int m = roots.shape[0]
    x_arr = np.empty(n + 1)
    t_arr = np.empty(n)
    cdef double[::1] xo = x_arr
    cdef double[::1] to = t_arr
    cdef double c = sigma * sqrt(dt)
    cdef int8_t st = 0
    xo[0] = x0
    i = 0
    with nogil:
        while i < n:
            st = leg(xo[i], &roots[0], m, keys[i], omega, c, theta_noise, dt, max_time,
                     r_lo, r_hi, killed, tol, &xo[i + 1], &to[i])
            i += 1
            if st != 0:
                break
    return x_arr[: i + 1], t_arr[:i], int(st)
