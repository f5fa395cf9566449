"""Periodic orbits of the deterministic flow and their Floquet multipliers.

With ``sigma = 0`` the return map to Sigma is a smooth map of the chart.  Its
fixed points are the periodic orbits; the monodromy matrix ``U(T)`` solves
the variational equation ``U' = Df(gamma(t)) U``, ``U(0) = I``, along an
orbit, and its eigenvalues are the Floquet multipliers.  One multiplier is
always 1 with eigenvector ``f(gamma(0))``; the orbit is stable when all the
others lie inside the unit circle.

Integration is classical fixed-step RK4; crossings are located by bisection
on the cubic Hermite interpolant of each step, so return times are accurate
to the order of the scheme rather than to the step.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NoConvergence, NoCrossing

STEP = 1e-2
FD_STEP = 1e-6


@dataclass
class PeriodicOrbit:
    """Periodic orbit through ``anchor`` (a state on Sigma).

    Attributes
    ----------
    anchor : ndarray, shape (D,)
    chart_point : ndarray, shape (d,)
        Chart coordinates of the anchor (fixed point of the return map).
    period : float
    samples : ndarray, shape (m, D)
        States along the orbit at the integration steps.
    multipliers : ndarray of complex, optional
    stable : bool, optional
    residual : float
        ``|Pi(x*) - x*|`` at convergence.
    """

    anchor: np.ndarray
    chart_point: np.ndarray
    period: float
    samples: np.ndarray
    residual: float
    multipliers: np.ndarray = None
    stable: bool = None


@dataclass
class Monodromy:
    matrix: np.ndarray
    multipliers: np.ndarray
    trivial_index: int
    trivial_error: float
    alignment_angle: float
    liouville_det: float
    liouville_exp: float
    stable: bool


def _rk4(f, z, h):
    k1 = f(z)
    k2 = f(z + 0.5 * h * k1)
    k3 = f(z + 0.5 * h * k2)
    k4 = f(z + h * k3)
    return z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _hermite(z0, z1, f0, f1, h, s):
    s = s[:, None]
    s2, s3 = s * s, s * s * s
    return ((2 * s3 - 3 * s2 + 1) * z0 + (s3 - 2 * s2 + s) * h * f0
            + (-2 * s3 + 3 * s2) * z1 + (s3 - s2) * h * f1)


def _refine(section, z0, z1, f0, f1, h):
    lo = np.zeros(len(z0))
    hi = np.ones(len(z0))
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        neg = section.signed_distance(_hermite(z0, z1, f0, f1, h, mid)) < 0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    s = 0.5 * (lo + hi)
    return s, _hermite(z0, z1, f0, f1, h, s)


def return_map(model, x, step=STEP, max_time=1e3, keep_path=False):
    """Deterministic return map to Sigma for a batch of chart points.

    Returns ``(x_next, times)`` and, with ``keep_path``, the list of states
    of the first trajectory.

    Raises
    ------
    NoCrossing
        If some trajectory does not return within ``max_time``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = len(x)
    z = model.primary.embed(x)
    phase = np.zeros(n, dtype=int)
    out_x = np.full((n, model.chart_dim), np.nan)
    out_t = np.full(n, np.nan)
    path = [z[0].copy()] if keep_path else None
    j = 0
    while np.any(phase < 2):
        if j * step > max_time:
            raise NoCrossing(f"no return within {max_time}")
        z1 = _rk4(model.drift, z, step)
        f0, f1 = model.drift(z), model.drift(z1)
        for ph, sec in ((0, model.secondary), (1, model.primary)):
            sel = np.flatnonzero(phase == ph)
            if not sel.size:
                continue
            s0 = sec.signed_distance(z[sel])
            s1 = sec.signed_distance(z1[sel])
            hit = (s0 < 0) & (s1 >= 0) & (s1 - s0 < sec.jump_limit())
            idx = sel[hit]
            if ph == 1 and idx.size:
                s, zc = _refine(sec, z[idx], z1[idx], f0[idx], f1[idx], step)
                out_x[idx] = sec.chart(zc)
                out_t[idx] = (j + s) * step
            phase[idx] += 1
        z = z1
        j += 1
        if keep_path and phase[0] < 2:
            path.append(z[0].copy())
    return (out_x, out_t, np.array(path)) if keep_path else (out_x, out_t)


def find_periodic_orbit(model, guess, tol=1e-10, step=STEP, max_iter=50, fd_step=FD_STEP):
    """Fixed point of the deterministic return map by damped Newton.

    The Jacobian of the map is estimated by central differences with step
    ``fd_step``.  Newton converges to unstable fixed points as well.

    Raises
    ------
    NoConvergence
    """
    x = np.atleast_1d(np.asarray(guess, dtype=float)).copy()
    d = len(x)
    eye = np.eye(d)

    def residual(pts):
        px, _ = return_map(model, pts, step)
        return px - pts

    for _ in range(max_iter):
        pts = np.vstack([x[None, :], x + fd_step * eye, x - fd_step * eye])
        F = residual(pts)
        r0 = F[0]
        if np.linalg.norm(r0) <= tol:
            break
        J = ((F[1:d + 1] - F[d + 1:]) / (2 * fd_step)).T
        try:
            dx = np.linalg.solve(J, -r0)
        except np.linalg.LinAlgError as exc:
            raise NoConvergence("singular Newton Jacobian") from exc
        lam = 1.0
        for _ in range(30):
            trial = x + lam * dx
            if np.linalg.norm(residual(trial[None, :])[0]) < np.linalg.norm(r0):
                break
            lam *= 0.5
        x = trial
    else:
        raise NoConvergence(f"no fixed point within {max_iter} Newton steps")
    px, t, path = return_map(model, x[None, :], step, keep_path=True)
    return PeriodicOrbit(model.primary.embed(x), x, float(t[0]), path,
                         float(np.linalg.norm(px[0] - x)))


def monodromy(model, orbit, step=STEP, fd_step=FD_STEP):
    """Monodromy matrix and Floquet multipliers of ``orbit``.

    The orbit and ``U`` are integrated together by RK4 over exactly one
    period (the last step is shortened), with the drift Jacobian taken by
    central differences.  ``trace Df`` is integrated alongside for the
    Liouville check ``det U(T) = exp(int_0^T trace Df)``.
    """
    D = model.dim

    def rhs(y):
        z = y[:D]
        J = model.jacobian(z, fd_step)
        U = y[D:D + D * D].reshape(D, D)
        return np.concatenate([model.f(z), (J @ U).ravel(), [np.trace(J)]])

    y = np.concatenate([orbit.anchor, np.eye(D).ravel(), [0.0]])
    T = orbit.period
    nfull = int(np.floor(T / step))
    for _ in range(nfull):
        y = _rk4(rhs, y, step)
    rest = T - nfull * step
    if rest > 0:
        y = _rk4(rhs, y, rest)
    U = y[D:D + D * D].reshape(D, D)
    vals, vecs = np.linalg.eig(U)
    i = int(np.argmin(np.abs(vals - 1.0)))
    f0 = model.f(orbit.anchor)
    v = np.real_if_close(vecs[:, i])
    cosang = abs(np.vdot(v, f0)) / (np.linalg.norm(v) * np.linalg.norm(f0))
    angle = float(np.arccos(min(1.0, cosang)))
    others = np.delete(vals, i)
    stable = bool(np.all(np.abs(others) < 1.0))
    orbit.multipliers = vals
    orbit.stable = stable
    return Monodromy(U, vals, i, float(abs(vals[i] - 1.0)), angle,
                     float(np.linalg.det(U)), float(np.exp(y[-1])), stable)
