"""Stochastic differential equations, Poincare sections and sample paths.

The state lives in ``R^D``.  Sections are affine hyperplanes
``{z : <n, z> = c}``; for angular coordinates the signed distance may be
wrapped with a period, so that ``theta = 0`` and ``theta = 2 pi`` are the
same section.  A section carries a ``d = D - 1`` dimensional chart
``x = B (z - o)`` used to label crossing points.

The integrator is Euler-Maruyama with a fixed step and counter based noise
(see :mod:`randpoincare._rng`): the noise of step ``j`` of a path with key
``k`` depends only on ``(k, j)``.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import _rng
from .errors import (
    AssumptionViolation,
    NoCrossing,
    NonFiniteState,
    SingularDiffusion,
)

# leg status codes shared with the compiled core
OK, KILLED, TIMEOUT, NONFINITE = 0, 1, 2, 3

TRANSVERSALITY_MARGIN = 1e-6
BISECTION_FRACTION = 1e-3


@dataclass(frozen=True)
class Section:
    """Affine section with an optional periodic signed distance.

    Parameters
    ----------
    normal : ndarray, shape (D,)
        Unit normal; crossings are counted in the direction of ``normal``.
    offset : float
        Level ``c`` of ``<normal, z>``.
    origin : ndarray, shape (D,)
        Chart origin, a point of the section.
    basis : ndarray, shape (d, D)
        Chart directions, orthogonal to ``normal``.
    lo, hi : ndarray, shape (d,)
        Chart box.
    period : float, optional
        Period of the signed distance (e.g. ``2 pi`` for an angle).
    """

    normal: np.ndarray
    offset: float
    origin: np.ndarray
    basis: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    period: float = None

    def __post_init__(self):
        for name in ("normal", "origin", "basis", "lo", "hi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.basis.ndim == 1:
            object.__setattr__(self, "basis", self.basis[None, :])
        if not np.isclose(np.linalg.norm(self.normal), 1.0):
            raise ValueError("section normal must have unit length")
        if np.any(np.abs(self.basis @ self.normal) > 1e-12):
            raise ValueError("chart basis must be orthogonal to the normal")

    @property
    def chart_dim(self):
        return self.basis.shape[0]

    def signed_distance(self, z):
        """Signed distance of states ``z`` (shape (..., D))."""
        s = np.sum(z * self.normal, axis=-1) - self.offset
        if self.period is not None:
            p = self.period
            s = s - p * np.floor((s + 0.5 * p) / p)
        return s

    def chart(self, z):
        """Chart coordinates of states on the section."""
        return (np.asarray(z) - self.origin) @ self.basis.T

    def embed(self, x):
        """State on the section with chart coordinates ``x``."""
        return self.origin + np.asarray(x, dtype=float) @ self.basis

    def jump_limit(self):
        return np.inf if self.period is None else 0.5 * self.period


@dataclass
class SdeModel:
    """Noisy ODE ``dz = f(z) dt + sigma g(z) dW`` with two sections.

    ``drift`` maps an ``(n, D)`` array to ``(n, D)`` and ``diffusion`` maps it
    to ``(n, D, k)``.  ``primary`` is the section Sigma whose crossings define
    the chain; ``secondary`` is Sigma', which must be crossed in between so
    that every leg makes a full turn.  ``confinement`` is ``"recurrent"``
    (the state space is never left) or ``"killed"`` (a leg leaving
    ``[domain_lo, domain_hi]`` is sent to the cemetery).  ``spec`` holds the
    catalog entry the model was built from, if any.
    """

    drift: object
    diffusion: object
    dim: int
    noise_dim: int
    sigma: float
    primary: Section
    secondary: Section
    domain_lo: np.ndarray
    domain_hi: np.ndarray
    confinement: str = "recurrent"
    name: str = "custom"
    spec: dict = field(default=None)

    def __post_init__(self):
        self.domain_lo = np.asarray(self.domain_lo, dtype=float)
        self.domain_hi = np.asarray(self.domain_hi, dtype=float)
        if self.confinement not in ("recurrent", "killed"):
            raise ValueError("confinement must be 'recurrent' or 'killed'")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @property
    def chart_dim(self):
        return self.primary.chart_dim

    def with_sigma(self, sigma):
        spec = None if self.spec is None else dict(self.spec, sigma=float(sigma))
        return replace(self, sigma=float(sigma), spec=spec)

    def f(self, z):
        """Drift at a single state."""
        return self.drift(np.asarray(z, dtype=float)[None, :])[0]

    def diffusion_matrix(self, z):
        """``D(z) = g(z) g(z)^T`` at a batch of states."""
        g = self.diffusion(np.atleast_2d(z))
        return np.einsum("nik,njk->nij", g, g)

    def jacobian(self, z, h=1e-6):
        """Central finite-difference Jacobian of the drift at ``z``."""
        z = np.asarray(z, dtype=float)
        pts = np.repeat(z[None, :], 2 * self.dim, axis=0)
        for i in range(self.dim):
            pts[2 * i, i] += h
            pts[2 * i + 1, i] -= h
        fv = self.drift(pts)
        return ((fv[0::2] - fv[1::2]) / (2 * h)).T

    def outside(self, z):
        return np.any(z < self.domain_lo, axis=-1) | np.any(z > self.domain_hi, axis=-1)


@dataclass
class Path:
    """A discretized trajectory; ``killed`` marks truncation at a domain exit."""

    times: np.ndarray
    states: np.ndarray
    dt: float
    killed: bool = False


@dataclass
class CrossingChain:
    """Successive Sigma-crossings ``X_0, X_1, ...`` in chart coordinates."""

    points: np.ndarray
    crossing_times: np.ndarray
    killed_at: int = None

    def __len__(self):
        return len(self.points)


# ---------------------------------------------------------------------------
# catalog


def radial_potential(roots):
    """Potential ``V`` with ``V'(r) = prod_i (r - a_i)`` and ``V(0) = 0``.

    Returns the callables ``(V, V', V'')``.
    """
    coeffs = np.poly(np.asarray(roots, dtype=float))
    dV = np.poly1d(coeffs)
    V = dV.integ()
    return V, dV, dV.deriv()


def _radial_drift(roots, omega):
    roots = tuple(float(a) for a in roots)

    def drift(z):
        r = z[:, 0]
        p = r - roots[0]
        for a in roots[1:]:
            p = p * (r - a)
        out = np.empty_like(z)
        out[:, 0] = -p
        out[:, 1] = omega
        return out

    return drift


def _polar_diffusion(theta_noise):
    def diffusion(z):
        g = np.zeros((z.shape[0], 2, 2))
        g[:, 0, 0] = 1.0
        g[:, 1, 1] = theta_noise
        return g

    return diffusion


def radial_model(roots, omega=1.0, sigma=0.1, theta_noise=0.1, r_min=0.5, r_max=3.0,
                 confinement="recurrent", secondary_theta=np.pi):
    """Planar model in polar coordinates with circular orbits at ``roots``.

    ``dr = -V'(r) dt + sigma dW_1``, ``dtheta = omega dt + sigma theta_noise dW_2``
    with ``V'(r) = prod (r - a_i)``.  The state is ``(r, theta)`` with theta
    unwrapped.  Sigma is ``theta = 0 (mod 2 pi)``, Sigma' is
    ``theta = secondary_theta`` (default pi), both charted by ``r`` on ``[r_min, r_max]``.  Roots where ``V'' > 0`` are
    stable orbits.
    """
    roots = [float(a) for a in roots]
    if len(roots) == 0:
        raise ValueError("at least one orbit radius is required")
    if omega <= 0:
        raise ValueError("omega must be positive")
    if not 0 < secondary_theta < 2 * np.pi:
        raise ValueError("secondary_theta must lie strictly between 0 and 2 pi")
    lo, hi = np.array([r_min]), np.array([r_max])
    primary = Section(np.array([0.0, 1.0]), 0.0, np.zeros(2), np.array([[1.0, 0.0]]),
                      lo, hi, period=2 * np.pi)
    secondary = Section(np.array([0.0, 1.0]), float(secondary_theta), np.zeros(2), np.array([[1.0, 0.0]]),
                        lo, hi, period=2 * np.pi)
    spec = {"catalog": "radial", "roots": roots, "omega": float(omega), "sigma": float(sigma),
            "theta_noise": float(theta_noise), "r_min": float(r_min), "r_max": float(r_max),
            "confinement": confinement, "secondary_theta": float(secondary_theta)}
    return SdeModel(
        drift=_radial_drift(roots, float(omega)),
        diffusion=_polar_diffusion(float(theta_noise)),
        dim=2, noise_dim=2, sigma=float(sigma),
        primary=primary, secondary=secondary,
        domain_lo=np.array([r_min, -np.inf]), domain_hi=np.array([r_max, np.inf]),
        confinement=confinement, name="radial", spec=spec,
    )


REFERENCE_ROOTS = (1.0, 1.5, 2.2)


def reference_model(omega=1.0, sigma=0.1, theta_noise=0.1, confinement="recurrent"):
    """Two stable orbits at ``r = 1`` and ``r = 2.2`` separated by ``r = 1.5``.

    ``V'(r) = (r - 1)(r - 1.5)(r - 2.2)``, so the escape costs are
    ``2 (V(1.5) - V(1)) = 0.0395833`` from the inner orbit and
    ``2 (V(1.5) - V(2.2)) = 0.0971833`` from the outer one.
    """
    m = radial_model(REFERENCE_ROOTS, omega, sigma, theta_noise, 0.5, 3.0, confinement)
    m.name = "reference"
    m.spec["catalog"] = "reference"
    return m


def model_from_spec(spec):
    """Build a catalog model from its parameter dictionary."""
    spec = dict(spec)
    kind = spec.pop("catalog", None)
    if kind == "reference":
        spec.pop("roots", None)
        spec.pop("r_min", None)
        spec.pop("r_max", None)
        spec.pop("secondary_theta", None)
        return reference_model(**spec)
    if kind == "radial":
        return radial_model(**spec)
    raise ValueError(f"unknown catalog model {kind!r}")


# ---------------------------------------------------------------------------
# integration


def euler_step(model, z, keys, step, dt):
    """One Euler-Maruyama step for a batch of states and stream keys."""
    xi = _rng.normals(keys, step, model.noise_dim)
    noise = np.einsum("nik,nk->ni", model.diffusion(z), xi)
    return z + model.drift(z) * dt + (model.sigma * np.sqrt(dt)) * noise


def _path_key(seed):
    return np.array([_rng.stream_key(seed, 0, (1 << 64) - 1)], dtype=np.uint64)


def integrate_path(model, z0, t_end, dt, seed):
    """Euler-Maruyama path from ``z0`` over ``[0, t_end]``.

    For a killed model the path is truncated at the first state outside the
    domain and flagged ``killed``.

    Raises
    ------
    NonFiniteState
        If the state becomes NaN or infinite.
    """
    if dt <= 0 or t_end < 0:
        raise ValueError("dt must be positive and t_end nonnegative")
    nsteps = int(np.ceil(t_end / dt - 1e-12))
    keys = _path_key(seed)
    states = np.empty((nsteps + 1, model.dim))
    states[0] = z0
    z = states[:1].copy()
    killed = False
    last = nsteps
    for j in range(nsteps):
        z = euler_step(model, z, keys, j, dt)
        if not np.all(np.isfinite(z)):
            raise NonFiniteState(f"non-finite state at step {j + 1}")
        states[j + 1] = z[0]
        if model.confinement == "killed" and model.outside(z)[0]:
            killed, last = True, j + 1
            break
    return Path(np.arange(last + 1) * dt, states[: last + 1], dt, killed)


def _bisect(section, z0, z1, dt, tol):
    """Fraction in (0, 1] of the first sign change of ``section`` on a segment.

    ``z0``/``z1`` are ``(m, D)`` arrays with ``s(z0) < 0 <= s(z1)``.  The
    fraction is refined until it is known to within ``tol / dt``.
    """
    lo = np.zeros(len(z0))
    hi = np.ones(len(z0))
    width = 1.0
    while width * dt > tol:
        mid = 0.5 * (lo + hi)
        s = section.signed_distance(z0 + mid[:, None] * (z1 - z0))
        neg = s < 0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
        width *= 0.5
    return hi


def _events(model, section, z0, z1, dt, tol):
    """Admissible crossings of ``section`` on segments ``z0 -> z1``.

    Returns a boolean mask, the crossing fractions and the crossing states.
    """
    s0 = section.signed_distance(z0)
    s1 = section.signed_distance(z1)
    hit = (s0 < 0) & (s1 >= 0) & (s1 - s0 < section.jump_limit())
    frac = np.ones(len(z0))
    zc = z1.copy()
    idx = np.flatnonzero(hit)
    if idx.size:
        fr = _bisect(section, z0[idx], z1[idx], dt, tol)
        zs = z0[idx] + fr[:, None] * (z1[idx] - z0[idx])
        fv = model.drift(zs)
        along = np.abs(fv @ section.normal)
        ok = along >= TRANSVERSALITY_MARGIN * np.sqrt(np.sum(fv * fv, axis=1))
        hit[idx[~ok]] = False
        frac[idx] = fr
        zc[idx] = zs
    return hit, frac, zc


def detect_crossings(model, path, tol=None):
    """Chain of Sigma-crossings along ``path``, alternating through Sigma'.

    A crossing is a sign change of the section's signed distance in the
    direction of its normal, refined by bisection on the linearly
    interpolated path to ``tol`` in time (default ``dt * 1e-3``), and
    accepted only where the drift is transversal.  A Sigma-crossing counts
    only after a Sigma'-crossing since the previous one.  The first point of
    the chain is the chart coordinate of the path's initial state.

    Raises
    ------
    NoCrossing
        If the path never completes a return.
    """
    tol = path.dt * BISECTION_FRACTION if tol is None else tol
    z = path.states
    x0 = model.primary.chart(z[0])
    a, b = z[:-1], z[1:]
    hp, fp, zp = _events(model, model.primary, a, b, path.dt, tol)
    hs, _, _ = _events(model, model.secondary, a, b, path.dt, tol)
    points, times = [x0], [path.times[0]]
    armed = False
    for j in range(len(a)):
        if armed and hp[j]:
            points.append(model.primary.chart(zp[j]))
            times.append(path.times[j] + fp[j] * path.dt)
            armed = False
        if hs[j]:
            armed = True
    if len(points) == 1:
        raise NoCrossing("path completes no return to the section")
    killed_at = len(points) if path.killed else None
    return CrossingChain(np.array(points), np.array(times), killed_at)


def simulate_legs(model, x0, keys, dt, max_time, tol=None):
    """Vectorized one-return legs: the numpy reference implementation.

    Each leg starts on Sigma at chart point ``x0[i]``, runs until it has
    crossed Sigma' and then Sigma, and reports the chart coordinate and time
    of that Sigma crossing.

    Returns
    -------
    x : ndarray, shape (n, d)
    t : ndarray, shape (n,)
    status : ndarray of int8
        ``OK``, ``KILLED``, ``TIMEOUT`` or ``NONFINITE``.
    """
    tol = dt * BISECTION_FRACTION if tol is None else tol
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n = x0.shape[0]
    z = model.primary.embed(x0)
    out_x = np.full((n, model.chart_dim), np.nan)
    out_t = np.full(n, np.nan)
    status = np.full(n, -1, dtype=np.int8)
    phase = np.zeros(n, dtype=np.int8)
    active = np.arange(n)
    killing = model.confinement == "killed"
    j = 0
    while active.size:
        if j * dt >= max_time:
            status[active] = TIMEOUT
            out_t[active] = j * dt
            break
        za = z[active]
        z1 = euler_step(model, za, keys[active], j, dt)
        t1 = (j + 1) * dt
        done = np.zeros(active.size, dtype=bool)
        bad = ~np.all(np.isfinite(z1), axis=1)
        status[active[bad]] = NONFINITE
        out_t[active[bad]] = t1
        done |= bad
        if killing:
            gone = ~done & model.outside(z1)
            status[active[gone]] = KILLED
            out_t[active[gone]] = t1
            done |= gone
        ph = phase[active]
        wait2 = ~done & (ph == 0)
        if wait2.any():
            sel = np.flatnonzero(wait2)
            hit, _, _ = _events(model, model.secondary, za[sel], z1[sel], dt, tol)
            phase[active[sel[hit]]] = 1
        wait1 = ~done & (ph == 1)
        if wait1.any():
            sel = np.flatnonzero(wait1)
            hit, fr, zc = _events(model, model.primary, za[sel], z1[sel], dt, tol)
            fin = sel[hit]
            out_x[active[fin]] = model.primary.chart(zc[hit])
            out_t[active[fin]] = j * dt + fr[hit] * dt
            status[active[fin]] = OK
            done[fin] = True
        z[active] = z1
        active = active[~done]
        j += 1
    return out_x, out_t, status


# ---------------------------------------------------------------------------
# action and assumption checks


def path_action(model, path):
    """Freidlin-Wentzell action of a discretized path.

    ``I = 1/2 sum_k (v_k - f(z_k))^T D(z_k)^{-1} (v_k - f(z_k)) dt`` with
    ``v_k = (z_{k+1} - z_k) / dt`` (left-endpoint rule).  ``D = g g^T`` does
    not include ``sigma``.

    Raises
    ------
    SingularDiffusion
        If ``D`` is singular somewhere along the path.
    """
    z = np.asarray(path.states, dtype=float)
    dt = np.diff(path.times)
    if len(z) < 2:
        return 0.0
    zl = z[:-1]
    v = np.diff(z, axis=0) / dt[:, None]
    w = v - model.drift(zl)
    D = model.diffusion_matrix(zl)
    ev = np.linalg.eigvalsh(D)
    if np.any(ev[:, 0] <= 1e-12 * np.maximum(ev[:, -1], 1e-300)):
        raise SingularDiffusion("diffusion matrix is singular along the path")
    y = np.linalg.solve(D, w[:, :, None])[:, :, 0]
    return 0.5 * float(np.sum(np.sum(w * y, axis=1) * dt))


def check_assumptions(model, n_points=64, margin=1e-3, c_minus=1e-6, c_plus=1e6):
    """Check transversality and ellipticity at sampled chart points.

    The drift must satisfy ``|<f, n>| >= margin |f|`` at points of both
    sections, and the eigenvalues of ``D`` must lie in ``[c_minus, c_plus]``.
    Returns a dict with the extreme values found.

    Raises
    ------
    AssumptionViolation
    """
    worst = np.inf
    ev_lo, ev_hi = np.inf, -np.inf
    for sec in (model.primary, model.secondary):
        grids = [np.linspace(a, b, n_points) for a, b in zip(sec.lo, sec.hi)]
        pts = np.stack(np.meshgrid(*grids, indexing="ij"), -1).reshape(-1, sec.chart_dim)
        z = sec.embed(pts)
        fv = model.drift(z)
        ratio = np.abs(fv @ sec.normal) / np.maximum(np.linalg.norm(fv, axis=1), 1e-300)
        worst = min(worst, float(ratio.min()))
        ev = np.linalg.eigvalsh(model.diffusion_matrix(z))
        ev_lo, ev_hi = min(ev_lo, float(ev.min())), max(ev_hi, float(ev.max()))
    if worst < margin:
        raise AssumptionViolation(f"drift not transversal: ratio {worst:.3g} < {margin}")
    if not (c_minus <= ev_lo and ev_hi <= c_plus):
        raise AssumptionViolation(f"diffusion eigenvalues [{ev_lo:.3g}, {ev_hi:.3g}] "
                                  f"outside [{c_minus}, {c_plus}]")
    return {"transversality": worst, "ellipticity": (ev_lo, ev_hi)}
