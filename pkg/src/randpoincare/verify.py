"""Quantitative checks of the metastability estimates on a kernel.

Each check compares a direct spectral computation with the committor, QSD
or hitting-time expressions that are supposed to approximate it, and returns
a :class:`VerificationReport`.  ``exact_identities`` collects identities that
hold to solver precision on any kernel.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components

from . import markov as mk
from . import metastable as ms
from .errors import DegenerateFit


@dataclass
class VerificationReport:
    check_name: str
    sigma_values: list
    predicted: list
    measured: list
    relative_errors: list
    passed: bool
    tolerances: dict
    details: dict = field(default_factory=dict)

    def to_dict(self):
        def clean(v):
            if isinstance(v, dict):
                return {str(k): clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple, np.ndarray)):
                return [clean(x) for x in v]
            if isinstance(v, (np.bool_, bool)):
                return bool(v)
            if isinstance(v, (np.integer, int)):
                return int(v)
            if isinstance(v, (np.floating, float)):
                return float(v)
            if isinstance(v, complex):
                return [v.real, v.imag]
            return v

        return clean({"check_name": self.check_name, "sigma_values": self.sigma_values,
                      "predicted": self.predicted, "measured": self.measured,
                      "relative_errors": self.relative_errors, "pass": self.passed,
                      "tolerances": self.tolerances, "details": self.details})


def analysis_kernel(K):
    """``K`` itself, or its Doob transform when some mass is killed."""
    return mk.doob_transform(K) if K.killed else K


def _eigs(K, count):
    return mk.spectral_decomposition(K, count)


def _level_quantities(K, structure, k, data=None):
    data = ms.level_data(K, structure, k) if data is None else data
    mu = np.zeros(K.size)
    mu[K.positions(structure.balls[k])] = data.qsds[k].pi
    p_exit = mk.return_committor(K, mu, structure.M(k), structure.balls[k])
    return data, mu, p_exit


def check_eigenvalues(K, structure, sigma, tol=0.10, imag_tol=1e-8):
    """Three routes to ``1 - lambda_k`` for ``k = 1..N-1``.

    (a) direct eigenvalue; (b) ``P_{pi^{B_{k+1}}}(tau+_{M_k} < tau+_{B_{k+1}})``;
    (c) ``1 - lambda_0`` of ``K`` killed on ``M_k``.  Relative errors of (b)
    and (c) with respect to (a).
    """
    N = structure.N
    vals = np.linalg.eigvals(K.matrix)
    vals = vals[np.argsort(-np.abs(vals))]
    top = vals[:N]
    pred, meas, rel = [], [], []
    for k in range(1, N):
        _, _, p_exit = _level_quantities(K, structure, k)
        lam_c = mk.principal_eigenvalue(mk.kill(K, np.setdiff1d(K.cells, structure.M(k))))
        direct = 1.0 - top[k].real
        routes = [p_exit, 1.0 - lam_c]
        meas.append(direct)
        pred.append(routes)
        rel.append([abs(r - direct) / direct for r in routes])
    imag = float(np.max(np.abs(top.imag)))
    n_big = int(np.sum(np.abs(vals) > 0.99))
    passed = bool(imag <= imag_tol and all(max(r) <= tol for r in rel))
    return VerificationReport("eigenvalues", [sigma], pred, meas, rel, passed,
                              {"relative": tol, "imag": imag_tol},
                              {"top": top.real.tolist(), "max_imag": imag,
                               "count_above_0.99": n_big})


def check_gap(kernels, structures, sigmas):
    """``|lambda_N|`` against one, and the gap ratio trend, over a schedule.

    ``c_sigma = (1 - |lambda_N|) log(1 / sigma)``; the fitted ``c`` is the
    smallest one.  The gap ratio ``(1 - lambda_{N-1}) / (1 - |lambda_N|)``
    should decrease as ``sigma`` decreases.
    """
    order = np.argsort(sigmas)[::-1]
    lamN, ratio, cs = [], [], []
    for i in order:
        K, st = kernels[i], structures[i]
        N = st.N
        vals = np.linalg.eigvals(K.matrix)
        vals = vals[np.argsort(-np.abs(vals))]
        ln = float(np.abs(vals[N])) if len(vals) > N else 0.0
        lamN.append(ln)
        ratio.append(float((1 - vals[N - 1].real) / (1 - ln)))
        cs.append((1 - ln) * np.log(1 / sigmas[i]))
    c = float(min(cs))
    trend = bool(np.all(np.diff(ratio) < 0)) if len(ratio) > 1 else True
    return VerificationReport("gap", [float(sigmas[i]) for i in order], cs, lamN, [],
                              bool(c > 0 and trend), {},
                              {"c": c, "gap_ratio": ratio, "ratio_decreasing": trend})


def away_cells(K, structure, min_edge=2):
    """Cells at distance at least ``delta`` from every ball boundary and at
    least ``min_edge`` cells from the grid boundary."""
    centers = K.centers()
    ok = K.grid.edge_distance()[K.cells] >= min_edge
    for c in structure.centers:
        dist = np.linalg.norm(centers - c, axis=1)
        ok &= np.abs(dist - structure.delta) >= structure.delta - 1e-12
    return ok


def check_eigenfunctions(K, structure, k, tol_right=0.05, tol_left=0.10, outside_tol=0.05):
    """Right and left eigenfunctions against their committor estimates.

    Right: the direct ``phi_k`` is scaled by a least-squares factor onto the
    estimate over the cells returned by :func:`away_cells`, and the sup
    distance there is reported.  Left: ball masses ``pi_k(B_j)`` against
    :func:`~randpoincare.metastable.left_eigenfunction_estimate`, the sign
    pattern, ``pi_0(B_1)`` and the ``pi_0`` mass outside the balls.
    """
    N = structure.N
    sp = _eigs(K, N)
    phi = np.real(sp.right[k])
    est = ms.right_eigenfunction_estimate(K, structure, k)
    mask = away_cells(K, structure)
    scale = float(phi[mask] @ est[mask] / (phi[mask] @ phi[mask]))
    dist = float(np.max(np.abs(scale * phi[mask] - est[mask])))
    left = ms.left_eigenfunction_estimate(K, structure, k)
    masses = np.array([np.real(sp.left[k])[K.positions(b)].sum() for b in structure.balls])
    pi0 = np.real(sp.left[0])
    outside = float(1.0 - sum(pi0[K.positions(b)].sum() for b in structure.balls))
    pi0_B1 = float(pi0[K.positions(structure.balls[0])].sum())
    lest = left["estimate"]
    dominant = [j for j in range(N) if abs(lest[j]) >= 0.1 * np.max(np.abs(lest))]
    rel_left = [abs(masses[j] - lest[j]) / abs(lest[j]) for j in dominant]
    signs = bool(np.all(masses[:k] < 0))
    own = float(masses[k])
    passed = bool(dist <= tol_right and max(rel_left) <= tol_left and signs
                  and 0.9 <= own <= 1.1 and outside <= outside_tol)
    return VerificationReport(
        "eigenfunctions", [K.sigma], [lest.tolist(), est.tolist()],
        [masses.tolist(), phi.tolist()], [dist] + rel_left, passed,
        {"right_sup": tol_right, "left_relative": tol_left, "pi0_outside": outside_tol},
        {"right_sup_distance": dist, "scale": scale, "away_cells": int(mask.sum()),
         "ball_masses": masses.tolist(), "left_estimate": lest.tolist(),
         "pi_star": left["pi_star"].tolist(), "negative_lower": signs,
         "own_ball_mass": own, "pi0_B1": pi0_B1, "pi0_outside": outside})


def check_hitting_times(K, structure, k, tol=0.10, osc_tol=0.05):
    """``E_x[tau_{M_k}]`` on ``B_{k+1}`` against ``1 / (1 - lambda_k)`` and
    ``1 / P_{pi^{B_{k+1}}}(tau+_{M_k} < tau+_{B_{k+1}})``."""
    _, _, p_exit = _level_quantities(K, structure, k)
    vals = np.linalg.eigvals(K.matrix)
    vals = vals[np.argsort(-np.abs(vals))]
    lam = float(vals[k].real)
    t = mk.expected_hitting_time(K, structure.M(k))[K.positions(structure.balls[k])]
    preds = [1 / (1 - lam), 1 / p_exit]
    rel = [float(np.max(np.abs(t - p) / p)) for p in preds]
    osc = float((t.max() - t.min()) / t.mean())
    passed = bool(max(rel) <= tol and osc <= osc_tol)
    return VerificationReport("hitting_times", [K.sigma], preds,
                              [float(t.min()), float(t.mean()), float(t.max())], rel, passed,
                              {"relative": tol, "oscillation": osc_tol}, {"oscillation": osc})


def estimate_exponent(points):
    """Fit ``log p = c - H / sigma^2`` by least squares.

    Parameters
    ----------
    points : sequence of (sigma, p)

    Returns
    -------
    H, intercept, r2 : float

    Raises
    ------
    DegenerateFit
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or len(pts) < 3:
        raise DegenerateFit("at least three points are needed")
    s, p = pts[:, 0], pts[:, 1]
    if np.any((p <= 0) | (p >= 1)):
        raise DegenerateFit("probabilities must lie in (0, 1)")
    x = -1.0 / s ** 2
    if np.ptp(x) == 0:
        raise DegenerateFit("all sigma values are equal")
    y = np.log(p)
    A = np.vstack([x, np.ones_like(x)]).T
    (H, c), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ np.array([H, c])
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    return float(H), float(c), float(r2)


def exit_probability(K, structure, k=1):
    """``P_{pi^{B_{k+1}}}(tau+_{M_k} < tau+_{B_{k+1}})``, the level-k escape
    probability whose exponent is ``H(k+1, M_k)``."""
    return _level_quantities(K, structure, k)[2]


# ---------------------------------------------------------------------------
# identities that hold to solver precision


def _core(K, A):
    """Largest strongly connected piece of ``A`` under ``K``."""
    ia = K.positions(A)
    ncomp, lab = connected_components(K.matrix[np.ix_(ia, ia)] > 0, directed=True,
                                      connection="strong")
    big = np.argmax(np.bincount(lab, minlength=ncomp))
    return np.asarray(A)[lab == big]


def _default_sets(K, structure):
    if structure is not None:
        return structure.balls[0], structure.balls[1] if structure.N > 1 else None
    cells = _core(K, K.cells)
    n = len(cells)
    third = max(1, n // 3)
    A1 = _core(K, cells[:third])
    return A1, (_core(K, cells[n - third:]) if n - third >= third else None)


def exact_identities(K, structure=None, count=None, n_exit=50, seed=0):
    """Identities that hold exactly for any kernel, up to rounding.

    Returns a dict mapping identity names to ``(error, tolerance)``.
    Killed kernels are replaced by their Doob transform where stationarity
    is needed.
    """
    rng = np.random.default_rng(seed)
    Ka = analysis_kernel(K)
    A1, A2 = _default_sets(Ka, structure)
    out = {}

    sp = mk.spectral_decomposition(Ka, count or (structure.N if structure is not None else 3))
    pi0 = np.real(sp.left[0])
    # detailed balance of committors
    if A2 is not None:
        m1 = np.where(np.isin(Ka.cells, A1), pi0, 0.0)
        m2 = np.where(np.isin(Ka.cells, A2), pi0, 0.0)
        lhs = mk.return_committor(Ka, m1, A2, A1)
        rhs = mk.return_committor(Ka, m2, A1, A2)
        out["detailed_balance"] = (abs(lhs - rhs), 1e-10)

    # Doob transform spectrum
    A = A1 if structure is None else structure.balls[0]
    KA = mk.kill(K, A)
    q = mk.qsd(KA)
    D = mk.doob_transform(KA, q)
    ev = np.linalg.eigvals(KA.matrix) / q.lambda0
    evd = np.linalg.eigvals(D.matrix)
    lead = ev[np.argsort(-np.abs(ev))][:10]
    err = max(np.min(np.abs(evd - e)) for e in lead)
    out["doob_spectrum"] = (float(err), 1e-9)
    out["doob_stochastic"] = (float(np.max(np.abs(D.matrix.sum(axis=1) - 1))), 1e-10)

    # geometric exit law from the QSD
    exitp = 1.0 - KA.matrix.sum(axis=1)
    v = q.pi.copy()
    worst = 0.0
    for n in range(1, n_exit + 1):
        worst = max(worst, abs(v @ exitp - q.lambda0 ** (n - 1) * (1 - q.lambda0)))
        v = v @ KA.matrix
    out["geometric_exit"] = (worst, 1e-12)

    # trace kernel and its Laplace transform at u = 0
    if structure is not None:
        M = structure.union()
    else:
        M = np.union1d(A1, A2) if A2 is not None else A1
    T = mk.trace(Ka, M)
    out["trace_rows"] = (float(np.max(np.abs(T.matrix.sum(axis=1) - 1))), 1e-10)
    out["laplace_u0"] = (float(np.max(np.abs(mk.laplace_kernel(Ka, M, 0.0) - T.matrix))), 1e-12)

    # Feynman-Kac consistency
    comp = np.setdiff1d(Ka.cells, M)
    if comp.size:
        rho_c = mk.spectral_radius(Ka.matrix[np.ix_(Ka.positions(comp), Ka.positions(comp))])
        u = 0.5 * -np.log(max(rho_c, 1e-300))
        g = rng.uniform(-1, 1, len(M))
        psi = mk.feynman_kac(Ka, M, g, u)
        ic = Ka.positions(comp)
        res = np.max(np.abs(Ka.matrix[ic] @ psi - np.exp(-u) * psi[ic])) / np.max(np.abs(psi))
        out["feynman_kac"] = (float(res), 1e-10)
    else:
        rho_c = 0.0

    # eigenpairs restricted to M: eigenvector of K^u and the left-eigenvector identity
    im = Ka.positions(M)
    e42, e47 = 0.0, 0.0
    for lam, left, right in zip(sp.values, sp.left, sp.right):
        if abs(lam) <= rho_c * (1 + 1e-9) or lam == 0:
            continue
        Ku = mk.laplace_kernel(Ka, M, -np.log(lam + 0j))
        e42 = max(e42, float(np.max(np.abs(Ku @ right[im] - lam * right[im]))))
        sets = [structure.balls[i] for i in range(structure.N)] if structure else [A1]
        for B in sets:
            jb = np.isin(M, B)
            e47 = max(e47, float(abs(left[im] @ Ku[:, jb].sum(axis=1) - lam * left[im][jb].sum())))
    out["laplace_eigenvector"] = (e42, 1e-8)
    out["left_committor_identity"] = (e47, 1e-8)
    return out
