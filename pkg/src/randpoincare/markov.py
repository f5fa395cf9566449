"""Operator calculus on discretized kernels.

All operations take a :class:`~randpoincare.poincare.DiscretizedKernel` and
sets given as global cell labels.  Substochastic kernels are allowed
throughout; the missing row mass is the probability of being killed.

Notation: for a set ``A`` with complement ``C`` inside the kernel's cells,
``K_AC`` is the block of transitions from ``A`` to ``C``.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.sparse.csgraph import connected_components

from .errors import (
    DefectiveCluster,
    EmptySet,
    LaplaceDivergence,
    NoGap,
    NonReturning,
    SingularSystem,
    ZeroEigenfunction,
)

IMAG_TOL = 1e-10
CLUSTER_TOL = 1e-12
BIORTHO_TOL = 1e-8
RADIUS_TOL = 1e-12


@dataclass
class Spectrum:
    """Leading eigentriples ``(lambda_i, pi_i, phi_i)`` sorted by modulus.

    ``left[i]`` and ``right[i]`` satisfy ``left[i] @ right[j] = delta_ij``.
    ``pi_0`` is a probability vector and ``phi_0 > 0`` when the kernel is
    irreducible.  For ``i >= 1``, ``phi_i`` has sup norm one and is positive
    where it is largest in modulus.
    """

    values: np.ndarray
    left: np.ndarray
    right: np.ndarray
    cells: np.ndarray


def _split(K, A):
    """Positions of ``A`` and of its complement in ``K``."""
    A = np.unique(np.asarray(A, dtype=np.int64))
    if A.size == 0:
        raise EmptySet("set is empty")
    ia = K.positions(A)
    mask = np.ones(K.size, dtype=bool)
    mask[ia] = False
    return ia, np.flatnonzero(mask)


def spectral_radius(M):
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def _order(vals):
    # by modulus, then real part, then imaginary part, all descending
    return np.lexsort((-vals.imag, -vals.real, -np.round(np.abs(vals), 13)))


def spectral_decomposition(K, count=None):
    """Leading ``count`` eigentriples of ``K``.

    Eigenvalues with ``|Im| <= 1e-10`` are made real; if all retained values
    are real the vectors are returned as real arrays.

    Raises
    ------
    DefectiveCluster
        If a cluster of (nearly) equal eigenvalues has no biorthonormal basis.
    """
    M = K.matrix
    n = K.size
    count = n if count is None else min(int(count), n)
    vals, vl, vr = sla.eig(M, left=True, right=True)
    order = _order(vals)
    vals, vl, vr = vals[order], vl[:, order], vr[:, order]
    # biorthonormalize cluster by cluster
    i = 0
    while i < count:
        j = i + 1
        while j < n and abs(vals[j] - vals[i]) <= CLUSTER_TOL * max(1.0, abs(vals[i])):
            j += 1
        G = vl[:, i:j].conj().T @ vr[:, i:j]
        if np.linalg.cond(G) > 1e10:
            raise DefectiveCluster(f"eigenvalue {vals[i]:.6g} is defective")
        vl[:, i:j] = vl[:, i:j] @ np.linalg.inv(G).conj().T
        i = j
    left = vl.conj().T[:count]
    right = vr.T[:count].copy()
    vals = vals[:count].copy()
    # normalization conventions
    for k in range(count):
        # left <- left / s, right <- right * s keeps the pairing
        if k == 0:
            s = left[0].sum()
        else:
            s = 1.0 / right[k, np.argmax(np.abs(right[k]))]
        left[k] = left[k] / s
        right[k] = right[k] * s
    err = np.max(np.abs(left @ right.T - np.eye(count))) if count else 0.0
    if err > BIORTHO_TOL:
        raise DefectiveCluster(f"biorthonormality error {err:.3g}")
    small = np.abs(vals.imag) <= IMAG_TOL
    vals = np.where(small, vals.real + 0j, vals)
    for k in np.flatnonzero(small):
        left[k] = left[k].real
        right[k] = right[k].real
    if np.all(small):
        vals, left, right = vals.real, left.real, right.real
    return Spectrum(vals, left, right, K.cells.copy())


def kill(K, A):
    """Kernel of the chain killed on leaving ``A``: the block ``K_AA``."""
    ia, _ = _split(K, A)
    return K.derived(K.matrix[np.ix_(ia, ia)], K.cells[ia], op="kill")


def trace(K, A):
    """Kernel of the chain observed on ``A``.

    ``K_AA + K_AC (I - K_CC)^{-1} K_CA``.

    Raises
    ------
    NonReturning
        If ``K_CC`` has spectral radius 1.
    """
    ia, ic = _split(K, A)
    M = K.matrix
    out = M[np.ix_(ia, ia)].copy()
    if ic.size:
        Kcc = M[np.ix_(ic, ic)]
        if spectral_radius(Kcc) >= 1.0 - RADIUS_TOL:
            raise NonReturning("the chain started outside A need not return to A")
        out += M[np.ix_(ia, ic)] @ np.linalg.solve(np.eye(ic.size) - Kcc, M[np.ix_(ic, ia)])
    return K.derived(out, K.cells[ia], op="trace")


@dataclass
class QSD:
    """Principal eigentriple of a killed kernel."""

    lambda0: float
    pi: np.ndarray
    phi: np.ndarray
    residual: float
    iterations: int


def _power(M, tol, cap):
    n = M.shape[0]
    v = np.full(n, 1.0 / n)
    lam = 0.0
    for it in range(1, cap + 1):
        w = v @ M
        s = w.sum()
        if s <= 0:
            raise NoGap("the kernel kills all mass")
        w /= s
        if abs(s - lam) <= tol and np.abs(w - v).sum() <= tol:
            return s, w, it
        v, lam = w, s
    raise NoGap(f"power iteration did not converge in {cap} steps")


def qsd(K, tol=1e-12, cap=1_000_000):
    """Quasistationary distribution and principal eigenfunction of ``K``.

    Power iteration on ``K`` and its transpose.  ``pi`` is a probability
    vector, ``phi`` is positive with ``pi @ phi = 1``.

    Raises
    ------
    NoGap
        If the kernel is reducible or the iteration does not converge.
    ZeroEigenfunction
        If ``phi`` vanishes somewhere.
    """
    M = K.matrix
    ncomp, _ = connected_components(M > 0, directed=True, connection="strong")
    if ncomp != 1:
        raise NoGap("kernel is not irreducible")
    lam, pi, it1 = _power(M, tol, cap)
    lam_r, phi, it2 = _power(M.T, tol, cap)
    if np.any(phi <= 0):
        raise ZeroEigenfunction("principal right eigenfunction vanishes")
    phi = phi / (pi @ phi)
    res = max(np.abs(pi @ M - lam * pi).sum(), np.max(np.abs(M @ phi - lam * phi)))
    return QSD(float(lam), pi, phi, float(res), max(it1, it2))


def principal_eigenvalue(K):
    """Perron root of a nonnegative kernel; reducible kernels are allowed."""
    vals = np.linalg.eigvals(K.matrix)
    return float(np.max(vals.real[np.abs(vals.imag) <= IMAG_TOL * max(1.0, np.max(np.abs(vals)))]))


def doob_transform(K, q=None):
    """Doob-conditioned kernel ``k(x, y) phi(y) / (lambda0 phi(x))``.

    Raises
    ------
    ZeroEigenfunction
        If some entry of ``phi`` is at most ``1e-14``.
    """
    q = qsd(K) if q is None else q
    if np.any(q.phi <= 1e-14):
        raise ZeroEigenfunction("principal right eigenfunction vanishes")
    M = K.matrix * q.phi[None, :] / (q.lambda0 * q.phi[:, None])
    return K.derived(M, K.cells, np.zeros(K.size), op="doob")


def committor(K, A, B):
    """``h(x) = P_x(tau_A < tau_B)`` with ``h = 1`` on ``A`` and ``0`` on ``B``.

    Raises
    ------
    SingularSystem
        If the chain can stay in the complement of ``A u B`` forever.
    """
    A = np.unique(np.asarray(A, dtype=np.int64))
    B = np.unique(np.asarray(B, dtype=np.int64))
    if A.size == 0 or B.size == 0:
        raise EmptySet("committor sets must be nonempty")
    if np.intersect1d(A, B).size:
        raise ValueError("committor sets must be disjoint")
    ia, ib = K.positions(A), K.positions(B)
    mask = np.ones(K.size, dtype=bool)
    mask[ia] = mask[ib] = False
    ic = np.flatnonzero(mask)
    h = np.zeros(K.size)
    h[ia] = 1.0
    if ic.size:
        Kcc = K.matrix[np.ix_(ic, ic)]
        if spectral_radius(Kcc) >= 1.0 - RADIUS_TOL:
            raise SingularSystem("committor system is singular")
        rhs = K.matrix[np.ix_(ic, ia)].sum(axis=1)
        h[ic] = np.linalg.solve(np.eye(ic.size) - Kcc, rhs)
    return h


def return_committor(K, mu, A, B):
    """``P_mu(tau+_A < tau+_B) = sum_x mu(x) sum_y k(x, y) h(y)``.

    ``mu`` is a vector of masses over ``K``'s cells (it need not sum to 1).
    """
    h = committor(K, A, B)
    return float(np.asarray(mu) @ (K.matrix @ h))


def expected_hitting_time(K, A, mode="hitting"):
    """Expected hitting (``tau_A``) or return (``tau+_A``) time of ``A``.

    Raises
    ------
    SingularSystem
        If ``A`` is not reached almost surely from its complement.
    """
    ia, ic = _split(K, A)
    t = np.zeros(K.size)
    M = K.matrix
    if np.any(K.kill_column > 0):
        raise SingularSystem("hitting times are infinite for a killed kernel")
    if ic.size:
        Kcc = M[np.ix_(ic, ic)]
        if spectral_radius(Kcc) >= 1.0 - RADIUS_TOL:
            raise SingularSystem("A is not reached almost surely")
        t[ic] = np.linalg.solve(np.eye(ic.size) - Kcc, np.ones(ic.size))
    if mode == "return":
        t[ia] = 1.0 + M[ia] @ t
    elif mode != "hitting":
        raise ValueError("mode must be 'hitting' or 'return'")
    return t


def laplace_kernel(K, A, u):
    """``K^u = K_AA + e^u K_AC (I - e^u K_CC)^{-1} K_CA``.

    ``K^u(x, .) = E_x[e^{u (tau+_A - 1)}; X_{tau+_A} in .]``.  ``u`` may be
    complex.

    Raises
    ------
    LaplaceDivergence
        If ``|e^u| rho(K_CC) >= 1``.
    """
    ia, ic = _split(K, A)
    M = K.matrix
    eu = np.exp(u)
    out = M[np.ix_(ia, ia)].astype(np.result_type(M, eu)).copy()
    if ic.size:
        Kcc = M[np.ix_(ic, ic)]
        if abs(eu) * spectral_radius(Kcc) >= 1.0 - RADIUS_TOL:
            raise LaplaceDivergence("e^u rho(K_CC) >= 1")
        out += eu * M[np.ix_(ia, ic)] @ np.linalg.solve(np.eye(ic.size) - eu * Kcc,
                                                        M[np.ix_(ic, ia)])
    return out


def feynman_kac(K, A, boundary, u):
    """``psi(x) = E_x[e^{u tau_A} g(X_{tau_A})]`` for ``g = boundary`` on ``A``.

    On the complement ``psi`` solves ``(I - e^u K_CC) psi = e^u K_CA g``.
    """
    ia, ic = _split(K, A)
    M = K.matrix
    eu = np.exp(u)
    psi = np.zeros(K.size, dtype=np.result_type(float, eu, np.asarray(boundary)))
    psi[ia] = boundary
    if ic.size:
        Kcc = M[np.ix_(ic, ic)]
        if abs(eu) * spectral_radius(Kcc) >= 1.0 - RADIUS_TOL:
            raise LaplaceDivergence("e^u rho(K_CC) >= 1")
        psi[ic] = np.linalg.solve(np.eye(ic.size) - eu * Kcc, eu * (M[np.ix_(ic, ia)] @ psi[ia]))
    return psi


def resolvent_solve(K, A, g):
    """``r(x) = E_x[sum_{n < tau_A} g(X_n)]``, i.e. ``(I - K) r = g`` off ``A``."""
    ia, ic = _split(K, A)
    r = np.zeros(K.size)
    if ic.size:
        Kcc = K.matrix[np.ix_(ic, ic)]
        if spectral_radius(Kcc) >= 1.0 - RADIUS_TOL:
            raise SingularSystem("A is not reached almost surely")
        r[ic] = np.linalg.solve(np.eye(ic.size) - Kcc, np.asarray(g, dtype=float)[ic])
    return r


def tail_probability(K, A, n):
    """``P_x(tau+_A > n)`` for every cell ``x``."""
    ia, ic = _split(K, A)
    M = K.matrix
    # survive the first step outside A, then n - 1 more steps in C
    s = np.ones(ic.size)
    for _ in range(n - 1):
        s = M[np.ix_(ic, ic)] @ s
    return M[:, ic] @ s if n >= 1 else np.ones(K.size)


def geometric_return_bound(K, A, n0):
    """Bound on ``E_x[tau+_A]`` from the tail at ``n0``.

    ``E_x[tau+_A] <= n0 / (1 - sup_{y in A^c} P_y(tau_A > n0))`` provided
    that supremum is below one.
    """
    ia, ic = _split(K, A)
    # P_y(tau_A > n0) for y outside A: n0 steps inside C
    M = K.matrix[np.ix_(ic, ic)]
    s = np.ones(ic.size)
    for _ in range(n0):
        s = M @ s
    q = float(s.max()) if ic.size else 0.0
    if q >= 1.0:
        return np.inf
    return n0 / (1.0 - q)


def splitting_return_bound(K, A, B, C):
    """``E_A[tau+_B] <= E_A[tau+_{B u C}] + P_A(tau+_C < tau+_B) E_C[tau+_B]``.

    Suprema over starting points in ``A`` and ``C``; returns
    ``(bound, exact sup_A E[tau+_B])``.
    """
    ia = K.positions(A)
    ic = K.positions(C)
    BC = np.union1d(B, C)
    t_bc = expected_hitting_time(K, BC, mode="return")
    t_b = expected_hitting_time(K, B, mode="return")
    h = K.matrix @ committor(K, C, B)
    bound = t_bc[ia].max() + h[ia].max() * t_b[ic].max()
    return float(bound), float(t_b[ia].max())
