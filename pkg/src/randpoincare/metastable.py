"""Metastable structure: balls, hierarchy, finite-rank kernel and bounds.

Balls ``B_1, ..., B_N`` are sets of cells around the stable fixed points of
the deterministic return map, listed in metastable order (``B_1`` the most
stable).  ``M_k`` is the union of the first ``k`` balls.  Level ``k`` of the
analysis (``1 <= k <= N - 1``) works on ``M_{k+1}``: the chain is traced on
``M_{k+1}`` and each ball's quasistationary distribution ``pi^{B_i}`` is
that of the traced chain killed on leaving ``B_i`` (trace first, then kill).
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import markov as mk
from .errors import (
    AmbiguousHierarchy,
    BallOverlap,
    EmptySet,
    LaplaceDivergence,
    NoContraction,
    NotInvariant,
)

TIE_TOL = 1e-12
C1 = 9 * (5 / 4) ** 2


@dataclass
class MetastableStructure:
    """Balls in metastable order with their exponent matrix.

    Attributes
    ----------
    balls : list of ndarray
        Global cell labels of ``B_1, ..., B_N``.
    centers : ndarray, shape (N, d)
        Fixed points ``x*_i``.
    delta : float
    H : ndarray, shape (N, N)
        Transition exponents in the stored order, ``inf`` on the diagonal.
    theta : float
        Hierarchy margin; ``nan`` while the order is unset.
    order : tuple
        ``order[j]`` is the detection index of the orbit stored at position j.
    metadata : dict
    """

    balls: list
    centers: np.ndarray
    delta: float
    H: np.ndarray = None
    theta: float = float("nan")
    order: tuple = None
    metadata: dict = field(default_factory=dict)

    @property
    def N(self):
        return len(self.balls)

    def M(self, k):
        """``M_k``: union of the first ``k`` balls."""
        if k < 1:
            raise EmptySet("M_0 is empty")
        return np.unique(np.concatenate(self.balls[:k]))

    def union(self):
        return self.M(self.N)

    def reordered(self, order, H=None, theta=float("nan")):
        order = tuple(int(i) for i in order)
        new_H = None
        if H is not None:
            new_H = np.asarray(H, dtype=float)[np.ix_(order, order)]
        prev = self.order or tuple(range(self.N))
        return MetastableStructure([self.balls[i] for i in order], self.centers[list(order)],
                                   self.delta, new_H, theta, tuple(prev[i] for i in order),
                                   dict(self.metadata))

    def to_dict(self):
        H = None if self.H is None else [[None if not np.isfinite(v) else float(v) for v in row]
                                         for row in self.H]
        return {"balls": [b.tolist() for b in self.balls], "centers": self.centers.tolist(),
                "delta": self.delta, "H": H,
                "theta": None if not np.isfinite(self.theta) else float(self.theta),
                "order": None if self.order is None else list(self.order),
                "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d):
        H = d.get("H")
        if H is not None:
            H = np.array([[np.inf if v is None else v for v in row] for row in H], dtype=float)
        theta = d.get("theta")
        return cls([np.asarray(b, dtype=np.int64) for b in d["balls"]], np.asarray(d["centers"]),
                   float(d["delta"]), H, float("nan") if theta is None else float(theta),
                   None if d.get("order") is None else tuple(d["order"]), d.get("metadata", {}))


@dataclass
class BoundCertificate:
    """A closed-form bound next to the quantity it controls."""

    name: str
    inputs: dict
    bound_value: float
    measured_value: float = None
    satisfied: bool = None

    def to_dict(self):
        return {"name": self.name, "inputs": self.inputs, "bound_value": self.bound_value,
                "measured_value": self.measured_value, "satisfied": self.satisfied}


def _cert(name, inputs, bound, measured=None, atol=0.0):
    sat = None if measured is None else bool(measured <= bound + atol)
    return BoundCertificate(name, {k: float(v) for k, v in inputs.items()}, float(bound),
                            None if measured is None else float(measured), sat)


# ---------------------------------------------------------------------------
# balls and hierarchy


def _sphere_points(center, delta, d):
    if d == 1:
        return np.array([center - delta, center + delta])
    dirs = [s * e for e in np.eye(d) for s in (-1.0, 1.0)]
    for signs in itertools.product((-1.0, 1.0), repeat=d):
        dirs.append(np.array(signs) / np.sqrt(d))
    return center + delta * np.array(dirs)


def detect_balls(K, model, delta, fixed_points, step=None):
    """Balls of radius ``delta`` around the given fixed points.

    ``B_i`` is the set of cells whose center is within ``delta`` of
    ``x*_i``.  The deterministic return map must send points of each ball's
    boundary sphere strictly inside the ball.

    Raises
    ------
    BallOverlap
        If two balls intersect.
    NotInvariant
        If a ball is not mapped into itself.
    EmptySet
        If a ball contains no cell.
    """
    from .floquet import STEP, return_map

    step = STEP if step is None else step
    fp = np.atleast_2d(np.asarray(fixed_points, dtype=float))
    if fp.shape[1] != K.grid.dim:
        fp = fp.reshape(-1, K.grid.dim)
    for i, j in itertools.combinations(range(len(fp)), 2):
        if np.linalg.norm(fp[i] - fp[j]) <= 2 * delta:
            raise BallOverlap(f"balls {i} and {j} overlap at delta={delta}")
    centers = K.centers()
    balls = []
    for i, c in enumerate(fp):
        inside = np.linalg.norm(centers - c, axis=1) <= delta
        if not inside.any():
            raise EmptySet(f"ball {i} contains no cell")
        balls.append(np.sort(K.cells[inside]))
        pts = _sphere_points(c, delta, len(c))
        img, _ = return_map(model, pts, step)
        dist = np.linalg.norm(img - c, axis=1)
        if np.any(~(dist < delta)):
            raise NotInvariant(f"ball {i} is not mapped into itself "
                               f"(max image distance {np.nanmax(dist):.4g} >= {delta})")
    return MetastableStructure(balls, fp, float(delta), metadata={"n_balls": len(balls)})


def hierarchy_margin(H):
    """Largest ``theta`` for which ``H`` is in metastable order as stored.

    ``theta = min_j [min_{i<j} H(i, M_j minus i) - H(j, M_{j-1})]``.
    """
    H = np.asarray(H, dtype=float)
    N = len(H)
    theta = np.inf
    for j in range(1, N):
        out_j = H[j, :j].min()
        rest = min(np.min(np.delete(H[i, :j + 1], i)) for i in range(j))
        theta = min(theta, rest - out_j)
    return float(theta)


def hierarchy_order(H, tol=TIE_TOL):
    """Metastable order by repeatedly removing the least stable orbit.

    Among the remaining orbits the one with the smallest
    ``min_{j != i} H(i, j)`` is labelled last and removed.

    Returns
    -------
    order : tuple
        Indices into ``H`` from most to least stable.
    theta : float

    Raises
    ------
    AmbiguousHierarchy
        If a minimum is attained twice within ``tol``.
    """
    H = np.asarray(H, dtype=float)
    N = len(H)
    if H.shape != (N, N):
        raise ValueError("H must be square")
    off = ~np.eye(N, dtype=bool)
    if np.any(~np.isfinite(H[off])) or np.any(H[off] < 0):
        raise ValueError("off-diagonal exponents must be finite and nonnegative")
    remaining = list(range(N))
    tail = []
    while len(remaining) > 1:
        cost = np.array([min(H[i, j] for j in remaining if j != i) for i in remaining])
        srt = np.sort(cost)
        if srt[1] - srt[0] <= tol:
            raise AmbiguousHierarchy("tie in the hierarchy procedure")
        tail.append(remaining.pop(int(np.argmin(cost))))
    order = tuple(remaining + tail[::-1])
    return order, hierarchy_margin(H[np.ix_(order, order)])


def order_structure(structure, H, provenance="user"):
    """Put ``structure`` in metastable order for the exponents ``H``.

    ``H`` is indexed like the structure's current ball list.
    """
    order, theta = hierarchy_order(H)
    out = structure.reordered(order, H, theta)
    out.metadata["H_provenance"] = provenance
    return out


def reference_exponents(roots, stable):
    """Quasipotential matrix of a radial gradient model.

    Adjacent stable radii ``a < b`` separated by the saddle ``s`` have
    ``H(a, b) = 2 (V(s) - V(a))``; reaching a farther orbit costs the sum of
    the barriers climbed on the way.
    """
    from .sde import radial_potential

    V, _, _ = radial_potential(roots)
    roots = sorted(roots)
    stable = sorted(stable)
    N = len(stable)
    saddles = [max(r for r in roots if a < r < b) for a, b in zip(stable[:-1], stable[1:])]
    H = np.full((N, N), np.inf)
    for i in range(N):
        for j in range(N):
            if i == j:
                continue
            step = 1 if j > i else -1
            cost = 0.0
            for a in range(i, j, step):
                s = saddles[min(a, a + step)]
                cost += 2 * (V(s) - V(stable[a]))
            H[i, j] = cost
    return H


# ---------------------------------------------------------------------------
# the stochastic matrix P and the finite-rank kernel


@dataclass
class LevelData:
    """Trace kernel on ``M_{k+1}``, ball QSDs and the matrix ``P``."""

    k: int
    K0: object
    qsds: list
    P: np.ndarray


def level_data(K, structure, k):
    """Trace kernel, QSDs and ``P`` for level ``k`` (balls 1..k+1)."""
    if not 1 <= k <= structure.N - 1:
        raise ValueError("level k must be in 1..N-1")
    K0 = mk.trace(K, structure.M(k + 1))
    P, qsds = build_P(K0, structure, k)
    return LevelData(k, K0, qsds, P)


def build_P(K0, structure, k):
    """``P_ij = sum_{x in B_i} pi^{B_i}(x) K0(x, B_j)`` for ``i, j <= k + 1``.

    ``K0`` is the trace kernel on ``M_{k+1}``.

    Returns
    -------
    P : ndarray, shape (k + 1, k + 1)
    qsds : list of QSD
    """
    balls = structure.balls[:k + 1]
    qsds = [mk.qsd(mk.kill(K0, b)) for b in balls]
    P = np.empty((k + 1, k + 1))
    for i, b in enumerate(balls):
        rows = K0.matrix[K0.positions(b)]
        for j, bj in enumerate(balls):
            P[i, j] = qsds[i].pi @ rows[:, K0.positions(bj)].sum(axis=1)
    return P, qsds


def finite_rank_kernel(K0, structure, qsds, k):
    """``K*``: every row in ``B_i`` is replaced by its ``pi^{B_i}`` average."""
    out = np.empty_like(K0.matrix)
    for b, q in zip(structure.balls[:k + 1], qsds):
        pos = K0.positions(b)
        out[pos] = q.pi @ K0.matrix[pos]
    return K0.derived(out, K0.cells, np.zeros(K0.size), op="finite_rank")


@dataclass
class BlockTriangularization:
    """``P_hat S = S T`` with ``S = [[I, S12], [0, 1]]``, ``T = [[T11, 0], [T21, alpha]]``."""

    S12: np.ndarray
    T11: np.ndarray
    T21: np.ndarray
    alpha: float
    iterations: int
    residual: float
    contraction_ok: bool
    a_hat: float
    b: float

    def S(self):
        k = len(self.S12)
        S = np.eye(k + 1)
        S[:k, k] = self.S12
        return S

    def T(self):
        k = len(self.S12)
        T = np.zeros((k + 1, k + 1))
        T[:k, :k] = self.T11
        T[k, :k] = self.T21
        T[k, k] = self.alpha
        return T


def block_triangularize(Phat, tol=1e-14, max_iter=1_000_000, patience=50):
    """Solve ``P11 S + P12 - S a - S (P21 S) = 0`` by fixed-point iteration.

    ``Phat = I - P`` is split with the last row and column as the scalar
    block: ``a = Phat[k, k]``.  The map
    ``Xi -> (P12 + P11 Xi - Xi (P21 Xi)) / a`` is iterated from zero.
    ``b`` is the largest exit mass ``Phat[l, l]`` of the first block; the map
    is a contraction when ``b / a < 1/8``.

    Raises
    ------
    NoContraction
        If the iterates leave the a-priori ball ``2 |P12| / a`` for
        ``patience`` consecutive steps, or do not converge.
    """
    Phat = np.asarray(Phat, dtype=float)
    k = Phat.shape[0] - 1
    P11, P12, P21, a = Phat[:k, :k], Phat[:k, k], Phat[k, :k], Phat[k, k]
    if a == 0:
        raise NoContraction("a_hat = 0")
    b = float(np.max(np.diag(P11))) if k else 0.0
    radius = 2 * np.max(np.abs(P12), initial=0.0) / abs(a)
    X = np.zeros(k)
    outside = 0
    for it in range(1, max_iter + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            Xn = (P12 + P11 @ X - X * (P21 @ X)) / a
        if not np.all(np.isfinite(Xn)):
            raise NoContraction("fixed point iteration diverged")
        step = np.max(np.abs(Xn - X), initial=0.0)
        X = Xn
        if step <= tol:
            break
        outside = outside + 1 if np.max(np.abs(X), initial=0.0) > radius * (1 + tol) else 0
        if outside >= patience:
            raise NoContraction("iterates left the a-priori ball")
    else:
        raise NoContraction(f"no convergence in {max_iter} iterations")
    alpha = float(a + P21 @ X)
    T11 = P11 - np.outer(X, P21)
    bt = BlockTriangularization(X, T11, P21.copy(), alpha, it, 0.0,
                                bool(b / a < 1 / 8), float(a), b)
    bt.residual = float(np.max(np.abs(Phat @ bt.S() - bt.S() @ bt.T())))
    return bt


def _sup(v):
    return float(np.max(np.abs(v), initial=0.0))


def kstar_spectrum(P, bt=None):
    """Eigenvalues of ``P`` (the nonzero spectrum of ``K*``) with bounds.

    Eigenvalues are sorted by decreasing real part.  Certificates:

    * ``consistency``: ``|lambda*_k - (1 - alpha)|``, expected ~ 0;
    * ``smallest``: ``|lambda*_k - (1 - a)| <= 2 |P12|``;
    * ``others_norm``: ``max_i |1 - lambda*_i| <= |T11|``;
    * ``others_b``: ``|T11| <= 2 b + 2 |P12| <= 4 b``;
    * ``others``: ``max_i |1 - lambda*_i| <= 4 |P12|``.

    Norms are sup norms (maximal absolute row sum).
    """
    P = np.asarray(P, dtype=float)
    k = len(P) - 1
    Phat = np.eye(k + 1) - P
    bt = block_triangularize(Phat) if bt is None else bt
    vals = np.linalg.eigvals(P)
    vals = vals[np.lexsort((-vals.imag, -vals.real))]
    i_small = int(np.argmin(np.abs(vals - (1 - bt.alpha))))
    lam_k = vals[i_small]
    others = np.delete(vals, i_small)
    n12 = _sup(Phat[:k, k])
    nT11 = float(np.max(np.abs(bt.T11).sum(axis=1), initial=0.0))
    dev = float(np.max(np.abs(1 - others), initial=0.0))
    certs = [
        _cert("consistency", {"alpha": bt.alpha}, 1e-10, abs(lam_k - (1 - bt.alpha))),
        _cert("smallest", {"a_hat": bt.a_hat, "P12": n12}, 2 * n12, abs(lam_k - (1 - bt.a_hat))),
        _cert("others_norm", {"T11": nT11}, nT11, dev, atol=1e-12),
        _cert("others_b", {"b": bt.b, "P12": n12}, min(2 * bt.b + 2 * n12, 4 * bt.b), nT11),
        _cert("others", {"P12": n12}, 4 * n12, dev),
    ]
    return vals, certs


def resolvent_certificate(P, bt=None, points=256, r=None, c1=C1):
    """``|(zI - P)^{-1}| <= c1 / |z - lambda*_k|`` on ``|z - lambda*_k| = r``.

    ``r`` defaults to ``a / 8``.  The measured value is the largest
    ``|(zI - P)^{-1}| |z - lambda*_k|`` over the sampled contour.
    """
    P = np.asarray(P, dtype=float)
    k = len(P) - 1
    bt = block_triangularize(np.eye(k + 1) - P) if bt is None else bt
    lam = 1 - bt.alpha
    r = bt.a_hat / 8 if r is None else r
    worst = 0.0
    for phi in np.linspace(0, 2 * np.pi, points, endpoint=False):
        z = lam + r * np.exp(1j * phi)
        R = np.linalg.inv(z * np.eye(k + 1) - P)
        worst = max(worst, float(np.max(np.abs(R).sum(axis=1))) * r)
    return _cert("resolvent", {"r": r, "a_hat": bt.a_hat, "b": bt.b}, c1, worst)


# ---------------------------------------------------------------------------
# eigenfunction estimates


def _ball_qsds(K, structure, k, data=None):
    data = level_data(K, structure, k) if data is None else data
    out = []
    for b, q in zip(structure.balls[:k + 1], data.qsds):
        mu = np.zeros(K.size)
        mu[K.positions(b)] = q.pi
        out.append(mu)
    return out, data


def rho(K, structure, k, data=None):
    """First-order coefficients ``rho_ki`` for ``i <= k``."""
    mus, data = _ball_qsds(K, structure, k, data)
    Mk, Bk1 = structure.M(k), structure.balls[k]
    denom = mk.return_committor(K, mus[k], Mk, Bk1)
    return np.array([-mk.return_committor(K, mus[i], Bk1, Mk) / denom for i in range(k)])


def right_eigenfunction_estimate(K, structure, k, data=None):
    """Committor estimate of the right eigenfunction ``phi_k``.

    ``phi_k(x) ~ P_x(tau_{B_{k+1}} < tau_{M_k})
    + sum_{i <= k} P_x(tau_{B_i} < tau_{M_{k+1} minus B_i}) rho_ki``.
    """
    r = rho(K, structure, k, data)
    Mk1 = structure.M(k + 1)
    est = mk.committor(K, structure.balls[k], structure.M(k))
    for i in range(k):
        Bi = structure.balls[i]
        est = est + mk.committor(K, Bi, np.setdiff1d(Mk1, Bi)) * r[i]
    return est


def left_eigenfunction_estimate(K, structure, k, data=None):
    """Estimated masses ``pi_k(B_j)`` for every ball.

    ``j <= k``: ``-P_{pi^{B_{k+1}}}(tau+_{B_j} < tau+_{M_{k+1} minus B_j})
    / P_{pi^{B_{k+1}}}(tau+_{M_k} < tau+_{B_{k+1}})``;
    ``j = k + 1``: ``1 - pi_hat S12`` with ``pi_hat`` the entries above and
    ``S12`` from the block triangularization of ``I - P``;
    ``j > k + 1``: mass of ``B_j`` under the QSD of ``K`` killed on ``M_k``.

    Returns a dict with the ``estimate`` array and the block-triangular left
    eigenvector ``pi_star`` of ``P`` for comparison.
    """
    mus, data = _ball_qsds(K, structure, k, data)
    N = structure.N
    Mk, Mk1, Bk1 = structure.M(k), structure.M(k + 1), structure.balls[k]
    denom = mk.return_committor(K, mus[k], Mk, Bk1)
    est = np.zeros(N)
    for j in range(k):
        Bj = structure.balls[j]
        est[j] = -mk.return_committor(K, mus[k], Bj, np.setdiff1d(Mk1, Bj)) / denom
    bt = block_triangularize(np.eye(k + 1) - data.P)
    est[k] = 1.0 - est[:k] @ bt.S12
    if k + 1 < N:
        comp = np.setdiff1d(K.cells, Mk)
        q = mk.qsd(mk.kill(K, comp))
        Kc = mk.kill(K, comp)
        for j in range(k + 1, N):
            est[j] = q.pi[Kc.positions(structure.balls[j])].sum()
    # left eigenvector of P for 1 - alpha, normalized on the last ball
    pi_hat = bt.T21 @ np.linalg.inv(bt.alpha * np.eye(k) - bt.T11)
    pi_star = np.concatenate([pi_hat, [1.0 - pi_hat @ bt.S12]])
    return {"estimate": est, "pi_star": pi_star, "block": bt}


# ---------------------------------------------------------------------------
# bound certificates


def uniform_positivity(Kn):
    """``L = max_y max_x k(x, y) / min_x k(x, y)``; ``inf`` if a column has a zero."""
    M = Kn.matrix if hasattr(Kn, "matrix") else np.asarray(Kn)
    cmin = M.min(axis=0)
    if np.any(cmin <= 0):
        return np.inf
    return float(np.max(M.max(axis=0) / cmin))


def spectral_gap_bound(KB, n=1):
    """Birkhoff-type bound on ``theta = |lambda_1| / lambda_0`` for ``KB``.

    ``theta^n <= L(n) - min_x KB^n(x, B) / lambda_0^n``; satisfied when the
    measured ``theta <= bound^(1/n)``.
    """
    Mn = np.linalg.matrix_power(KB.matrix, n)
    L = uniform_positivity(Mn)
    vals = np.sort(np.abs(np.linalg.eigvals(KB.matrix)))[::-1]
    lam0 = vals[0]
    theta = vals[1] / lam0 if len(vals) > 1 else 0.0
    surv = Mn.sum(axis=1).min() / lam0 ** n
    bound_n = L - surv
    bound = max(bound_n, 0.0) ** (1.0 / n) if np.isfinite(bound_n) else np.inf
    return _cert("spectral_gap", {"n": n, "L": L, "lambda0": lam0, "survival": surv},
                 bound, theta)


def oscillation_bound(KB, n=1, L=None, M=1.0):
    """``|phi_0 - 1| <= M L(n)^2 sup_x |1 - KB^n(x, B) / lambda_0^n|``.

    ``phi_0`` is normalized by ``pi_0 @ phi_0 = 1`` with ``pi_0`` a
    probability vector.
    """
    Mn = np.linalg.matrix_power(KB.matrix, n)
    L = uniform_positivity(Mn) if L is None else L
    q = mk.qsd(KB)
    ratio = float(np.max(np.abs(1 - Mn.sum(axis=1) / q.lambda0 ** n)))
    bound = M * L ** 2 * ratio if ratio > 0 else 0.0
    measured = float(np.max(np.abs(q.phi - 1)))
    return _cert("oscillation", {"n": n, "L": L, "M": M, "survival_ratio": ratio},
                 bound, measured)


def _opnorm(A):
    return float(np.max(np.abs(A).sum(axis=1), initial=0.0))


def laplace_norm_bound(u, e1, e2, m=1):
    """``(1 + (1 - e^{-u}) e1 / (1 - (1 - e^{-u}) e2))^m - 1``.

    Bounds ``|(K^u)^m - (K^0)^m|`` given ``e1 = sup_M E[tau+_M - 1]`` and
    ``e2 = sup_{M^c} E[tau+_M]``; for ``m = 1`` it is the bound on
    ``|K^u - K^0|`` itself.

    Raises
    ------
    LaplaceDivergence
        If ``(1 - e^{-u}) e2 >= 1``.
    """
    g = 1.0 - np.exp(-u)
    if g * e2 >= 1:
        raise LaplaceDivergence("(1 - e^{-u}) E[tau+] >= 1")
    return (1.0 + g * e1 / (1.0 - g * e2)) ** m - 1.0


def norm_certificates(K, structure, u, m=1, k=None):
    """Norm bounds on ``M = M_{k+1}`` (default: all balls).

    * ``NormKuK0``: ``|K^u - K^0| <= (1 - e^{-u}) e1 / (1 - (1 - e^{-u}) e2)``
      with ``e1 = sup_M E[tau+_M - 1]``, ``e2 = sup_{M^c} E[tau+_M]``;
    * ``NormKuK0Iterated``: ``|(K^u)^m - (K^0)^m| <= (1 + bound)^m - 1``;
    * ``NormK0KStar``: ``|(K^0)^m - (K*)^m| <= max_i R_i``; the per-ball
      ``R_i`` and their ingredients are kept in the inputs.

    Raises
    ------
    LaplaceDivergence
        If ``(1 - e^{-u}) e2 >= 1`` or ``K^u`` diverges.
    """
    k = structure.N - 1 if k is None else k
    Mset = structure.M(k + 1)
    t_ret = mk.expected_hitting_time(K, Mset, mode="return")
    inM = np.isin(K.cells, Mset)
    e1 = float(t_ret[inM].max() - 1.0)
    e2 = float(t_ret[~inM].max()) if np.any(~inM) else 0.0
    b1 = laplace_norm_bound(u, e1, e2)
    K0 = mk.trace(K, Mset)
    Ku = mk.laplace_kernel(K, Mset, u)
    certs = [
        _cert("NormKuK0", {"u": u, "e1": e1, "e2": e2}, b1, _opnorm(Ku - K0.matrix)),
        _cert("NormKuK0Iterated", {"u": u, "m": m, "e1": e1, "e2": e2},
              laplace_norm_bound(u, e1, e2, m),
              _opnorm(np.linalg.matrix_power(Ku, m) - np.linalg.matrix_power(K0.matrix, m))),
    ]
    _, qsds = build_P(K0, structure, k)
    Ks = finite_rank_kernel(K0, structure, qsds, k)
    diff = np.linalg.matrix_power(K0.matrix, m) - np.linalg.matrix_power(Ks.matrix, m)
    inputs = {"m": m}
    R = []
    for i, (b, q) in enumerate(zip(structure.balls[:k + 1], qsds)):
        KB = mk.kill(K0, b)
        vals = np.sort(np.abs(np.linalg.eigvals(KB.matrix)))[::-1]
        lam1 = float(vals[1]) if len(vals) > 1 else 0.0
        osc = float(np.max(np.abs(q.phi - 1)))
        rest = np.setdiff1d(Mset, b)
        p_out = float((K0.matrix @ mk.committor(K0, rest, b))[K0.positions(b)].max())
        p_in = float((K0.matrix @ mk.committor(K0, b, rest))[K0.positions(rest)].max())
        geo = m if lam1 == 1 else (1 - lam1 ** m) / (1 - lam1)
        R.append(osc + 2 * lam1 ** m + 2 * geo * p_out + m * (m - 1) * p_out * p_in)
        inputs.update({f"R_{i + 1}": R[-1], f"oscillation_{i + 1}": osc,
                       f"lambda1_{i + 1}": lam1, f"p_out_{i + 1}": p_out, f"p_in_{i + 1}": p_in})
    certs.append(_cert("NormK0KStar", inputs, max(R), _opnorm(diff)))
    return certs
