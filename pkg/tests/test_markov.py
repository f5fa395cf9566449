import numpy as np
import pytest

from randpoincare import markov as mk
from randpoincare.errors import (
    DefectiveCluster,
    EmptySet,
    LaplaceDivergence,
    NoGap,
    NonReturning,
    SingularSystem,
    ZeroEigenfunction,
)

from conftest import K3, kernel, random_stochastic

K2 = [[0.8, 0.1], [0.1, 0.8]]


def gambler():
    # states 0..3, absorbing at both ends, up 0.4 / down 0.6 inside
    return kernel([[1, 0, 0, 0], [0.6, 0, 0.4, 0], [0, 0.6, 0, 0.4], [0, 0, 0, 1]])


class TestSpectral:
    def test_three_state(self, k3):
        sp = mk.spectral_decomposition(k3)
        np.testing.assert_allclose(sp.values, [1.0, 0.7, 0.7], atol=1e-12)
        np.testing.assert_allclose(sp.left[0], [1 / 3] * 3, atol=1e-12)
        np.testing.assert_allclose(sp.right[0], 1.0, atol=1e-12)
        np.testing.assert_allclose(sp.left @ sp.right.T, np.eye(3), atol=1e-10)

    def test_identity(self):
        sp = mk.spectral_decomposition(kernel(np.eye(4)))
        np.testing.assert_allclose(sp.values, 1.0)

    def test_stochastic_leading_pair(self):
        rng = np.random.default_rng(0)
        for n in (5, 30):
            sp = mk.spectral_decomposition(kernel(random_stochastic(rng, n)), 4)
            assert sp.values[0] == pytest.approx(1.0, abs=1e-10)
            assert np.ptp(sp.right[0]) <= 1e-8
            assert sp.left[0].min() >= -1e-12
            assert sp.left[0].sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(np.diff(np.abs(sp.values)) <= 1e-12)

    def test_complex_pair(self):
        # rotation plus laziness has complex eigenvalues
        P = 0.5 * np.eye(3) + 0.5 * np.roll(np.eye(3), 1, axis=1)
        sp = mk.spectral_decomposition(kernel(P))
        assert np.iscomplexobj(sp.values)
        assert sp.values[0] == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(abs(sp.values[1]), 0.5, atol=1e-12)
        np.testing.assert_allclose(sp.left @ sp.right.T, np.eye(3), atol=1e-10)

    def test_count(self, k3):
        assert len(mk.spectral_decomposition(k3, 1).values) == 1

    def test_jordan_block(self):
        J = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.0, 0.0, 1.0]])
        with pytest.raises(DefectiveCluster):
            mk.spectral_decomposition(kernel(J))


class TestKillTrace:
    def test_kill(self, k3):
        k = mk.kill(k3, [0, 1])
        np.testing.assert_array_equal(k.matrix, K2)
        np.testing.assert_allclose(k.kill_column, [0.1, 0.1])
        np.testing.assert_array_equal(k.cells, [0, 1])

    def test_kill_everything_is_identity(self, k3):
        np.testing.assert_array_equal(mk.kill(k3, [0, 1, 2]).matrix, K3)

    def test_kill_empty(self, k3):
        with pytest.raises(EmptySet):
            mk.kill(k3, [])

    def test_trace(self, k3):
        np.testing.assert_allclose(mk.trace(k3, [0, 1]).matrix, [[0.85, 0.15], [0.15, 0.85]],
                                   atol=1e-15)
        np.testing.assert_allclose(mk.trace(k3, [0]).matrix, [[1.0]], atol=1e-15)
        np.testing.assert_allclose(mk.trace(k3, [0, 1, 2]).matrix, K3)

    def test_trace_non_returning(self):
        K = kernel([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.0, 0.0, 1.0]])
        with pytest.raises(NonReturning):
            mk.trace(K, [0])

    def test_trace_preserves_stochasticity(self):
        rng = np.random.default_rng(3)
        K = kernel(random_stochastic(rng, 12, 0.5))
        T = mk.trace(K, [1, 4, 5, 9])
        np.testing.assert_allclose(T.matrix.sum(axis=1), 1.0, atol=1e-12)


class TestQsd:
    def test_scalar(self):
        q = mk.qsd(kernel([[0.9]]))
        assert q.lambda0 == pytest.approx(0.9, abs=1e-12)
        np.testing.assert_allclose(q.pi, [1.0])
        np.testing.assert_allclose(q.phi, [1.0])

    def test_symmetric_pair(self):
        q = mk.qsd(kernel(K2))
        assert q.lambda0 == pytest.approx(0.9, abs=1e-12)
        np.testing.assert_allclose(q.pi, [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(q.phi, [1.0, 1.0], atol=1e-12)
        assert q.pi @ q.phi == pytest.approx(1.0, abs=1e-10)
        assert q.residual <= 1e-10

    def test_geometric_exit(self):
        rng = np.random.default_rng(5)
        K = kernel(random_stochastic(rng, 10))
        KA = mk.kill(K, [0, 2, 3, 5, 7])
        q = mk.qsd(KA)
        out = KA.kill_column
        v = q.pi.copy()
        for n in range(1, 51):
            assert v @ out == pytest.approx(q.lambda0 ** (n - 1) * (1 - q.lambda0), abs=1e-12)
            v = v @ KA.matrix

    def test_reducible(self):
        with pytest.raises(NoGap):
            mk.qsd(kernel([[0.5, 0.0], [0.0, 0.5]]))

    def test_periodic_does_not_converge(self):
        with pytest.raises(NoGap):
            mk.qsd(kernel([[0.0, 0.9], [0.5, 0.0]]), cap=1000)

    def test_principal_eigenvalue_reducible(self):
        assert mk.principal_eigenvalue(kernel([[0.5, 0.0], [0.0, 0.7]])) == pytest.approx(0.7)


class TestDoob:
    def test_symmetric_pair(self):
        D = mk.doob_transform(kernel(K2))
        np.testing.assert_allclose(D.matrix, [[8 / 9, 1 / 9], [1 / 9, 8 / 9]], atol=1e-12)
        assert not D.killed

    def test_stochastic_unchanged(self, k3):
        np.testing.assert_allclose(mk.doob_transform(k3).matrix, K3, atol=1e-12)

    def test_spectrum_ratio(self):
        rng = np.random.default_rng(8)
        KA = mk.kill(kernel(random_stochastic(rng, 9)), [0, 1, 2, 4, 6])
        q = mk.qsd(KA)
        D = mk.doob_transform(KA, q)
        np.testing.assert_allclose(D.matrix.sum(axis=1), 1.0, atol=1e-10)
        a = np.sort_complex(np.linalg.eigvals(D.matrix))
        b = np.sort_complex(np.linalg.eigvals(KA.matrix) / q.lambda0)
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_zero_eigenfunction(self):
        q = mk.QSD(0.9, np.array([0.5, 0.5]), np.array([1.0, 0.0]), 0.0, 1)
        with pytest.raises(ZeroEigenfunction):
            mk.doob_transform(kernel(K2), q)


class TestCommittor:
    def test_symmetry(self, k3):
        h = mk.committor(k3, [0], [2])
        np.testing.assert_allclose(h, [1.0, 0.5, 0.0], atol=1e-15)

    def test_gamblers_ruin(self):
        h = mk.committor(gambler(), [0], [3])
        # ruin probability from 1 with q/p = 1.5
        assert h[1] == pytest.approx(1 - (1 - 1.5) / (1 - 1.5 ** 3), abs=1e-12)
        assert h[1] == pytest.approx(0.789474, abs=1e-6)
        assert h[0] == 1.0 and h[3] == 0.0

    def test_return_committor(self, k3):
        assert mk.return_committor(k3, [1, 0, 0], [2], [0]) == pytest.approx(0.15, abs=1e-15)
        # off A u B the first-step form equals the plain committor
        assert mk.return_committor(k3, [0, 1, 0], [0], [2]) == pytest.approx(0.5, abs=1e-15)

    def test_complementarity(self, k3):
        mu = [0.3, 0.0, 0.7]
        a = mk.return_committor(k3, mu, [0], [2])
        b = mk.return_committor(k3, mu, [2], [0])
        assert a + b == pytest.approx(1.0, abs=1e-15)

    def test_errors(self, k3):
        with pytest.raises(ValueError):
            mk.committor(k3, [0, 1], [1])
        with pytest.raises(EmptySet):
            mk.committor(k3, [], [1])
        trap = kernel([[1, 0, 0], [0, 1, 0], [0, 0, 1]])
        with pytest.raises(SingularSystem):
            mk.committor(trap, [0], [2])


class TestHittingTime:
    def test_geometric(self, k3):
        t = mk.expected_hitting_time(k3, [0, 1])
        np.testing.assert_allclose(t, [0, 0, 5], atol=1e-12)

    def test_exit_from_pair(self, k3):
        # leaving {0, 1} for 2 happens at rate 0.1, so 1 / (1 - 0.9)
        t = mk.expected_hitting_time(k3, [2])
        np.testing.assert_allclose(t[:2], 10.0, atol=1e-12)

    def test_return_mode(self, k3):
        t = mk.expected_hitting_time(k3, [2], mode="return")
        # Kac: stationary mass 1/3 gives mean return time 3
        assert t[2] == pytest.approx(3.0, abs=1e-12)

    def test_errors(self, k3):
        with pytest.raises(SingularSystem):
            mk.expected_hitting_time(kernel([[1, 0], [0, 1]]), [0])
        with pytest.raises(SingularSystem):
            mk.expected_hitting_time(kernel(K2), [0])
        with pytest.raises(ValueError):
            mk.expected_hitting_time(k3, [0], mode="mean")


class TestLaplace:
    def test_zero_is_trace(self, k3):
        np.testing.assert_allclose(mk.laplace_kernel(k3, [0, 1], 0.0),
                                   mk.trace(k3, [0, 1]).matrix, atol=1e-15)

    def test_example(self, k3):
        Ku = mk.laplace_kernel(k3, [0, 1], np.log(1.1))
        assert Ku[0, 1] == pytest.approx(0.1 + 1.1 * 0.1 * 0.1 / (1 - 0.88), abs=1e-12)
        assert Ku[0, 1] == pytest.approx(0.191667, abs=1e-6)

    def test_truncated_series(self, k3):
        # sum over excursion lengths of e^{u (n - 1)} P(return at n to y)
        u = 0.1
        M = np.asarray(K3)
        series = M[np.ix_([0, 1], [0, 1])].copy()
        for n in range(2, 400):
            series += (np.exp(u * (n - 1)) * M[[0, 1]][:, [2]]
                       * M[2, 2] ** (n - 2) @ M[[2]][:, [0, 1]])
        np.testing.assert_allclose(mk.laplace_kernel(k3, [0, 1], u), series, atol=1e-12)

    def test_monotone(self, k3):
        us = np.linspace(-1, 0.2, 12)
        vals = np.array([mk.laplace_kernel(k3, [0, 1], u) for u in us])
        assert np.all(np.diff(vals, axis=0) >= -1e-15)

    def test_divergence(self, k3):
        with pytest.raises(LaplaceDivergence):
            mk.laplace_kernel(k3, [0, 1], np.log(1 / 0.8))

    def test_complex_argument(self, k3):
        Ku = mk.laplace_kernel(k3, [0, 1], 0.1 + 0.2j)
        assert np.iscomplexobj(Ku)


class TestFeynmanKac:
    def test_dirichlet_problem(self):
        rng = np.random.default_rng(11)
        K = kernel(random_stochastic(rng, 15))
        A = [0, 3, 7]
        u = 0.05
        g = rng.normal(size=3)
        psi = mk.feynman_kac(K, A, g, u)
        C = np.setdiff1d(np.arange(15), A)
        np.testing.assert_allclose((K.matrix @ psi)[C], np.exp(-u) * psi[C], atol=1e-10)
        np.testing.assert_array_equal(psi[A], g)

    def test_eigenproblem_equivalence(self):
        rng = np.random.default_rng(12)
        K = kernel(random_stochastic(rng, 12))
        sp = mk.spectral_decomposition(K, 3)
        A = np.arange(8)
        C = np.arange(8, 12)
        rho = mk.spectral_radius(K.matrix[np.ix_(C, C)])
        for lam, phi in zip(sp.values, sp.right):
            if abs(lam) <= rho:
                continue
            u = -np.log(lam + 0j)
            Ku = mk.laplace_kernel(K, A, u)
            np.testing.assert_allclose(Ku @ phi[A], lam * phi[A], atol=1e-8)

    def test_resolvent(self, k3):
        r = mk.resolvent_solve(k3, [0, 1], np.ones(3))
        np.testing.assert_allclose(r, mk.expected_hitting_time(k3, [0, 1]))


class TestReturnBounds:
    def test_tail_probability(self, k3):
        np.testing.assert_allclose(mk.tail_probability(k3, [2], 1), 1 - K3[:, 2])
        np.testing.assert_allclose(mk.tail_probability(k3, [2], 3),
                                   [0.9 ** 3, 0.9 ** 3, 0.2 * 0.9 ** 2], atol=1e-15)

    def test_geometric_bound_dominates(self, k3):
        exact = mk.expected_hitting_time(k3, [2], mode="return")
        for n0 in (1, 5, 20):
            assert mk.geometric_return_bound(k3, [2], n0) >= exact[:2].max() - 1e-12

    def test_splitting_bound(self):
        rng = np.random.default_rng(2)
        K = kernel(random_stochastic(rng, 10))
        bound, exact = mk.splitting_return_bound(K, [0, 1], [5, 6], [8])
        assert bound >= exact - 1e-12
