import numpy as np
import pytest
from scipy.integrate import solve_ivp

from randpoincare import poincare as pc
from randpoincare import sde
from randpoincare.errors import EmptyRow, Timeout

from conftest import K3, kernel

# sigma = 0 radial flow r' = -V'(r) from r = 1.2 over one and two periods (solve_ivp, rtol 1e-12)
FLOW_1P2_ONE_PERIOD = 1.0094573614817253
FLOW_1P2_TWO_PERIODS = 1.0002238748504033
# P(|r(2 pi) - 1| <= 0.3 | r(0) = 1) for dr = -V' dt + 0.1 dW, 2e5 paths at dt = 2e-3 (numpy)
ONE_RETURN_MASS_NEAR_INNER = 0.982


def deterministic_return(r0):
    _, dV, _ = sde.radial_potential(sde.REFERENCE_ROOTS)
    sol = solve_ivp(lambda t, r: -dV(r), (0, 2 * np.pi), [r0], rtol=1e-10, atol=1e-12)
    return sol.y[0, -1]


class TestGrid:
    def test_partition(self):
        g = pc.Grid(0.5, 3.0, 200)
        c = g.centers()[:, 0]
        assert g.size == 200
        assert g.volume == pytest.approx(2.5 / 200)
        assert c[0] == pytest.approx(0.5 + 2.5 / 400)
        np.testing.assert_array_equal(g.locate(c[:, None]), np.arange(200))

    def test_locate_clips(self):
        g = pc.Grid(0.0, 1.0, 10)
        np.testing.assert_array_equal(g.locate([[-1.0], [0.0], [0.999], [5.0]]), [0, 0, 9, 9])

    def test_two_dimensional(self):
        g = pc.Grid((0, 0), (1, 2), (2, 4))
        assert g.size == 8
        assert g.locate([[0.75, 1.9]])[0] == 7
        np.testing.assert_array_equal(g.edge_distance(), [0, 0, 0, 0, 0, 0, 0, 0])

    def test_invalid(self):
        with pytest.raises(ValueError):
            pc.Grid(1.0, 0.0, 5)
        with pytest.raises(ValueError):
            pc.Grid((0, 0), (1, 1), 3)


class TestSampleChain:
    def test_fixed_point(self):
        ch = pc.sample_chain(sde.reference_model(sigma=0.0), [1.0], 20, 0.01, 0)
        np.testing.assert_allclose(ch.points[:, 0], 1.0, atol=1e-9)

    def test_monotone_contraction(self):
        ch = pc.sample_chain(sde.reference_model(sigma=0.0), [1.2], 6, 0.01, 0)
        x = ch.points[:, 0]
        assert np.all(np.diff(x) <= 0) and np.all(x >= 1.0 - 1e-12)
        assert x[1] == pytest.approx(FLOW_1P2_ONE_PERIOD, abs=2e-4)
        assert x[2] == pytest.approx(FLOW_1P2_TWO_PERIODS, abs=2e-4)

    def test_return_times(self):
        ch = pc.sample_chain(sde.reference_model(sigma=0.0), [1.0], 3, 0.01, 0)
        np.testing.assert_allclose(ch.crossing_times, 2 * np.pi * np.arange(4), atol=1e-3)

    def test_concentration_near_stable_orbit(self):
        # at sigma = 0.05 the inner cycle is a trap for 1e4 returns
        ch = pc.sample_chain(sde.reference_model(sigma=0.05), [1.0], 10_000, 0.01, 0)
        assert np.mean(np.abs(ch.points[:, 0] - 1.0) <= 0.1) > 0.9

    def test_killing_ends_chain(self):
        m = sde.reference_model(sigma=0.5, confinement="killed")
        ch = pc.sample_chain(m, [2.9], 200, 0.01, 1)
        assert ch.killed_at == len(ch.points)
        assert len(ch.points) < 201

    def test_timeout(self):
        with pytest.raises(Timeout):
            pc.sample_chain(sde.reference_model(sigma=0.0), [1.0], 2, 0.01, 0, max_time=1.0)


class TestBuildKernel:
    def test_row_sums(self, small_reference):
        _, K, _ = small_reference
        np.testing.assert_allclose(K.matrix.sum(axis=1) + K.kill_column, 1.0, atol=1e-12)
        assert np.all((K.matrix >= 0) & (K.matrix <= 1))
        assert not K.killed
        assert np.all(K.sample_counts >= 200)

    def test_rows_near_inner_orbit(self, small_reference):
        _, K, _ = small_reference
        c = K.centers()[:, 0]
        near = np.flatnonzero(np.abs(c - 1.0) < 0.05)
        within = np.abs(c - 1.0) <= 0.3
        assert len(near) >= 2
        mass = K.matrix[np.ix_(near, within)].sum(axis=1)
        assert abs(mass.mean() - ONE_RETURN_MASS_NEAR_INNER) < 0.01
        assert np.all(mass >= 0.96)

    def test_deterministic_rows(self):
        g = pc.Grid(0.5, 3.0, 50)
        K = pc.build_kernel(sde.reference_model(sigma=0.0), g, 100, dt=0.01, seed=0)
        assert np.all(np.sort(K.matrix, axis=1)[:, -1] == 1.0)
        target = g.locate([[deterministic_return(r)] for r in g.centers()[:, 0]])
        # Euler error can shift a return point across a cell edge
        assert np.all(np.abs(K.matrix.argmax(axis=1) - target) <= 1)
        assert np.mean(K.matrix.argmax(axis=1) == target) > 0.9

    def test_reproducible(self):
        m, g = sde.reference_model(sigma=0.2), pc.Grid(0.5, 3.0, 10)
        a = pc.build_kernel(m, g, 100, seed=4)
        b = pc.build_kernel(m, g, 100, seed=4, threads=2, rows_per_task=3)
        c = pc.build_kernel(m, g, 100, seed=5)
        assert np.array_equal(a.matrix, b.matrix)
        assert not np.array_equal(a.matrix, c.matrix)

    def test_killed_variant(self):
        m = sde.reference_model(sigma=0.4, confinement="killed")
        K = pc.build_kernel(m, pc.Grid(0.5, 3.0, 10), 100, seed=2)
        assert K.killed
        assert K.kill_column[0] > 0 or K.kill_column[-1] > 0
        np.testing.assert_allclose(K.matrix.sum(axis=1) + K.kill_column, 1.0, atol=1e-12)

    def test_empty_row(self):
        m = sde.reference_model(sigma=0.1)
        with pytest.raises(EmptyRow):
            pc.build_kernel(m, pc.Grid(0.5, 3.0, 4), 100, max_time=1.0)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            pc.build_kernel(sde.reference_model(), pc.Grid(0.5, 3.0, 4), 50)

    def test_tv_distance_square_root_law(self):
        m, g = sde.reference_model(sigma=0.15), pc.Grid(0.5, 3.0, 20)

        def median_tv(n):
            a = pc.build_kernel(m, g, n, seed=10).matrix
            b = pc.build_kernel(m, g, n, seed=11).matrix
            return np.median(0.5 * np.abs(a - b).sum(axis=1))

        ratio = median_tv(200) / median_tv(800)
        assert 1.5 < ratio < 2.7


class TestIterate:
    def test_three_state_square(self):
        K2 = pc.iterate_kernel(kernel(K3), 2)
        np.testing.assert_allclose(np.diag(K2.matrix), 0.66, atol=1e-15)

    def test_identity(self):
        K = kernel(K3)
        np.testing.assert_array_equal(pc.iterate_kernel(K, 1).matrix, K.matrix)

    def test_associativity(self, small_reference):
        _, K, _ = small_reference
        for m in (1, 3):
            lhs = pc.iterate_kernel(pc.iterate_kernel(K, 2), m).matrix
            rhs = pc.iterate_kernel(K, 2 * m).matrix
            assert np.max(np.abs(lhs - rhs)) <= 1e-12

    def test_kill_mass_propagates(self):
        K = kernel([[0.5, 0.3], [0.2, 0.6]])
        K3_ = pc.iterate_kernel(K, 3)
        np.testing.assert_allclose(K3_.matrix, np.linalg.matrix_power(K.matrix, 3))
        np.testing.assert_allclose(K3_.matrix.sum(axis=1) + K3_.kill_column, 1.0, atol=1e-15)

    def test_negative(self):
        with pytest.raises(ValueError):
            pc.iterate_kernel(kernel(K3), -1)


class TestPersistence:
    def test_json_roundtrip(self, small_reference, tmp_path):
        _, K, _ = small_reference
        path = tmp_path / "k.json"
        pc.save_kernel(K, path)
        L = pc.load_kernel(path)
        assert np.array_equal(L.matrix, K.matrix)
        assert np.array_equal(L.kill_column, K.kill_column)
        assert np.array_equal(L.sample_counts, K.sample_counts)
        assert L.grid == K.grid and L.sigma == K.sigma
        assert L.metadata["seed"] == 7

    def test_rejects_foreign_json(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            pc.load_kernel(path)

    def test_csv(self, tmp_path):
        K = kernel(K3)
        path = tmp_path / "k.csv"
        pc.write_kernel_csv(K, path)
        rows = path.read_text().splitlines()
        assert rows[0] == "cell,center_0,p_0,p_1,p_2,kill"
        assert len(rows) == 4
        vals = [float(v) for v in rows[1].split(",")]
        assert vals[2:5] == [0.8, 0.1, 0.1]
