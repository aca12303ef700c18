"""Error-bounding sequences: Lyapunov levels, slab recursion, terminal sets."""

import numpy as np
import pytest

from refgov.bounding import (direction_set, ellipsoidal_sequence,
                             polyhedral_sequence, rho_bound,
                             scaled_base_overbound, solve_dlyap, terminal_set)
from refgov.errors import GeometryError, StabilityError, VerificationError
from refgov.models import PlantModel, build_observer, spectral_radius
from refgov.sets import Box, Ellipsoid, Polytope, subset_of


def spring_damper_observer():
    plant = PlantModel.from_continuous(
        [[0.0, 1.0], [-1.44, -0.24]], [[0.0], [1.0]], [[1.0, 0.0]], 0.2)
    return build_observer(plant, [[0.3796], [0.2524], [0.2491]])


def random_schur(rng, n, radius=0.9):
    A = rng.normal(size=(n, n))
    return A * (radius * rng.uniform(0.3, 1.0) / max(spectral_radius(A), 1e-9))


class TestSolveDlyap:
    def test_zero_matrix(self):
        np.testing.assert_allclose(solve_dlyap(np.zeros((3, 3))), np.eye(3))

    def test_scalar_geometric_series(self):
        P = solve_dlyap(np.array([[0.5]]))
        assert P[0, 0] == pytest.approx(4.0 / 3.0)

    def test_matches_truncated_series(self):
        rng = np.random.default_rng(41)
        for _ in range(20):
            n = int(rng.integers(1, 6))
            A = random_schur(rng, n, radius=0.8)
            P = solve_dlyap(A)
            # series oracle: sum of (A')^i A^i
            S = np.zeros((n, n))
            M = np.eye(n)
            for _ in range(400):
                S += M.T @ M
                M = M @ A
            np.testing.assert_allclose(P, S, atol=1e-8)

    def test_eigenvalues_at_least_one(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            A = random_schur(rng, int(rng.integers(1, 7)))
            assert np.linalg.eigvalsh(solve_dlyap(A))[0] >= 1 - 1e-9

    def test_unstable_rejected(self):
        with pytest.raises(StabilityError):
            solve_dlyap(np.array([[1.0]]))


class TestRhoBound:
    def test_zero_increment_set(self):
        obs = spring_damper_observer()
        P = solve_dlyap(obs.A_bar)
        assert rho_bound(P, obs.A_bar, obs.B_bar, 2.0,
                         Box([0], [0])) == pytest.approx(0.0)

    def test_scalar_arithmetic(self):
        A = np.array([[0.5]])
        B = np.array([[1.0]])
        P = solve_dlyap(A)  # 4/3
        # c ||A'PBw||^2 + w B'PB w at w = +-1 with c = 2
        val = rho_bound(P, A, B, 2.0, Box([-1], [1]))
        assert val == pytest.approx(2 * (0.5 * 4 / 3) ** 2 + 4 / 3)

    def test_vertex_evaluation_matches_grid(self):
        obs = spring_damper_observer()
        P = solve_dlyap(obs.A_bar)
        c = 3.0
        W = Box([-0.001], [0.001])
        val = rho_bound(P, obs.A_bar, obs.B_bar, c, W)
        grid = np.linspace(-0.001, 0.001, 10001)[:, None]
        G = obs.A_bar.T @ P @ obs.B_bar
        M = obs.B_bar.T @ P @ obs.B_bar
        dense = np.max(c * np.sum((grid @ G.T) ** 2, axis=1)
                       + np.einsum("ij,jk,ik->i", grid, M, grid))
        assert val == pytest.approx(dense, abs=1e-12)


class TestEllipsoidalSequence:
    def test_point_initial_set_sits_at_floor(self):
        obs = spring_damper_observer()
        seq = ellipsoidal_sequence(obs, Box([0, 0, 0], [0, 0, 0]),
                                   Box([-0.001], [0.001]), c=2.0, n_bar=50)
        meta = seq.meta
        assert meta["xi"][0] == pytest.approx(meta["floor"])
        assert np.allclose(meta["xi"], meta["floor"])

    def test_paper_scale_levels_converge_within_one_percent(self):
        obs = spring_damper_observer()
        seq = ellipsoidal_sequence(obs, Box([0, 0, -0.4], [0, 0, 0.4]),
                                   Box([-0.001], [0.001]), c=5.0, n_bar=200)
        meta = seq.meta
        assert np.all(np.diff(meta["xi"]) <= 1e-12)
        assert meta["xi"][200] <= 1.01 * meta["floor"]

    def test_monte_carlo_levels_never_exceeded(self):
        obs = spring_damper_observer()
        E0 = Box([0, 0, -0.4], [0, 0, 0.4])
        Wt = Box([-0.001], [0.001])
        seq = ellipsoidal_sequence(obs, E0, Wt, c=2.0, n_bar=60)
        P = seq.omegas[0].P
        xi = seq.meta["xi"]
        rng = np.random.default_rng(43)
        E = E0.sample(rng, 1000)
        for k in range(61):
            V = np.einsum("ij,jk,ik->i", E, P, E)
            assert np.max(V) <= xi[k] + 1e-12
            E = E @ obs.A_bar.T + Wt.sample(rng, 1000) @ obs.B_bar.T

    def test_nesting(self):
        # same shape matrix for every set, so nesting == monotone levels
        obs = spring_damper_observer()
        seq = ellipsoidal_sequence(obs, Box([0, 0, -0.4], [0, 0, 0.4]),
                                   Box([-0.001], [0.001]), c=2.0, n_bar=30)
        for k in range(30):
            a, b = seq.at(k), seq.at(k + 1)
            np.testing.assert_array_equal(a.P, b.P)
            assert b.level <= a.level + 1e-15


class TestPolyhedralSequence:
    def test_nilpotent_error_dies(self):
        # A_bar nilpotent and no increments: the error is exactly zero after
        # two steps, so all slab offsets vanish
        plant = PlantModel([[0.0]], [[1.0]], [[1.0]], 1.0)
        obs = build_observer(plant, [[1.0], [1.0]])  # A_bar = [[-1,1],[-1,1]]
        np.testing.assert_allclose(obs.A_bar @ obs.A_bar, 0.0, atol=1e-14)
        dirs = direction_set(2, 8, seed=1)
        seq = polyhedral_sequence(obs, Box([-1, -1], [1, 1]), Box([0], [0]),
                                  dirs, n_bar=5, tail_window=(4, 5),
                                  verify_until=8)
        y = seq.meta["y_e_max"]
        assert np.allclose(y[2:], 0.0, atol=1e-15)
        assert np.max(np.abs(seq.at(3).vertex_array())) <= 1e-12

    def test_single_step_recursion_unrolled(self):
        obs = spring_damper_observer()
        E0 = Box([-0.1, -0.2, -0.3], [0.1, 0.2, 0.3])
        Wt = Box([-0.01], [0.01])
        dirs = direction_set(3, 10, seed=2)
        seq = polyhedral_sequence(obs, E0, Wt, dirs, n_bar=3,
                                  tail_window=(3, 3), verify_until=3)
        y = seq.meta["y_e_max"]
        V0 = E0.vertex_array()
        Vw = Wt.vertex_array()
        expect = (np.max(dirs @ obs.A_bar @ V0.T, axis=1)
                  + np.max((dirs @ obs.B_bar) @ Vw.T, axis=1))
        np.testing.assert_allclose(y[1], expect, atol=1e-14)

    def test_monte_carlo_containment(self):
        obs = spring_damper_observer()
        E0 = Box([0, 0, -0.15], [0, 0, 0.15])
        Wt = Box([-0.001], [0.001])
        dirs = direction_set(3, 40, seed=3)
        seq = polyhedral_sequence(obs, E0, Wt, dirs, n_bar=200,
                                  tail_window=(200, 200), verify_until=400)
        rng = np.random.default_rng(44)
        E = E0.sample(rng, 1000)
        A = np.vstack([dirs, -dirs])
        for k in range(401):
            S = seq.at(k)
            if isinstance(S, Box):
                ok = np.all((E >= S.lower - 1e-9) & (E <= S.upper + 1e-9), axis=1)
            else:
                ok = S.contains_batch(E, tol=1e-9)
            assert np.all(ok), f"escape at step {k}"
            E = E @ obs.A_bar.T + Wt.sample(rng, 1000) @ obs.B_bar.T

    def test_asymmetric_sets_rejected(self):
        obs = spring_damper_observer()
        dirs = direction_set(3, 6, seed=4)
        with pytest.raises(GeometryError, match="symmetric"):
            polyhedral_sequence(obs, Box([0, 0, -0.1], [0, 0, 0.3]),
                                Box([-0.001], [0.001]), dirs, n_bar=3,
                                tail_window=(3, 3), verify_until=3)


class TestTerminalSet:
    def test_constant_tail(self):
        S = Box([-1, -1], [1, 1]).to_polytope()
        out = terminal_set([S], [S, S])
        assert out is S

    def test_nested_boxes_give_outer(self):
        inner = Box([-0.5, -0.5], [0.5, 0.5]).to_polytope()
        outer = Box([-1, -1], [1, 1]).to_polytope()
        om = terminal_set([inner, outer], [inner], mode="hull")
        for a in np.vstack([np.eye(2), -np.eye(2)]):
            assert om.support(a) == pytest.approx(1.0, abs=1e-9)

    def test_envelope_mode(self):
        A = np.vstack([np.eye(2), -np.eye(2)])
        s1 = Polytope(A, np.array([1.0, 2.0, 1.0, 2.0]))
        s2 = Polytope(A, np.array([2.0, 1.0, 2.0, 1.0]))
        om = terminal_set([s1, s2], [], mode="envelope")
        np.testing.assert_allclose(om.b, [2.0, 2.0, 2.0, 2.0])

    def test_verification_failure_reports_index(self):
        small = Box([-1, -1], [1, 1]).to_polytope()
        big = Box([-2, -2], [2, 2]).to_polytope()
        with pytest.raises(VerificationError, match="offset 1"):
            terminal_set([small], [small, big])


class TestScaledBaseOverbound:
    def test_unit_ratios_leave_base(self):
        base = Box([-1, -2], [1, 2]).to_polytope()
        levels = base.b
        out = scaled_base_overbound(base, levels, levels)
        np.testing.assert_allclose(out.b, base.b)

    def test_uniform_doubling(self):
        base = Box([-1, -1], [1, 1]).to_polytope()
        out = scaled_base_overbound(base, 2 * base.b, base.b)
        np.testing.assert_allclose(out.b, 2 * base.b)
        np.testing.assert_allclose(np.abs(out.vertices), 2.0)

    def test_overbounds_slab_set(self):
        rng = np.random.default_rng(45)
        for _ in range(20):
            dirs = direction_set(3, 12, seed=int(rng.integers(1e6)))
            levels = rng.uniform(0.5, 1.5, size=12)
            y = rng.uniform(0.2, 2.0, size=12)
            A = np.vstack([dirs, -dirs])
            base = Polytope(A, np.concatenate([levels, levels]))
            base.vertex_array()
            slab = Polytope(A, np.concatenate([y, y]))
            out = scaled_base_overbound(base, np.concatenate([y, y]),
                                        np.concatenate([levels, levels]))
            assert subset_of(slab, out, tol=1e-7)


class TestDirectionSet:
    def test_axes_included_and_deterministic(self):
        D1 = direction_set(4, 20, seed=9)
        D2 = direction_set(4, 20, seed=9)
        np.testing.assert_array_equal(D1, D2)
        np.testing.assert_allclose(D1[:4], np.eye(4))
        np.testing.assert_allclose(np.linalg.norm(D1, axis=1), 1.0, atol=1e-12)

    def test_too_few_rejected(self):
        with pytest.raises(GeometryError):
            direction_set(5, 3, seed=0)
