"""Plant/observer/prediction assembly, control law and error dynamics."""

import numpy as np
import pytest

from refgov.errors import DimensionError, StabilityError
from refgov.models import (ConstraintSpec, ControllerGains, PlantModel,
                           build_observer, build_prediction, build_unmatched,
                           control_input, gamma_for_tracking, observer_step,
                           spectral_radius, zoh_discretize)
from refgov.sets import Box


def spring_damper_plant():
    return PlantModel.from_continuous(
        [[0.0, 1.0], [-1.44, -0.24]], [[0.0], [1.0]], [[1.0, 0.0]], 0.2)


def spring_damper_parts():
    plant = spring_damper_plant()
    gains = ControllerGains(K=[[-0.3962, -0.8888]], Gamma=[[1.8362]])
    observer = build_observer(plant, [[0.3796], [0.2524], [0.2491]])
    constraints = ConstraintSpec(
        W=Box([-0.5], [0.5]), W_tilde=Box([-0.001], [0.001]),
        E0=Box([0, 0, -0.4], [0, 0, 0.4]),
        X=Box([-1.2, -12], [1.2, 12]), U=Box([-60], [60]))
    return plant, gains, observer, constraints


def ackermann_observer_gain(A, C, poles):
    """Observer gain placing the poles of A - L C (single-output plants).

    Classic characteristic-polynomial construction: evaluate the desired
    polynomial at A and hit it with the inverse observability matrix.
    """
    n = A.shape[0]
    coeffs = np.poly(poles)
    qA = np.zeros_like(A)
    for c in coeffs:
        qA = qA @ A + c * np.eye(n)
    O = np.vstack([C @ np.linalg.matrix_power(A, i) for i in range(n)])
    e = np.zeros(n)
    e[-1] = 1.0
    return (qA @ np.linalg.solve(O, e[:, None])).reshape(n, 1)


class TestBuildObserver:
    def test_integrator_with_zero_gain_not_schur(self):
        plant = PlantModel([[0.0]], [[1.0]], [[1.0]], 1.0)
        with pytest.raises(StabilityError, match="not Schur"):
            build_observer(plant, [[0.0], [0.0]])

    def test_spring_damper_gain_is_stabilizing(self):
        plant = spring_damper_plant()
        obs = build_observer(plant, [[0.3796], [0.2524], [0.2491]])
        assert spectral_radius(obs.A_bar) < 1.0
        # block structure of the error dynamics
        np.testing.assert_allclose(obs.B_bar, [[0.0], [0.0], [1.0]])
        np.testing.assert_allclose(obs.A_ext[:2, 2:], plant.B)

    def test_pole_placement_oracle(self):
        # distinct poles keep the eigenvalue problem well-conditioned (a
        # repeated pole is defective and its location cannot be verified to
        # 1e-9 in floating point); the slowest pole sets the spectral radius
        poles = [0.5, 0.45, 0.4]
        rng = np.random.default_rng(31)
        placed = 0
        while placed < 10:
            A = rng.normal(size=(2, 2)) * 0.4
            if spectral_radius(A) >= 0.95:
                continue
            B = rng.normal(size=(2, 1))
            C = rng.normal(size=(1, 2))
            plant = PlantModel(A, B, C, 1.0)
            A_ext = np.block([[A, B], [np.zeros((1, 2)), np.eye(1)]])
            C_ext = np.hstack([C, np.zeros((1, 1))])
            O = np.vstack([C_ext @ np.linalg.matrix_power(A_ext, i)
                           for i in range(3)])
            if np.linalg.cond(O) > 1e6:
                continue
            L = ackermann_observer_gain(A_ext, C_ext, poles)
            obs = build_observer(plant, L)
            assert spectral_radius(obs.A_bar) == pytest.approx(0.5, abs=1e-9)
            # characteristic-polynomial root check
            np.testing.assert_allclose(np.poly(obs.A_bar), np.poly(poles),
                                       atol=1e-9)
            placed += 1

    def test_dimension_check(self):
        plant = spring_damper_plant()
        with pytest.raises(DimensionError):
            build_observer(plant, [[0.1], [0.2]])


class TestBuildPrediction:
    def test_scalar_direct_substitution(self):
        plant = PlantModel([[0.5]], [[1.0]], [[1.0]], 1.0)
        gains = ControllerGains(K=[[-0.25]], Gamma=[[1.0]])
        obs = build_observer(plant, [[0.4], [0.3]])
        spec = ConstraintSpec(W=Box([-1], [1]), W_tilde=Box([-0.1], [0.1]),
                              E0=Box([-1, -1], [1, 1]),
                              X=Box([-10], [10]), U=Box([-10], [10]),
                              input_mode="plain_U")
        pred = build_prediction(plant, gains, obs, spec)
        assert pred.A_cl[0, 0] == pytest.approx(0.25)
        assert pred.B_cl[0, 0] == pytest.approx(1.0)
        np.testing.assert_allclose(pred.D_w, np.eye(2))

    def test_short_period_gains_stabilize(self):
        plant = PlantModel.from_continuous(
            [[-0.7018, 0, 0.9761], [0, 0, 1], [-2.6923, 0, -0.7322]],
            [[-0.0573], [0], [-3.5352]],
            [[1.0, 0, 0], [0, 1.0, 0]], 0.02)
        gains = ControllerGains(K=[[4.0441, 103.2201, 7.5627]],
                                Gamma=[[-103.22]])
        obs = build_observer(plant, [[0.1752, 0.0201], [0.0201, 0.1881],
                                     [0.2121, 0.2431], [-0.1184, -0.1123]])
        spec = ConstraintSpec(W=Box([-0.45], [0.45]),
                              W_tilde=Box([-4e-4], [4e-4]),
                              E0=Box(-np.ones(4), np.ones(4)),
                              X=Box([-1, -1, -1], [1, 1, 1]),
                              U=Box([-1], [1]), input_mode="plain_U")
        pred = build_prediction(plant, gains, obs, spec)
        assert spectral_radius(pred.A_cl) < 1.0

    def test_input_tightening_interval_oracle(self):
        # elevator box +-40 deg tightened by a +-0.45 rad disturbance
        deg = np.pi / 180.0
        plant = spring_damper_plant()
        gains = ControllerGains(K=[[-0.3962, -0.8888]], Gamma=[[1.8362]])
        obs = build_observer(plant, [[0.3796], [0.2524], [0.2491]])
        spec = ConstraintSpec(W=Box([-0.45], [0.45]),
                              W_tilde=Box([-1e-3], [1e-3]),
                              E0=Box([0, 0, -0.1], [0, 0, 0.1]),
                              X=Box([-1.2, -12], [1.2, 12]),
                              U=Box([-40 * deg], [40 * deg]),
                              input_mode="subtract_W")
        pred = build_prediction(plant, gains, obs, spec)
        # brute-force interval oracle: u such that u + w stays in U for all w
        w_grid = np.linspace(-0.45, 0.45, 2001)
        u_grid = np.linspace(-1.0, 1.0, 400001)
        ok = [(u_grid + w_grid.min() >= -40 * deg)
              & (u_grid + w_grid.max() <= 40 * deg)]
        feasible = u_grid[np.all(ok, axis=0)]
        assert pred.Y_cl.lower[2] == pytest.approx(feasible.min(), abs=1e-5)
        assert pred.Y_cl.upper[2] == pytest.approx(feasible.max(), abs=1e-5)

    def test_empty_after_tightening(self):
        plant = spring_damper_plant()
        gains = ControllerGains(K=[[-0.3962, -0.8888]], Gamma=[[1.8362]])
        obs = build_observer(plant, [[0.3796], [0.2524], [0.2491]])
        spec = ConstraintSpec(W=Box([-0.5], [0.5]), W_tilde=Box([-1e-3], [1e-3]),
                              E0=Box([0, 0, -0.1], [0, 0, 0.1]),
                              X=Box([-1.2, -12], [1.2, 12]),
                              U=Box([-0.3], [0.3]), input_mode="subtract_W")
        with pytest.raises(Exception, match="empty"):
            build_prediction(plant, gains, obs, spec)


class TestUnmatched:
    def test_identity_case(self):
        plant = PlantModel(np.zeros((2, 2)), np.eye(2), np.eye(2), 1.0,
                           B1=np.eye(2), H=np.eye(2))
        gains = ControllerGains(Gamma=np.eye(2), Lambda=np.zeros((2, 2)))
        obs = build_observer(plant, np.vstack([0.3 * np.eye(2),
                                               0.2 * np.eye(2)]))
        pred = build_unmatched(plant, gains, obs, Box([-1, -1], [1, 1]))
        np.testing.assert_allclose(pred.control_data["pinv_HB"], np.eye(2),
                                   atol=1e-12)
        # pure cancellation: u = -w_hat when everything else is zero
        u = control_input(gains, pred, [0, 0], [1.0, 2.0], [0, 0])
        np.testing.assert_allclose(u, [-1.0, -2.0], atol=1e-12)

    def test_icing_range_condition(self):
        plant = PlantModel.from_continuous(
            [[-0.042, -0.023, -32.22, -32.20], [0.015, -3.80, -52.82, 0],
             [-0.001, 0.961, -2.990, 0], [0, 1, 0, 0]],
            [[-0.052, 0.177], [-1.035, 0.018], [-0.005, 0], [0, 0]],
            [[1., 0, 0, 0], [0, 0, 0, 1.]], 0.03,
            B1c=[[-100.5, 5.27], [0, 0], [-0.031, -0.599], [0, 0]],
            H=[[1., 0, 0, 0], [0, 1., 0, 0]])
        gains = ControllerGains(
            Gamma=[[0.0208, 0.0126], [-0.0030, 0.0727]],
            Lambda=[[0.9792, -0.0126], [0.0030, 0.9273]])
        L = [[0.764, -0.008], [-0.036, 0.49], [0.0005, -0.04],
             [-0.008, 0.16], [-0.15, 0.01], [0.03, 0.91]]
        obs = build_observer(plant, L)
        pred = build_unmatched(plant, gains, obs, Box([-5, -0.2094],
                                                      [5, 0.2094]))
        HB = plant.H @ plant.B
        np.testing.assert_allclose(HB @ pred.control_data["pinv_HB"],
                                   np.eye(2), atol=1e-10)

    def test_rank_deficient_raises(self):
        plant = PlantModel(np.zeros((2, 2)), [[0.0], [1.0]], np.eye(2), 1.0,
                           B1=np.eye(2), H=[[1.0, 0.0]])
        gains = ControllerGains(Gamma=[[1.0]], Lambda=[[0.0]])
        obs = build_observer(plant, np.vstack([0.3 * np.eye(2),
                                               0.2 * np.eye(2)])[:, :2])
        with pytest.raises(DimensionError, match="rank"):
            build_unmatched(plant, gains, obs, Box([-1], [1]))


class TestControlAndObserverStep:
    def test_zero_everything(self):
        plant, gains, obs, spec = spring_damper_parts()
        pred = build_prediction(plant, gains, obs, spec)
        assert control_input(gains, pred, [0, 0], [0], [0]) == pytest.approx(0)

    def test_paper_gain_arithmetic(self):
        plant, gains, obs, spec = spring_damper_parts()
        pred = build_prediction(plant, gains, obs, spec)
        u = control_input(gains, pred, [1.0, 0.0], [0.2], [0.0])
        assert u[0] == pytest.approx(-0.3962 - 0.2)

    def test_observer_step_zero(self):
        plant, gains, obs, spec = spring_damper_parts()
        np.testing.assert_allclose(observer_step(obs, [0, 0, 0], [0], [0]),
                                   [0, 0, 0])

    def test_observer_step_innovation_only(self):
        plant, gains, obs, spec = spring_damper_parts()
        nxt = observer_step(obs, [0, 0, 0], [0], [1.0])
        np.testing.assert_allclose(nxt, obs.L[:, 0])

    def test_error_recursion_matches_simulation(self):
        # 500 steps: e from direct plant/observer simulation vs the recursion
        plant, gains, obs, spec = spring_damper_parts()
        pred = build_prediction(plant, gains, obs, spec)
        rng = np.random.default_rng(32)
        x = rng.normal(size=2)
        x_hat = np.zeros(2)
        w = 0.3
        w_hat = 0.0
        e = np.concatenate([x - x_hat, [w - w_hat]])
        for _ in range(500):
            wt = rng.uniform(-1e-3, 1e-3)
            u = control_input(gains, pred, x_hat, [w_hat], [0.7])
            y = plant.C @ x
            nxt = observer_step(obs, np.concatenate([x_hat, [w_hat]]), u, y)
            x = plant.A @ x + plant.B @ (u + w)
            w = w + wt
            x_hat, w_hat = nxt[:2], nxt[2]
            e = obs.A_bar @ e + obs.B_bar @ [wt]
            direct = np.concatenate([x - x_hat, [w - w_hat]])
            np.testing.assert_allclose(direct, e, atol=1e-12)

    def test_error_recursion_random_plants(self):
        rng = np.random.default_rng(33)
        for _ in range(100):
            n = int(rng.integers(1, 4))
            A = rng.normal(size=(n, n)) * 0.3
            B = rng.normal(size=(n, 1))
            C = rng.normal(size=(1, n))
            plant = PlantModel(A, B, C, 1.0)
            L = rng.normal(size=(n + 1, 1)) * 0.1
            A_ext = np.block([[A, B], [np.zeros((1, n)), np.eye(1)]])
            C_ext = np.hstack([C, np.zeros((1, 1))])
            if spectral_radius(A_ext - L @ C_ext) >= 1 - 1e-9:
                continue
            obs = build_observer(plant, L)
            x = rng.normal(size=n)
            xh = rng.normal(size=n)
            w, wh = rng.normal(), 0.0
            e = np.concatenate([x - xh, [w - wh]])
            for _ in range(40):
                wt = rng.uniform(-0.01, 0.01)
                u = rng.normal(size=1)
                nxt = observer_step(obs, np.concatenate([xh, [wh]]), u,
                                    plant.C @ x)
                x = plant.A @ x + plant.B @ (u + [w])
                w = w + wt
                xh, wh = nxt[:n], nxt[n]
                e = obs.A_bar @ e + obs.B_bar @ [wt]
                np.testing.assert_allclose(
                    np.concatenate([x - xh, [w - wh]]), e, atol=1e-10)


class TestSteadyState:
    def test_spring_damper_position_tracks_command(self):
        plant, gains, obs, spec = spring_damper_parts()
        pred = build_prediction(plant, gains, obs, spec)
        Hx_inf = np.linalg.solve(np.eye(2) - pred.A_cl, pred.B_cl)
        assert Hx_inf[0, 0] == pytest.approx(1.0, abs=2e-4)

    def test_gamma_helper_recovers_gains(self):
        plant, gains, obs, spec = spring_damper_parts()
        G = gamma_for_tracking(plant, gains.K, [[1.0, 0.0]])
        assert G[0, 0] == pytest.approx(1.8362, abs=2e-4)

    def test_gamma_helper_short_period(self):
        plant = PlantModel.from_continuous(
            [[-0.7018, 0, 0.9761], [0, 0, 1], [-2.6923, 0, -0.7322]],
            [[-0.0573], [0], [-3.5352]],
            [[1.0, 0, 0], [0, 1.0, 0]], 0.02)
        G = gamma_for_tracking(plant, [[4.0441, 103.2201, 7.5627]],
                               [[0.0, 1.0, 0.0]])
        assert G[0, 0] == pytest.approx(-103.22, abs=0.01)

    def test_zoh_matches_series(self):
        rng = np.random.default_rng(34)
        Ac = rng.normal(size=(3, 3))
        Bc = rng.normal(size=(3, 2))
        Ts = 0.05
        A, B = zoh_discretize(Ac, Bc, Ts)
        # truncated series oracle for the ZOH integrals
        A_ser = np.eye(3)
        term = np.eye(3)
        for i in range(1, 30):
            term = term @ (Ac * Ts) / i
            A_ser = A_ser + term
        B_ser = np.zeros((3, 2))
        term = np.eye(3) * Ts
        B_ser += term @ Bc
        for i in range(2, 30):
            term = term @ (Ac * Ts) / i
            B_ser += term @ Bc
        np.testing.assert_allclose(A, A_ser, atol=1e-10)
        np.testing.assert_allclose(B, B_ser, atol=1e-10)
