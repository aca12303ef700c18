"""Plant, extended observer and closed-loop prediction model assembly.

The plant is a discrete-time linear system driven by the control input and a
slowly-varying bounded disturbance.  A Luenberger observer estimates the
plant state together with the disturbance (modelled as an integrator state);
the controller cancels the disturbance estimate.  The prediction model is the
closed-loop system seen by the reference governor, with the joint
state/disturbance estimation error acting as the only exogenous input.

Two disturbance structures are supported: the matched case (disturbance
enters through the control channel) and the unmatched case, where constraints
are imposed on a selected output vector z = H x and the control law inverts
H B to impose stable z dynamics.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import expm

from .errors import DimensionError, GeometryError, StabilityError
from .numerics import DEFAULT
from .sets import Box, ConvexSet

INPUT_MODES = ("subtract_W", "plain_U")


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(M)))))


def assert_schur(M, name="matrix", tol=None):
    tol = DEFAULT.schur_margin if tol is None else tol
    rho = spectral_radius(M)
    if rho >= 1.0 - tol:
        raise StabilityError(f"{name} is not Schur: spectral radius {rho:.6g}")
    return rho


def zoh_discretize(Ac, Bc, Ts):
    """Exact zero-order-hold discretization via the augmented matrix exponential."""
    Ac = np.atleast_2d(np.asarray(Ac, dtype=float))
    Bc = np.atleast_2d(np.asarray(Bc, dtype=float))
    n, m = Ac.shape[0], Bc.shape[1]
    if Bc.shape[0] != n:
        raise DimensionError("B must have as many rows as A")
    M = np.zeros((n + m, n + m))
    M[:n, :n] = Ac
    M[:n, n:] = Bc
    E = expm(M * Ts)
    return E[:n, :n], E[:n, n:]


def _mat(x, rows=None, cols=None, name="matrix"):
    M = np.atleast_2d(np.asarray(x, dtype=float))
    if rows is not None and M.shape[0] != rows:
        raise DimensionError(f"{name}: expected {rows} rows, got {M.shape[0]}")
    if cols is not None and M.shape[1] != cols:
        raise DimensionError(f"{name}: expected {cols} columns, got {M.shape[1]}")
    return M


class PlantModel:
    """Discrete-time plant x+ = A x + B u + B1 w, y = C x.

    When ``B1`` is omitted the matched form x+ = A x + B (u + w) is assumed,
    so the disturbance dimension equals the input dimension.  ``H`` selects
    the constrained output z = H x for the unmatched formulation.
    """

    def __init__(self, A, B, C, sample_period, B1=None, H=None):
        self.A = _mat(A, name="A")
        self.n_x = self.A.shape[0]
        if self.A.shape[1] != self.n_x:
            raise DimensionError("A must be square")
        self.B = _mat(B, rows=self.n_x, name="B")
        self.n_u = self.B.shape[1]
        self.C = _mat(C, cols=self.n_x, name="C")
        self.n_y = self.C.shape[0]
        self.B1 = None if B1 is None else _mat(B1, rows=self.n_x, name="B1")
        self.n_w = self.n_u if self.B1 is None else self.B1.shape[1]
        self.H = None if H is None else _mat(H, cols=self.n_x, name="H")
        self.n_z = None if self.H is None else self.H.shape[0]
        if sample_period <= 0:
            raise DimensionError("sample_period must be positive")
        self.sample_period = float(sample_period)

    @classmethod
    def from_continuous(cls, Ac, Bc, C, sample_period, B1c=None, H=None):
        """Build from continuous-time matrices by zero-order-hold discretization."""
        Ac = _mat(Ac)
        Bc = _mat(Bc, rows=Ac.shape[0])
        if B1c is None:
            A, B = zoh_discretize(Ac, Bc, sample_period)
            return cls(A, B, C, sample_period, H=H)
        B1c = _mat(B1c, rows=Ac.shape[0])
        A, BB = zoh_discretize(Ac, np.hstack([Bc, B1c]), sample_period)
        nu = Bc.shape[1]
        return cls(A, BB[:, :nu], C, sample_period, B1=BB[:, nu:], H=H)

    @property
    def disturbance_input(self):
        """Map from w into the state update (B in the matched case)."""
        return self.B if self.B1 is None else self.B1


class ControllerGains:
    """Stabilizing feedback K, feedforward Gamma, and (unmatched) Lambda.

    K may be omitted in the unmatched formulation, whose control law does not
    use a state-feedback gain.
    """

    def __init__(self, K=None, Gamma=None, Lambda=None):
        self.K = None if K is None else _mat(K, name="K")
        if Gamma is None:
            raise DimensionError("Gamma is required")
        self.Gamma = _mat(Gamma, name="Gamma")
        self.Lambda = None if Lambda is None else _mat(Lambda, name="Lambda")
        self.n_v = self.Gamma.shape[1]


class ConstraintSpec:
    """Constraint and disturbance sets for one problem instance.

    ``X``/``U`` constrain state and input (matched case), ``Z`` the selected
    output (unmatched case).  ``W`` bounds the disturbance, ``W_tilde`` its
    per-step increment, and ``E0`` the initial extended estimation error.
    ``input_mode`` picks whether the input constraint is imposed on u
    (tightened by the disturbance set) or on u + w directly.
    """

    def __init__(self, W, W_tilde, E0, X=None, U=None, Z=None,
                 input_mode="subtract_W"):
        if input_mode not in INPUT_MODES:
            raise DimensionError(f"input_mode must be one of {INPUT_MODES}")
        self.X = X
        self.U = U
        self.Z = Z
        self.W = W
        self.W_tilde = W_tilde
        self.E0 = E0
        self.input_mode = input_mode


class ObserverModel:
    """Extended-state Luenberger observer and its error dynamics."""

    def __init__(self, A_ext, B_ext, C_ext, L, n_x, n_w):
        self.A_ext = A_ext
        self.B_ext = B_ext
        self.C_ext = C_ext
        self.L = L
        self.n_x = n_x
        self.n_w = n_w
        self.L_x = L[:n_x, :]
        self.L_w = L[n_x:, :]
        self.A_bar = A_ext - L @ C_ext
        self.B_bar = np.vstack([np.zeros((n_x, n_w)), np.eye(n_w)])

    @property
    def dim(self):
        return self.n_x + self.n_w


def build_observer(plant: PlantModel, L) -> ObserverModel:
    """Assemble the extended observer and check its error dynamics are stable.

    The extended state stacks the plant state and the disturbance, the latter
    modelled as a constant (integrator) state.  The disturbance feeds the
    state through B (matched) or B1 (unmatched).
    """
    n_x, n_w, n_u, n_y = plant.n_x, plant.n_w, plant.n_u, plant.n_y
    L = _mat(L, rows=n_x + n_w, cols=n_y, name="L")
    Bw = plant.disturbance_input
    A_ext = np.block([
        [plant.A, Bw],
        [np.zeros((n_w, n_x)), np.eye(n_w)],
    ])
    B_ext = np.vstack([plant.B, np.zeros((n_w, n_u))])
    C_ext = np.hstack([plant.C, np.zeros((n_y, n_w))])
    obs = ObserverModel(A_ext, B_ext, C_ext, L, n_x, n_w)
    assert_schur(obs.A_bar, "observer error matrix A_bar")
    return obs


def observer_step(observer: ObserverModel, x_hat_ext, u, y):
    """One observer update: x+ = A_ext x + B_ext u + L (y - C_ext x)."""
    x_hat_ext = np.asarray(x_hat_ext, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    innov = y - observer.C_ext @ x_hat_ext
    return observer.A_ext @ x_hat_ext + observer.B_ext @ u + observer.L @ innov


class PredictionModel:
    """Closed-loop model driven by the command v and the estimation error e.

    x+ = A_cl x + B_cl v + B_w e ;  y_cl = C_cl x + D_cl v + D_w e in Y_cl.
    In the matched case x is the state estimate; in the unmatched case it is
    the constrained-output estimate z_hat and the extra fields needed to
    evaluate the inverting control law are stored alongside.
    """

    def __init__(self, A_cl, B_cl, B_w, C_cl, D_cl, D_w, Y_cl, kind="matched",
                 control_data=None):
        self.A_cl = A_cl
        self.B_cl = B_cl
        self.B_w = B_w
        self.C_cl = C_cl
        self.D_cl = D_cl
        self.D_w = D_w
        self.Y_cl = Y_cl
        self.kind = kind
        self.control_data = control_data or {}
        self.n_state = A_cl.shape[0]
        self.n_v = B_cl.shape[1]
        self.n_err = B_w.shape[1]

    def step(self, x, v, e):
        return self.A_cl @ x + self.B_cl @ v + self.B_w @ e

    def output(self, x, v, e):
        return self.C_cl @ x + self.D_cl @ v + self.D_w @ e


def _boxes_product(X: Box, U: Box) -> Box:
    return Box(np.concatenate([X.lower, U.lower]),
               np.concatenate([X.upper, U.upper]))


def _tighten_input_box(U: Box, W: ConvexSet) -> Box:
    """U shrunk by the mirrored disturbance set: U - (-W), exact for boxes."""
    eye = np.eye(U.dim)
    upper = U.upper - W.support_batch(-eye)
    lower = U.lower + W.support_batch(eye)
    if np.any(upper < lower):
        raise GeometryError("input constraint empty after disturbance tightening")
    return Box(lower, upper)


def build_prediction(plant: PlantModel, gains: ControllerGains,
                     observer: ObserverModel,
                     constraints: ConstraintSpec) -> PredictionModel:
    """Matched-case prediction model under u = K x_hat + Gamma v - w_hat."""
    if plant.B1 is not None:
        raise DimensionError(
            "plant has a separate disturbance input map; use build_unmatched")
    if gains.K is None:
        raise DimensionError("matched case requires the K gain")
    K = _mat(gains.K, rows=plant.n_u, cols=plant.n_x, name="K")
    Gamma = _mat(gains.Gamma, rows=plant.n_u, name="Gamma")
    A_cl = plant.A + plant.B @ K
    assert_schur(A_cl, "closed-loop matrix A + B K")
    B_cl = plant.B @ Gamma
    B_w = observer.L_x @ observer.C_ext
    C_cl = np.vstack([np.eye(plant.n_x), K])
    D_cl = np.vstack([np.zeros((plant.n_x, gains.n_v)), Gamma])
    D_w = np.eye(plant.n_x + plant.n_w)
    X, U = constraints.X, constraints.U
    if X is None or U is None:
        raise DimensionError("matched case requires X and U constraint boxes")
    if constraints.input_mode == "subtract_W":
        U_eff = _tighten_input_box(U, constraints.W)
    else:
        U_eff = U
    Y_cl = _boxes_product(X, U_eff)
    return PredictionModel(A_cl, B_cl, B_w, C_cl, D_cl, D_w, Y_cl)


def build_unmatched(plant: PlantModel, gains: ControllerGains,
                    observer: ObserverModel, Z: ConvexSet,
                    policy=DEFAULT) -> PredictionModel:
    """Unmatched-case prediction model in the constrained output z = H x.

    Requires H B full column rank and range(H B1) inside range(H B); the
    control law uses the right inverse (HB)^+ = (HB)' (HB (HB)')^{-1} to
    impose z_hat+ = Lambda z_hat + Gamma v.
    """
    if plant.H is None or plant.B1 is None:
        raise DimensionError("unmatched case requires both H and B1 on the plant")
    if gains.Lambda is None:
        raise DimensionError("unmatched case requires the Lambda gain")
    H, B, B1 = plant.H, plant.B, plant.B1
    HB = H @ B
    HB1 = H @ B1
    n_z = H.shape[0]
    Lambda = _mat(gains.Lambda, rows=n_z, cols=n_z, name="Lambda")
    assert_schur(Lambda, "Lambda")
    rank_HB = np.linalg.matrix_rank(HB, tol=1e-10 * max(1.0, np.linalg.norm(HB)))
    if rank_HB < HB.shape[1]:
        raise DimensionError("H B is rank deficient; control inversion impossible")
    if np.linalg.matrix_rank(np.hstack([HB, HB1]),
                             tol=1e-10 * max(1.0, np.linalg.norm(HB))) > rank_HB:
        raise DimensionError("range(H B1) is not contained in range(H B)")
    pinv_HB = HB.T @ np.linalg.inv(HB @ HB.T)
    if np.max(np.abs(HB @ pinv_HB - np.eye(n_z))) > 1e-10:
        raise DimensionError("(HB)(HB)^+ deviates from identity; HB ill-conditioned")
    B_w = np.hstack([H @ observer.L_x @ plant.C, np.zeros((n_z, plant.n_w))])
    D_w = np.hstack([H, np.zeros((n_z, plant.n_w))])
    return PredictionModel(
        A_cl=Lambda,
        B_cl=_mat(gains.Gamma, rows=n_z, name="Gamma"),
        B_w=B_w,
        C_cl=np.eye(n_z),
        D_cl=np.zeros((n_z, gains.n_v)),
        D_w=D_w,
        Y_cl=Z,
        kind="unmatched",
        control_data={
            "pinv_HB": pinv_HB, "HA": H @ plant.A, "HB1": HB1,
            "H": H, "Lambda": Lambda, "Gamma": np.atleast_2d(gains.Gamma),
        },
    )


def control_input(gains: ControllerGains, prediction: PredictionModel,
                  x_hat, w_hat, v):
    """Evaluate the control law for the current estimates and command."""
    x_hat = np.asarray(x_hat, dtype=float).reshape(-1)
    w_hat = np.asarray(w_hat, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    if prediction.kind == "matched":
        return gains.K @ x_hat + gains.Gamma @ v - w_hat
    cd = prediction.control_data
    z_hat = cd["H"] @ x_hat
    return cd["pinv_HB"] @ (
        -cd["HA"] @ x_hat - cd["HB1"] @ w_hat + cd["Lambda"] @ z_hat
        + cd["Gamma"] @ v)


def gamma_for_tracking(plant: PlantModel, K, T):
    """Feedforward gain making T x steady-state equal the command.

    Inverts the closed-loop static gain from v to T x.  ``T`` selects which
    output should track the command (one row per command channel).
    """
    K = _mat(K, rows=plant.n_u, cols=plant.n_x)
    T = _mat(T, cols=plant.n_x)
    A_cl = plant.A + plant.B @ K
    assert_schur(A_cl, "closed-loop matrix A + B K")
    G = T @ np.linalg.solve(np.eye(plant.n_x) - A_cl, plant.B)
    if G.shape[0] != G.shape[1]:
        raise DimensionError("T must give a square static-gain matrix")
    return np.linalg.inv(G)
