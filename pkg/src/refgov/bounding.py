"""Time-indexed outer bounds on the observer estimation error.

The extended estimation error obeys e+ = A_bar e + B_bar w_tilde with the
disturbance increment confined to a small symmetric set.  Two constructions
produce a sequence of sets Omega_0, Omega_1, ... guaranteed to contain the
error at each step:

* ellipsoidal: sub-level sets of the quadratic Lyapunov function of A_bar,
  with a level sequence obtained from a one-step contraction estimate.  The
  sequence is nested and converges to a limit ellipsoid.
* polyhedral: per-direction worst-case accumulation of the error recursion
  over a fixed direction set, giving symmetric slab polytopes.  Tighter in
  practice but not nested in general.

Both sequences are truncated after ``n_bar`` steps by a terminal set that is
verified (over a configurable window) to contain the subsequent sets.
"""

from __future__ import annotations

import numpy as np

from .errors import GeometryError, StabilityError, VerificationError
from .models import ObserverModel, assert_schur
from .numerics import DEFAULT
from .sets import Box, ConvexSet, Ellipsoid, Polytope, subset_of

__all__ = [
    "solve_dlyap", "rho_bound", "EllipsoidalBounder", "BoundingSequence",
    "ellipsoidal_sequence", "polyhedral_sequence", "direction_set",
    "terminal_set", "scaled_base_overbound",
]


def solve_dlyap(A_bar, policy=DEFAULT) -> np.ndarray:
    """Solve A' P A - P = -I by direct solution of the vectorized equation.

    The problems here are tiny (extended dimension <= ~6), so the Kronecker
    linear system is solved directly and the residual is checked against the
    algebraic tolerance.
    """
    A_bar = np.atleast_2d(np.asarray(A_bar, dtype=float))
    n = A_bar.shape[0]
    assert_schur(A_bar, "A_bar")
    lhs = np.kron(A_bar.T, A_bar.T) - np.eye(n * n)
    P = np.linalg.solve(lhs, -np.eye(n).reshape(-1)).reshape(n, n)
    P = 0.5 * (P + P.T)
    residual = np.linalg.norm(A_bar.T @ P @ A_bar - P + np.eye(n))
    if residual > policy.algebraic:
        raise StabilityError(
            f"Lyapunov solve ill-conditioned: residual {residual:.3e}")
    return P


def _vertex_array(S: ConvexSet) -> np.ndarray:
    try:
        return S.vertex_array()
    except GeometryError as ex:
        raise GeometryError(
            "bounding construction needs a vertex-representable set") from ex


def rho_bound(P, A_bar, B_bar, c, W_tilde: ConvexSet) -> float:
    """Worst-case one-step Lyapunov increment over the increment set.

    Returns max over W_tilde of  c ||A' P B w||^2 + w' B' P B w.  The
    objective is convex in w, so the maximum over a polytope is attained at a
    vertex and is evaluated there exactly.
    """
    if c <= 1:
        raise GeometryError("c must exceed 1")
    V = _vertex_array(W_tilde)
    G = A_bar.T @ P @ B_bar
    M = B_bar.T @ P @ B_bar
    lin = V @ G.T
    vals = c * np.sum(lin * lin, axis=1) + np.einsum("ij,jk,ik->i", V, M, V)
    return float(np.max(vals))


class EllipsoidalBounder:
    """Level-sequence generator for the Lyapunov-ellipsoid error bounds."""

    def __init__(self, observer: ObserverModel, E0: ConvexSet,
                 W_tilde: ConvexSet, c=2.0, policy=DEFAULT):
        self.P = solve_dlyap(observer.A_bar, policy)
        eigvals = np.linalg.eigvalsh(self.P)
        if eigvals[0] < 1.0 - policy.algebraic:
            raise StabilityError(
                f"Lyapunov solution has eigenvalue {eigvals[0]:.6g} < 1")
        self.c = float(c)
        self.lam_max = float(eigvals[-1])
        self.mu = 1.0 - ((self.c - 1.0) / self.c) / self.lam_max
        if not 0.0 < self.mu < 1.0:
            raise StabilityError(f"contraction factor mu={self.mu:.6g} not in (0,1)")
        self.rho = rho_bound(self.P, observer.A_bar, observer.B_bar, c, W_tilde)
        V0 = _vertex_array(E0)
        self.V0_max = float(np.max(np.einsum("ij,jk,ik->i", V0, self.P, V0)))
        self.floor = self.rho / (1.0 - self.mu)

    def xi(self, k) -> np.ndarray:
        """Ellipsoid level at step(s) k: max of the decay term and the floor."""
        k = np.asarray(k, dtype=float)
        nu = self.mu ** k * self.V0_max + (1.0 - self.mu ** k) * self.floor
        return np.maximum(nu, self.floor)

    def omega(self, k) -> Ellipsoid:
        return Ellipsoid(self.P, float(self.xi(k)))


class BoundingSequence:
    """Finite prefix of error-bounding sets plus a terminal set.

    ``at(k)`` returns Omega_k for k <= n_bar and the terminal set afterwards.
    For support-table indexing, ``slot(k)`` maps k to an index in
    ``0..n_bar+1`` where slot n_bar+1 is the terminal set.
    """

    def __init__(self, method, omegas, omega_f, n_bar, meta=None):
        if len(omegas) != n_bar + 1:
            raise GeometryError("need exactly n_bar + 1 prefix sets")
        self.method = method
        self.omegas = list(omegas)
        self.omega_f = omega_f
        self.n_bar = int(n_bar)
        self.meta = dict(meta or {})

    def at(self, k) -> ConvexSet:
        return self.omegas[k] if k <= self.n_bar else self.omega_f

    def slot(self, k) -> int:
        return k if k <= self.n_bar else self.n_bar + 1

    @property
    def n_slots(self):
        return self.n_bar + 2

    def slot_set(self, slot) -> ConvexSet:
        return self.omegas[slot] if slot <= self.n_bar else self.omega_f

    @property
    def dim(self):
        return self.omegas[0].dim


def ellipsoidal_sequence(observer: ObserverModel, E0: ConvexSet,
                         W_tilde: ConvexSet, c=2.0, n_bar=200,
                         policy=DEFAULT) -> BoundingSequence:
    """Nested ellipsoidal bounding sequence with terminal set Omega_{n_bar}."""
    bounder = EllipsoidalBounder(observer, E0, W_tilde, c=c, policy=policy)
    xi = bounder.xi(np.arange(n_bar + 1))
    if np.any(np.diff(xi) > policy.algebraic * max(1.0, xi[0])):
        raise StabilityError("ellipsoid level sequence is not non-increasing")
    omegas = [Ellipsoid(bounder.P, float(x)) for x in xi]
    meta = {
        "c": bounder.c, "mu": bounder.mu, "rho": bounder.rho,
        "V0_max": bounder.V0_max, "xi": xi, "floor": bounder.floor,
    }
    return BoundingSequence("ellipsoidal", omegas, omegas[-1], n_bar, meta)


def direction_set(dim, n_directions, seed) -> np.ndarray:
    """Unit directions: the coordinate axes plus seeded uniform sphere samples.

    The axis directions (paired with their negatives by the slab construction)
    guarantee every generated polytope is bounded; the remainder are sampled
    uniformly on the sphere from a seeded generator for reproducibility.
    """
    if n_directions < dim:
        raise GeometryError(f"need at least {dim} directions in dimension {dim}")
    rng = np.random.default_rng(seed)
    extra = rng.normal(size=(n_directions - dim, dim))
    extra /= np.linalg.norm(extra, axis=1, keepdims=True)
    return np.vstack([np.eye(dim), extra])


class _SlabTable:
    """Per-direction slab offsets of the polyhedral recursion."""

    def __init__(self, observer: ObserverModel, E0: ConvexSet,
                 W_tilde: ConvexSet, directions, n_steps):
        d = observer.dim
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        if directions.shape[1] != d:
            raise GeometryError("direction dimension mismatch")
        V_e0 = _vertex_array(E0)
        V_w = _vertex_array(W_tilde)
        if not _is_symmetric(V_e0) or not _is_symmetric(V_w):
            raise GeometryError(
                "polyhedral bounding requires E0 and W_tilde symmetric about 0")
        n_L = directions.shape[0]
        w_e = np.zeros((n_steps + 1, n_L))
        y_e = np.zeros((n_steps + 1, n_L))
        y_e[0] = np.max(directions @ V_e0.T, axis=1)
        A_pow = np.eye(d)
        for k in range(1, n_steps + 1):
            gain = directions @ A_pow @ observer.B_bar
            w_e[k] = w_e[k - 1] + np.max(gain @ V_w.T, axis=1)
            A_pow = observer.A_bar @ A_pow
            y_e[k] = np.max((directions @ A_pow) @ V_e0.T, axis=1) + w_e[k]
        self.directions = directions
        self.w_e_max = w_e
        self.y_e_max = y_e

    def omega(self, k) -> Polytope:
        return self._slab(self.y_e_max[k])

    def _slab(self, y) -> Polytope:
        return Polytope(np.vstack([self.directions, -self.directions]),
                        np.concatenate([y, y]))

    def accumulation_limit(self, observer: ObserverModel,
                           W_tilde: ConvexSet) -> np.ndarray:
        """Per-direction upper bound on the accumulating term at k = infinity.

        The computed table covers the accumulation up to the last step; the
        remainder is bounded by a geometric series in the operator norm of
        the error matrix (valid because the norm of a sufficiently high power
        is below one).
        """
        n_steps = self.w_e_max.shape[0] - 1
        V_w = _vertex_array(W_tilde)
        A_bar, B_bar = observer.A_bar, observer.B_bar
        A_N = np.linalg.matrix_power(A_bar, n_steps)
        s_N = np.linalg.norm(A_N, 2)
        if s_N >= 1.0:
            raise GeometryError(
                "error dynamics contract too slowly for a tail bound at this "
                "horizon; increase the verification horizon")
        g_sum = 0.0
        M = B_bar @ V_w.T
        for _ in range(n_steps):
            g_sum += float(np.max(np.linalg.norm(M, axis=0)))
            M = A_bar @ M
        remainder = s_N * g_sum / (1.0 - s_N)
        return self.w_e_max[n_steps] + remainder


def _is_symmetric(V, tol=1e-9):
    V = np.asarray(V, dtype=float)
    order = np.lexsort(V.T)
    order_neg = np.lexsort((-V).T)
    scale = max(1.0, float(np.max(np.abs(V))) if V.size else 1.0)
    return np.allclose(V[order], -V[order_neg], atol=tol * scale)


def polyhedral_sequence(observer: ObserverModel, E0: ConvexSet,
                        W_tilde: ConvexSet, directions, n_bar=200,
                        tail_window=None, verify_until=None,
                        terminal_mode="auto", policy=DEFAULT) -> BoundingSequence:
    """Polyhedral slab bounding sequence with a verified terminal set.

    ``tail_window`` (lo, hi) selects the sets whose union defines the terminal
    set (default: the single set at n_bar); the inclusion Omega_n within the
    terminal set is then verified for every n in (n_bar, verify_until].
    Omega_0 is E0 itself, which is exact rather than a slab outer bound.
    """
    if tail_window is None:
        tail_window = (n_bar, n_bar)
    lo, hi = int(tail_window[0]), int(tail_window[1])
    if not (0 <= lo <= hi):
        raise GeometryError("invalid tail window")
    if verify_until is None:
        verify_until = 3 * n_bar
    n_steps = max(n_bar, hi, int(verify_until))
    table = _SlabTable(observer, E0, W_tilde, directions, n_steps)
    cache = {0: E0}
    for k in range(1, n_steps + 1):
        cache[k] = table.omega(k)
    omegas = [cache[k] for k in range(n_bar + 1)]
    # tail members carry the all-time bound on the accumulating term, so the
    # terminal set covers the infinite tail of that term by construction (the
    # inflation is tiny; the verification below still guards the transient)
    w_inf = table.accumulation_limit(observer, W_tilde)
    tail = [table._slab(table.y_e_max[k] - table.w_e_max[k] + w_inf)
            for k in range(lo, hi + 1)]
    verify = [cache[k] for k in range(n_bar + 1, int(verify_until) + 1)]
    try:
        omega_f = terminal_set(tail, verify, mode=terminal_mode, policy=policy)
    except VerificationError as ex:
        raise VerificationError(f"{ex} (first verified index is {n_bar + 1})") from ex
    meta = {
        "directions": table.directions, "w_e_max": table.w_e_max,
        "y_e_max": table.y_e_max, "tail_window": (lo, hi),
        "verify_until": int(verify_until),
    }
    return BoundingSequence("polyhedral", omegas, omega_f, n_bar, meta)


def _slab_envelope(tail):
    """Smallest same-directions slab set containing every tail set."""
    A0, b0 = tail[0].halfspaces()
    b = b0.copy()
    for S in tail[1:]:
        As, bs = S.halfspaces()
        if As.shape != A0.shape or np.max(np.abs(As - A0)) > 1e-12:
            raise GeometryError("slab envelope requires identical directions")
        b = np.maximum(b, bs)
    return Polytope(A0, b)


def terminal_set(seq_tail, verify_window, mode="auto", policy=DEFAULT) -> ConvexSet:
    """Terminal error-bounding set covering the tail of the sequence.

    ``mode='hull'`` builds the convex hull of the union of the tail sets from
    their collected vertices (pruning the ones strictly inside the hull);
    ``mode='envelope'`` keeps the common slab directions and takes the
    per-direction maximum offset, which is an outer bound of the hull with
    trivial vertex and halfspace representations.  ``'auto'`` uses the hull
    in low dimension, where the hull computation is numerically reliable, and
    the envelope otherwise.  In all cases the inclusion of every set in
    ``verify_window`` is verified and a failure is reported with its index.
    """
    if not seq_tail:
        raise GeometryError("terminal set needs a nonempty tail")
    dim = seq_tail[0].dim
    if mode == "auto":
        mode = "hull" if dim <= 4 or len(seq_tail) == 1 else "envelope"
    if len(seq_tail) == 1 and mode == "hull":
        omega_f = seq_tail[0]
        if isinstance(omega_f, Polytope):
            omega_f.vertex_array()
    elif mode == "hull":
        omega_f = _hull_of_union(seq_tail, policy)
    elif mode == "envelope":
        omega_f = _slab_envelope(seq_tail)
        omega_f.vertex_array()
    else:
        raise GeometryError(f"unknown terminal-set mode {mode!r}")
    for offset, S in enumerate(verify_window):
        if not _contained(S, omega_f, policy):
            raise VerificationError(
                f"terminal-set verification failed at window offset {offset}")
    return omega_f


def _hull_of_union(tail, policy):
    from scipy.spatial import ConvexHull

    points = np.vstack([_vertex_array(S) for S in tail])
    dim = points.shape[1]
    center = 0.5 * (points.max(axis=0) + points.min(axis=0))
    widths = np.ptp(points, axis=0)
    scale = np.maximum(np.max(np.abs(points), axis=0), 1e-300)
    flat = widths <= 1e-13 * np.maximum(1.0, scale)
    free = ~flat
    if not np.any(free):
        return Box(center, center)
    if np.count_nonzero(free) == 1:
        lo, hi = points.min(axis=0), points.max(axis=0)
        lo[flat] = hi[flat] = center[flat]
        return Box(lo, hi).to_polytope()
    red = (points[:, free] - center[free]) / scale[free]
    key = np.round(red / 1e-9).astype(np.int64)
    _, idx = np.unique(key, axis=0, return_index=True)
    red = red[np.sort(idx)]
    try:
        hull = ConvexHull(red)
    except Exception as ex:
        raise GeometryError(
            f"terminal hull failed ({ex}); retry with mode='envelope'") from ex
    verts = np.tile(center, (len(hull.vertices), 1))
    verts[:, free] = red[hull.vertices] * scale[free] + center[free]
    A = np.zeros((len(hull.equations), dim))
    A[:, free] = hull.equations[:, :-1] / scale[free][None, :]
    b = -hull.equations[:, -1] + A[:, free] @ center[free]
    if np.any(flat):
        eye = np.eye(dim)
        A = np.vstack([A, eye[flat], -eye[flat]])
        b = np.concatenate([b, center[flat], -center[flat]])
    norms = np.linalg.norm(A, axis=1)
    return Polytope(A / norms[:, None], b / norms, vertices=verts)


def _contained(S, omega_f, policy):
    """Omega_n within omega_f, decided on the vertices of Omega_n."""
    if isinstance(omega_f, Polytope) and isinstance(S, Polytope):
        # cheap sufficient screen when both share slab directions
        if S.A.shape == omega_f.A.shape and np.array_equal(S.A, omega_f.A):
            if np.all(S.b <= omega_f.b + policy.geometric):
                return True
        S.vertex_array()  # makes the support evaluations below exact and cheap
    return subset_of(S, omega_f, tol=policy.geometric)


def scaled_base_overbound(base: Polytope, y_e_max_row, base_levels) -> Polytope:
    """Overbound a slab set by uniformly scaling a base polytope.

    Given a base polytope {e: |L_j'e| <= l_j} with known vertices, the set
    {e: |L_j'e| <= l_j * max_j(y_j / l_j)} contains the slab set with offsets
    y and has vertices equal to the base's vertices times the common factor.
    """
    y = np.asarray(y_e_max_row, dtype=float).reshape(-1)
    l = np.asarray(base_levels, dtype=float).reshape(-1)
    if y.size != l.size:
        raise GeometryError("offset/level length mismatch")
    if np.any(l <= 0):
        raise GeometryError("base levels must be positive")
    factor = float(np.max(y / l))
    A, b = base.halfspaces()
    verts = base.vertex_array() * factor
    return Polytope(A, b * factor, vertices=verts)
