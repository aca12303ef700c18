"""Time-dependent constraint-admissible sets for the reference governor.

For each time index n, the admissible set collects the command/state pairs
(v, x_hat) whose constant-command prediction satisfies the constraints at
every future step, with the constraint set tightened at prediction step k by
the reachable set of the error-driven term.  The infinite family of
prediction constraints is reduced to a finite one by adding per-step
constraint blocks until a whole block is redundant; a slightly tightened
steady-state condition guarantees this happens at a finite index.

The heavy lifting is done by support-function tables over the bounding
sequence, so that the offsets of every constraint block come out of cached
vertex/ellipsoid support evaluations instead of repeated set arithmetic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .bounding import BoundingSequence
from .errors import GeometryError, InfeasibleError, VerificationError
from .models import PredictionModel
from .numerics import DEFAULT
from .sets import (AffineMap, Box, ConvexSet, Ellipsoid, MinkowskiSum,
                   Polytope, chebyshev_center)

logger = logging.getLogger(__name__)

__all__ = [
    "HOperators", "TightenedConstraints", "AdmissibleSet", "AdmissibleSequence",
    "reachable_error_sets", "tightened_set", "steady_state_set",
    "finite_determination", "build_sequence", "invariance_audit", "AuditReport",
]


class HOperators:
    """Step-response operators of the closed-loop prediction model.

    Hx(k) maps a constant command to the state after k steps from the origin;
    Hy(k) = D_cl + C_cl Hx(k) is the corresponding constrained output.  Both
    converge geometrically to their steady-state values.
    """

    def __init__(self, prediction: PredictionModel):
        self.prediction = prediction
        A, B = prediction.A_cl, prediction.B_cl
        n = A.shape[0]
        self._eye = np.eye(n)
        self._inv = np.linalg.inv(self._eye - A)
        self.Hx_inf = self._inv @ B
        self.Hy_inf = prediction.D_cl + prediction.C_cl @ self.Hx_inf
        self._powers = [self._eye]          # A_cl^k
        self._hx = [np.zeros_like(B)]       # Hx(0) = 0

    def _extend(self, k):
        while len(self._powers) <= k:
            self._powers.append(self.prediction.A_cl @ self._powers[-1])
        while len(self._hx) <= k:
            j = len(self._hx)
            self._hx.append(self._hx[-1] + self._powers[j - 1] @ self.prediction.B_cl)

    def power(self, k):
        self._extend(k)
        return self._powers[k]

    def Hx(self, k):
        self._extend(k)
        return self._hx[k]

    def Hy(self, k):
        return self.prediction.D_cl + self.prediction.C_cl @ self.Hx(k)


def reachable_error_sets(prediction: PredictionModel,
                         bounding: BoundingSequence, n, k):
    """Reachable sets of the error-driven terms after k prediction steps.

    Ex(n, k) collects the states reachable from the origin at step k under
    errors drawn from the bounding sets starting at index n; Ey(n, k) adds the
    direct error feedthrough at step k.  Both are lazy: only their support
    functions are ever evaluated.
    """
    if k < 0:
        raise GeometryError("prediction step must be nonnegative")
    hops = HOperators(prediction)
    parts = [AffineMap(hops.power(k - 1 - i) @ prediction.B_w, bounding.at(n + i))
             for i in range(k)]
    if parts:
        ex = parts[0] if len(parts) == 1 else MinkowskiSum(parts)
    else:
        dim = prediction.n_state
        ex = Box(np.zeros(dim), np.zeros(dim))
    ey_parts = [AffineMap(prediction.D_w, bounding.at(n + k))]
    if parts:
        ey_parts += [AffineMap(prediction.C_cl @ p.M, p.base) for p in parts]
    ey = ey_parts[0] if len(ey_parts) == 1 else MinkowskiSum(ey_parts)
    return ex, ey


class _SupportTable:
    """Cached supports of the bounding sets in the tightening directions.

    For Y_cl rows g_r the tightening of block k at time n needs
    support(D_w Omega_{n+k}, g_r) plus the supports of Omega_{n+k-1-j} in the
    directions (C_cl A_cl^j B_w)' g_r for j < k.  Supports are cached per
    bounding-set slot, and the per-block cumulative sums satisfy a shift
    recursion over the slot axis, so extending the table by one prediction
    step costs one support batch per slot.
    """

    def __init__(self, prediction: PredictionModel, bounding: BoundingSequence,
                 hops: HOperators):
        self.prediction = prediction
        self.bounding = bounding
        self.hops = hops
        A, b = prediction.Y_cl.halfspaces()
        self.G = A
        self.bY = b
        self.row_norms = np.linalg.norm(A, axis=1)
        n_slots = bounding.n_slots
        for s in range(n_slots):
            S = bounding.slot_set(s)
            if isinstance(S, Polytope):
                S.vertex_array()  # one-time enumeration; supports become matmuls
        dirs0 = A @ prediction.D_w
        self.M0 = np.column_stack(
            [bounding.slot_set(s).support_batch(dirs0) for s in range(n_slots)])
        next_slot = np.minimum(np.arange(n_slots) + 1, n_slots - 1)
        self._next = next_slot
        self._U = [np.zeros((n_slots, len(b)))]   # U[k][s] = cumulative sums
        self._pair = self._find_pairs(A)

    @staticmethod
    def _find_pairs(A):
        """Indices j(i) with rowj = -row i, for cheap emptiness checks."""
        m = len(A)
        pair = np.full(m, -1, dtype=int)
        for i in range(m):
            if pair[i] >= 0:
                continue
            diffs = np.max(np.abs(A + A[i]), axis=1)
            j = int(np.argmin(diffs))
            if diffs[j] < 1e-12:
                pair[i], pair[j] = j, i
        return pair if np.all(pair >= 0) else None

    def ensure(self, k):
        while len(self._U) <= k:
            j = len(self._U) - 1
            dirs = self.G @ (self.prediction.C_cl
                             @ self.hops.power(j) @ self.prediction.B_w)
            Sj = np.column_stack(
                [self.bounding.slot_set(s).support_batch(dirs)
                 for s in range(self.bounding.n_slots)])
            prev = self._U[-1]
            self._U.append(prev[self._next] + Sj.T)

    def tight_offsets(self, n, k):
        """Offsets of Y_cl tightened by the reachable error set at (n, k)."""
        self.ensure(k)
        s_n = self.bounding.slot(n)
        s_nk = self.bounding.slot(n + k)
        return self.bY - self.M0[:, s_nk] - self._U[k][s_n]

    def offsets_empty(self, b, tol):
        """True if the tightened offsets define an empty set (box rows only)."""
        if self._pair is None:
            return None
        return bool(np.any(b + b[self._pair] < -tol))


class TightenedConstraints:
    """Per-(n, k) tightened constraint sets and the steady-state sets.

    The steady-state set for time n is the constraint set tightened over a
    long horizon and shrunk by an epsilon ball; the family must be
    non-decreasing in n for the governor's recursive feasibility.  If the
    computed family is not monotone it is replaced by its intersection
    (row-wise minimum offsets), which is conservative but restores the
    property; the downgrade is logged and flagged.
    """

    def __init__(self, prediction: PredictionModel, bounding: BoundingSequence,
                 horizon_N, epsilon, policy=DEFAULT):
        if epsilon <= 0:
            raise GeometryError("epsilon must be positive")
        self.prediction = prediction
        self.bounding = bounding
        self.hops = HOperators(prediction)
        self.table = _SupportTable(prediction, bounding, self.hops)
        self.horizon_N = int(horizon_N)
        self.epsilon = float(epsilon)
        self.policy = policy
        self.monotone = True
        self._build_steady_offsets()

    def _build_steady_offsets(self):
        n_bar = self.bounding.n_bar
        eps_term = self.epsilon * self.table.row_norms
        rows = []
        for n in range(n_bar + 1):
            rows.append(self.table.tight_offsets(n, self.horizon_N) - eps_term)
        steady = np.array(rows)
        diffs = np.diff(steady, axis=0)
        if np.min(diffs) < -self.policy.algebraic:
            self.monotone = False
            worst = float(np.min(diffs))
            logger.warning(
                "steady-state sets not monotone (worst step %.3e); "
                "falling back to their intersection", worst)
            steady = np.tile(np.min(steady, axis=0), (n_bar + 1, 1))
        self._steady_offsets = steady
        empty = self.table.offsets_empty(steady[0], self.policy.algebraic)
        if empty:
            raise InfeasibleError(
                "steady-state constraint set is empty; constraints too tight "
                "for the achievable estimation error")

    def Y_cl_nk(self, n, k) -> Polytope:
        return Polytope(self.table.G, self.table.tight_offsets(n, k))

    def Y_tilde(self, n) -> Polytope:
        n = min(n, self.bounding.n_bar)
        return Polytope(self.table.G, self._steady_offsets[n])

    def steady_offsets(self, n):
        return self._steady_offsets[min(n, self.bounding.n_bar)]


def tightened_set(prediction: PredictionModel, bounding: BoundingSequence,
                  n, k) -> Polytope:
    """Constraint set for prediction step k from time n (standalone variant)."""
    hops = HOperators(prediction)
    table = _SupportTable(prediction, bounding, hops)
    return Polytope(table.G, table.tight_offsets(n, k))


def steady_state_set(prediction: PredictionModel, bounding: BoundingSequence,
                     n, horizon_N, epsilon, policy=DEFAULT) -> Polytope:
    """Steady-state command constraint set for time n (standalone variant)."""
    tight = TightenedConstraints(prediction, bounding, horizon_N, epsilon, policy)
    Y = tight.Y_tilde(n)
    if Y.is_empty():
        raise InfeasibleError("steady-state constraint set is empty")
    return Y


class AdmissibleSet:
    """Finitely-determined admissible set of (v, x_hat) pairs at time n.

    Rows are unit-normalized and partitioned into the steady-state block
    followed by one block per prediction step k = 0..k_star.
    """

    def __init__(self, A, b, n, k_star, n_v, n_state, blocks):
        self.A = A
        self.b = b
        self.n = int(n)
        self.k_star = int(k_star)
        self.n_v = int(n_v)
        self.n_state = int(n_state)
        self.blocks = blocks          # list of (label, slice)
        self._box = None
        self._cheb = None

    @property
    def dim(self):
        return self.n_v + self.n_state

    def margins(self, z):
        return self.b - self.A @ np.asarray(z, dtype=float).reshape(-1)

    def contains(self, z, tol=None):
        tol = DEFAULT.algebraic if tol is None else tol
        return bool(np.min(self.margins(z)) >= -tol)

    def contains_batch(self, Z, tol=None):
        tol = DEFAULT.algebraic if tol is None else tol
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return (self.b[None, :] - Z @ self.A.T).min(axis=1) >= -tol

    def block_rows(self, label):
        for name, sl in self.blocks:
            if name == label:
                return sl
        raise KeyError(label)

    def base_box(self):
        """Outer box from the steady-state and k=0 blocks (for sampling)."""
        if self._box is None:
            sl0 = self.block_rows("k0")
            sls = self.block_rows("steady")
            A = np.vstack([self.A[sls], self.A[sl0]])
            b = np.concatenate([self.b[sls], self.b[sl0]])
            lower = np.empty(self.dim)
            upper = np.empty(self.dim)
            for i in range(self.dim):
                e = np.zeros(self.dim)
                e[i] = 1.0
                upper[i] = _lp_max(e, A, b)
                lower[i] = -_lp_max(-e, A, b)
            self._box = (lower, upper)
        return self._box

    def chebyshev(self):
        if self._cheb is None:
            self._cheb = chebyshev_center(self.A, self.b)
        return self._cheb

    def sample(self, rng, n_samples, margin=0.0, max_batches=64):
        """Interior samples by rejection from the base box, with a dilation
        fallback anchored at the Chebyshev center when acceptance collapses."""
        lower, upper = self.base_box()
        out = []
        need = n_samples
        tried = 0
        accepted = 0
        for _ in range(max_batches):
            batch = max(256, 4 * need)
            Z = rng.uniform(lower, upper, size=(batch, self.dim))
            ok = self.contains_batch(Z, tol=-margin)
            tried += batch
            accepted += int(np.count_nonzero(ok))
            take = Z[ok][:need]
            out.append(take)
            need -= len(take)
            if need <= 0:
                return np.vstack(out)
            if tried >= 4096 and accepted / tried < 1e-3:
                break
        c, _ = self.chebyshev()
        Z = rng.uniform(lower, upper, size=(need, self.dim))
        out.append(_dilate_to_interior(Z, c, self.A, self.b, margin, rng))
        return np.vstack(out)


def _lp_max(c, A, b):
    res = linprog(-c, A_ub=A, b_ub=b, bounds=(None, None), method="highs")
    if res.status == 2:
        raise InfeasibleError("admissible set is empty")
    if res.status == 3:
        raise GeometryError("admissible set base block is unbounded")
    return -res.fun


def _dilate_to_interior(Z, center, A, b, margin, rng):
    """Pull box samples toward an interior anchor until strictly feasible."""
    d = Z - center[None, :]
    rates = d @ A.T
    slack = (b - margin) - center @ A.T
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(rates > 0, slack[None, :] / rates, np.inf)
    t_max = np.minimum(ratios.min(axis=1), 1.0)
    u = rng.uniform(size=len(Z)) ** (1.0 / Z.shape[1])
    return center[None, :] + d * (t_max * u)[:, None]


class AdmissibleSequence:
    """Admissible sets for n = 0..n_bar; constant beyond n_bar."""

    def __init__(self, sets, n_bar):
        if len(sets) != n_bar + 1:
            raise GeometryError("need exactly n_bar + 1 admissible sets")
        self.sets = list(sets)
        self.n_bar = int(n_bar)

    def at(self, n) -> AdmissibleSet:
        return self.sets[min(n, self.n_bar)]


def _assemble_block(table: _SupportTable, hops: HOperators, n, k):
    """Rows and offsets of prediction-step block k at time n (unnormalized)."""
    Gv = table.G @ hops.Hy(k)
    Gx = table.G @ (table.prediction.C_cl @ hops.power(k))
    return np.hstack([Gv, Gx]), table.tight_offsets(n, k)


def _normalize_rows(A, b, policy):
    norms = np.linalg.norm(A, axis=1)
    rows_ok = norms > 1e-14
    if not np.all(rows_ok):
        bad = b[~rows_ok]
        if np.any(bad < -policy.algebraic):
            raise InfeasibleError("constraint row with zero normal and negative offset")
    A = A[rows_ok] / norms[rows_ok, None]
    return A, b[rows_ok] / norms[rows_ok], rows_ok


class _WitnessPool:
    """Feasible points used to certify non-redundancy without an LP."""

    def __init__(self, dim, cap=48):
        self.points = np.empty((0, dim))
        self.cap = cap

    def add(self, z):
        self.points = np.vstack([self.points, z[None, :]])[-self.cap:]

    def filter_feasible(self, A, b, tol):
        if len(self.points) == 0:
            return
        ok = (b[None, :] - self.points @ A.T).min(axis=1) >= -tol
        self.points = self.points[ok]

    def violates(self, rows, offsets, tol):
        if len(self.points) == 0:
            return False
        return bool(np.any(self.points @ rows.T > offsets[None, :] + tol))


def finite_determination(prediction: PredictionModel,
                         tightened: TightenedConstraints, n, k_max=2000,
                         policy=DEFAULT) -> AdmissibleSet:
    """Build the admissible set at time n by incremental block addition.

    Blocks are appended for k = 0, 1, 2, ... until every row of the next
    block is redundant for the polytope built so far (one LP per undecided
    row, short-circuited by witness points and an outer-box screen).
    """
    table = tightened.table
    hops = tightened.hops
    n_v = prediction.n_v
    n_state = prediction.n_state
    dim = n_v + n_state

    steady_A = np.hstack([table.G @ hops.Hy_inf,
                          np.zeros((len(table.bY), n_state))])
    steady_b = tightened.steady_offsets(n)
    A0, b0 = _assemble_block(table, hops, n, 0)
    if tightened.table.offsets_empty(b0, policy.algebraic):
        raise InfeasibleError(f"constraint set at n={n}, k=0 is empty")

    rows = []
    offsets = []
    blocks = []
    pos = 0
    for label, (Ab, bb) in (("steady", (steady_A, steady_b)), ("k0", (A0, b0))):
        An, bn, _ = _normalize_rows(Ab, bb, policy)
        rows.append(An)
        offsets.append(bn)
        blocks.append((label, slice(pos, pos + len(bn))))
        pos += len(bn)

    A_cur = np.vstack(rows)
    b_cur = np.concatenate(offsets)
    pool = _WitnessPool(dim)
    tol = policy.redundancy
    box = None

    k = 0
    while k < k_max:
        cand_A, cand_b = _assemble_block(table, hops, n, k + 1)
        if tightened.table.offsets_empty(cand_b, policy.algebraic):
            raise InfeasibleError(f"constraint set at n={n}, k={k + 1} is empty")
        cand_A, cand_b, _ = _normalize_rows(cand_A, cand_b, policy)
        if pool.violates(cand_A, cand_b, tol):
            added = True
        else:
            if box is None:
                box = _outer_box(A_cur, b_cur, dim)
            screen = (np.maximum(cand_A, 0) @ box[1]
                      + np.minimum(cand_A, 0) @ box[0]) <= cand_b + tol
            added = False
            for i in np.flatnonzero(~screen):
                res = linprog(-cand_A[i], A_ub=A_cur, b_ub=b_cur,
                              bounds=(None, None), method="highs")
                if res.status == 2:
                    raise InfeasibleError(f"admissible set at n={n} is empty")
                if res.status == 3:
                    raise GeometryError(
                        "admissible set unbounded; check constraint compactness")
                opt = -res.fun
                if opt > cand_b[i] + tol:
                    pool.add(res.x)
                    added = True
                    break
        if not added:
            break
        blocks.append((f"k{k + 1}", slice(pos, pos + len(cand_b))))
        pos += len(cand_b)
        A_cur = np.vstack([A_cur, cand_A])
        b_cur = np.concatenate([b_cur, cand_b])
        pool.filter_feasible(cand_A, cand_b, 0.0)
        k += 1
    else:
        raise VerificationError(
            f"finite determination did not terminate within k_max={k_max}")

    return AdmissibleSet(A_cur, b_cur, n, k, n_v, n_state, blocks)


def _outer_box(A, b, dim):
    lower = np.empty(dim)
    upper = np.empty(dim)
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        upper[i] = _lp_max(e, A, b)
        lower[i] = -_lp_max(-e, A, b)
    return lower, upper


def build_sequence(prediction: PredictionModel, bounding: BoundingSequence,
                   horizon_N, epsilon, k_max=2000, audit_samples=2000,
                   audit_seed=0, policy=DEFAULT):
    """Admissible sets for all n up to the bounding horizon, plus an audit.

    Returns (sequence, tightened, report).  The invariance audit runs on
    randomized samples before the sequence is released; a violation indicates
    a tolerance or construction defect and raises.
    """
    tightened = TightenedConstraints(prediction, bounding, horizon_N, epsilon,
                                     policy)
    sets = []
    for n in range(bounding.n_bar + 1):
        sets.append(finite_determination(prediction, tightened, n, k_max, policy))
    seq = AdmissibleSequence(sets, bounding.n_bar)
    report = None
    if audit_samples > 0:
        report = invariance_audit(seq, prediction, bounding, audit_samples,
                                  seed=audit_seed, policy=policy)
        if report.violations > 0:
            raise VerificationError(
                f"invariance audit failed: {report.violations} violations "
                f"(worst margin {report.worst_margin:.3e})")
    return seq, tightened, report


@dataclass
class AuditReport:
    samples: int
    violations: int
    worst_margin: float
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return self.violations == 0


def sample_error_set(S: ConvexSet, rng, n=1):
    """Random points of a bounding set (uniform-ish; used by audits only)."""
    if isinstance(S, Ellipsoid):
        return S.sample(rng, n)
    if isinstance(S, Box):
        return S.sample(rng, n)
    if isinstance(S, Polytope):
        V = S.vertex_array()
        lower, upper = V.min(axis=0), V.max(axis=0)
        out = np.empty((n, S.dim))
        filled = 0
        for attempt in range(64):
            Z = rng.uniform(lower, upper, size=(max(256, n), S.dim))
            ok = S.contains_batch(Z)
            take = Z[ok][: n - filled]
            out[filled:filled + len(take)] = take
            filled += len(take)
            if filled >= n:
                return out
            if attempt >= 3 and filled == 0:
                break
        # low acceptance (thin set): draw from centroid-vertex segments instead
        idx = rng.integers(0, len(V), size=n - filled)
        lam = rng.uniform(size=(n - filled, 1))
        center = V.mean(axis=0)
        out[filled:] = center[None, :] + lam * (V[idx] - center[None, :])
        return out
    raise GeometryError(f"cannot sample from {type(S).__name__}")


def invariance_audit(seq: AdmissibleSequence, prediction: PredictionModel,
                     bounding: BoundingSequence, samples, seed=0,
                     policy=DEFAULT) -> AuditReport:
    """Check one-step invariance under a held command on random triples.

    Draws random (n, (v, x_hat) in the admissible set at n, e in the bounding
    set at n) and asserts the successor pair lies in the admissible set at
    n + 1.  Sample points are taken strictly inside (interior margin) so the
    check is robust to the redundancy-test tolerance used at construction.
    """
    rng = np.random.default_rng(seed)
    n_v = prediction.n_v
    worst = np.inf
    violations = 0
    failures = []
    per_call = 200
    done = 0
    while done < samples:
        m = min(per_call, samples - done)
        n = int(rng.integers(0, bounding.n_bar + 1))
        aset = seq.at(n)
        nxt = seq.at(n + 1)
        Z = aset.sample(rng, m, margin=policy.interior_margin)
        E = sample_error_set(bounding.at(n), rng, m)
        V, X = Z[:, :n_v], Z[:, n_v:]
        X_next = (X @ prediction.A_cl.T + V @ prediction.B_cl.T
                  + E @ prediction.B_w.T)
        Z_next = np.hstack([V, X_next])
        margins = (nxt.b[None, :] - Z_next @ nxt.A.T).min(axis=1)
        worst = min(worst, float(margins.min()))
        bad = margins < -10 * policy.interior_margin
        if np.any(bad):
            violations += int(np.count_nonzero(bad))
            for i in np.flatnonzero(bad)[:5]:
                failures.append({"n": n, "z": Z[i].tolist(),
                                 "e": E[i].tolist(),
                                 "margin": float(margins[i])})
        done += m
    return AuditReport(samples=done, violations=violations,
                       worst_margin=float(worst), failures=failures)
