"""Convex set representations and the set algebra used by the governor.

Three concrete representations cover everything the constraint machinery
needs: axis-aligned :class:`Box`, :class:`Ellipsoid` (quadratic-form sub-level
set) and H-rep :class:`Polytope` with an optional vertex cache.  Affine images
and Minkowski sums of these are kept lazy (:class:`AffineMap`,
:class:`MinkowskiSum`) because the downstream constraint-tightening code only
ever queries support functions, and the support of an affine image or of a sum
has a closed form in terms of the operands.

Every set answers ``support(a) = max_{s in S} a's``.  Pontryagin differences,
containment and subset tests are all reduced to support evaluations.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, HalfspaceIntersection

from .errors import DimensionError, GeometryError
from .numerics import DEFAULT


def _as_vector(a, dim=None):
    a = np.asarray(a, dtype=float).reshape(-1)
    if dim is not None and a.size != dim:
        raise DimensionError(f"expected vector of length {dim}, got {a.size}")
    return a


class ConvexSet:
    """Interface: compact convex set in R^dim with a support function."""

    dim: int

    def support(self, a) -> float:
        """max_{s in S} a's for a single direction ``a``."""
        return float(self.support_batch(np.atleast_2d(np.asarray(a, dtype=float)))[0])

    def support_batch(self, A) -> np.ndarray:
        """Support values for each row of the (q, dim) direction matrix."""
        raise NotImplementedError

    def contains(self, x, tol=None) -> bool:
        raise NotImplementedError

    def vertex_array(self) -> np.ndarray:
        """(m, dim) array of points whose hull is the set, if available."""
        raise GeometryError(f"{type(self).__name__} has no vertex representation")

    def halfspaces(self):
        """(A, b) with the set equal to {x: A x <= b}, if available."""
        raise GeometryError(f"{type(self).__name__} has no halfspace representation")


class Box(ConvexSet):
    """Axis-aligned box {x: lower <= x <= upper}.  May be degenerate (flat)."""

    def __init__(self, lower, upper):
        self.lower = _as_vector(lower)
        self.upper = _as_vector(upper, self.lower.size)
        if np.any(self.upper < self.lower):
            raise GeometryError("empty box: upper < lower componentwise")
        self.dim = self.lower.size

    def __repr__(self):
        return f"Box({self.lower.tolist()}, {self.upper.tolist()})"

    def support_batch(self, A):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.shape[1] != self.dim:
            raise DimensionError("direction dimension mismatch")
        return np.maximum(A * self.lower, A * self.upper).sum(axis=1)

    def contains(self, x, tol=None):
        tol = DEFAULT.algebraic if tol is None else tol
        x = _as_vector(x, self.dim)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def vertex_array(self):
        # degenerate coordinates produce repeated combinations; keep uniques
        cols = [np.unique([lo, hi]) for lo, hi in zip(self.lower, self.upper)]
        return np.array(list(itertools.product(*cols)), dtype=float)

    def halfspaces(self):
        eye = np.eye(self.dim)
        return np.vstack([eye, -eye]), np.concatenate([self.upper, -self.lower])

    def to_polytope(self):
        A, b = self.halfspaces()
        return Polytope(A, b, vertices=self.vertex_array())

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    def sample(self, rng, n=1):
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))


class Ellipsoid(ConvexSet):
    """{x: x' P x <= level} with P symmetric positive definite."""

    def __init__(self, P, level):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        if P.shape[0] != P.shape[1]:
            raise DimensionError("P must be square")
        if np.max(np.abs(P - P.T)) > 1e-10 * max(1.0, np.max(np.abs(P))):
            raise GeometryError("P must be symmetric")
        P = 0.5 * (P + P.T)
        eigvals = np.linalg.eigvalsh(P)
        if eigvals[0] <= 0:
            raise GeometryError("P must be positive definite")
        if level < 0:
            raise GeometryError("level must be nonnegative")
        self.P = P
        self.level = float(level)
        self.dim = P.shape[0]
        self._Pinv = np.linalg.inv(P)

    def __repr__(self):
        return f"Ellipsoid(dim={self.dim}, level={self.level:g})"

    def support_batch(self, A):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.shape[1] != self.dim:
            raise DimensionError("direction dimension mismatch")
        quad = np.einsum("ij,jk,ik->i", A, self._Pinv, A)
        return np.sqrt(self.level * np.maximum(quad, 0.0))

    def contains(self, x, tol=None):
        tol = DEFAULT.algebraic if tol is None else tol
        x = _as_vector(x, self.dim)
        return bool(x @ self.P @ x <= self.level + tol)

    def quad_form(self, X):
        """x' P x for each row of X."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.einsum("ij,jk,ik->i", X, self.P, X)

    def sample(self, rng, n=1):
        """Uniform samples (in the ellipsoid's volume measure)."""
        z = rng.normal(size=(n, self.dim))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        r = rng.uniform(size=(n, 1)) ** (1.0 / self.dim)
        evals, evecs = np.linalg.eigh(self.P)
        half = evecs @ np.diag(1.0 / np.sqrt(evals)) @ evecs.T
        return np.sqrt(self.level) * (z * r) @ half


class Polytope(ConvexSet):
    """H-rep polytope {x: A x <= b} with an optional vertex cache.

    The vertex cache, when present, is trusted for support queries (exact max
    over vertices); without it supports fall back to an LP.  Emptiness and
    boundedness are established on demand via LP.
    """

    def __init__(self, A, b, vertices=None, validate=False):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = _as_vector(b, A.shape[0])
        self.A = A
        self.b = b
        self.dim = A.shape[1]
        self.vertices = None
        if vertices is not None:
            V = np.atleast_2d(np.asarray(vertices, dtype=float))
            if V.shape[1] != self.dim:
                raise DimensionError("vertex dimension mismatch")
            self.vertices = V
            if validate:
                self._validate_vertices()
        self._empty = None

    def __repr__(self):
        nv = "-" if self.vertices is None else len(self.vertices)
        return f"Polytope(dim={self.dim}, rows={len(self.b)}, vertices={nv})"

    def _validate_vertices(self, tol=1e-8):
        scale = np.maximum(1.0, np.abs(self.b))
        slack = self.A @ self.vertices.T - self.b[:, None]
        if np.max(slack / scale[:, None]) > tol:
            raise GeometryError("cached vertex violates a halfspace")
        # every halfspace must touch at least one vertex
        touched = np.max(slack / scale[:, None], axis=1) >= -tol
        if not np.all(touched):
            idx = int(np.argmin(touched))
            raise GeometryError(f"halfspace {idx} not supported by any vertex")

    def support_batch(self, A):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.shape[1] != self.dim:
            raise DimensionError("direction dimension mismatch")
        if self.vertices is not None:
            return np.max(A @ self.vertices.T, axis=1)
        return np.array([self._support_lp(a) for a in A])

    def _support_lp(self, a):
        res = linprog(-a, A_ub=self.A, b_ub=self.b, bounds=(None, None), method="highs")
        if res.status == 3:
            raise GeometryError("support query unbounded in this direction")
        if res.status == 2:
            raise GeometryError("support query on empty polytope")
        if not res.success:
            raise GeometryError(f"LP failure in support query: {res.message}")
        return -res.fun

    def contains(self, x, tol=None):
        tol = DEFAULT.algebraic if tol is None else tol
        x = _as_vector(x, self.dim)
        norms = np.maximum(np.linalg.norm(self.A, axis=1), 1e-300)
        return bool(np.max((self.A @ x - self.b) / norms) <= tol)

    def contains_batch(self, X, tol=None):
        tol = DEFAULT.algebraic if tol is None else tol
        X = np.atleast_2d(np.asarray(X, dtype=float))
        norms = np.maximum(np.linalg.norm(self.A, axis=1), 1e-300)
        margins = (self.b[None, :] - X @ self.A.T) / norms[None, :]
        return np.min(margins, axis=1) >= -tol

    def is_empty(self, tol=None):
        if self._empty is None:
            res = linprog(
                np.zeros(self.dim), A_ub=self.A, b_ub=self.b,
                bounds=(None, None), method="highs",
            )
            self._empty = res.status == 2
        return self._empty

    def vertex_array(self):
        if self.vertices is None:
            self.vertices = vertices_of(self)
        return self.vertices

    def halfspaces(self):
        return self.A, self.b


class AffineMap(ConvexSet):
    """Lazy image M @ S of a convex set under a linear map."""

    def __init__(self, M, base: ConvexSet):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if M.shape[1] != base.dim:
            raise DimensionError("map columns must equal base dimension")
        self.M = M
        self.base = base
        self.dim = M.shape[0]

    def support_batch(self, A):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.shape[1] != self.dim:
            raise DimensionError("direction dimension mismatch")
        return self.base.support_batch(A @ self.M)

    def vertex_array(self):
        return self.base.vertex_array() @ self.M.T

    def contains(self, x, tol=None):
        # membership in a mapped set requires a hull test over mapped vertices
        tol = DEFAULT.algebraic if tol is None else tol
        return point_in_hull(_as_vector(x, self.dim), self.vertex_array(), tol)


class MinkowskiSum(ConvexSet):
    """Lazy Minkowski sum; support is the sum of the parts' supports."""

    def __init__(self, parts):
        parts = list(parts)
        if not parts:
            raise GeometryError("empty Minkowski sum")
        dim = parts[0].dim
        for p in parts:
            if p.dim != dim:
                raise DimensionError("summand dimension mismatch")
        self.parts = parts
        self.dim = dim

    def support_batch(self, A):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        total = np.zeros(A.shape[0])
        for p in self.parts:
            total += p.support_batch(A)
        return total


def point_in_hull(x, points, tol=1e-9):
    """True if x is a convex combination of the given points (LP test)."""
    points = np.atleast_2d(points)
    m = len(points)
    A_eq = np.vstack([points.T, np.ones((1, m))])
    b_eq = np.concatenate([x, [1.0]])
    res = linprog(
        np.zeros(m), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs",
        options={"primal_feasibility_tolerance": max(tol, 1e-10)},
    )
    return bool(res.status == 0)


def support(S: ConvexSet, a) -> float:
    """Support function h_S(a) = max_{s in S} a's."""
    return S.support(a)


def minkowski_sum(S1: ConvexSet, S2: ConvexSet) -> ConvexSet:
    """Minkowski sum, exact for box+box and vertex+vertex, lazy otherwise."""
    if S1.dim != S2.dim:
        raise DimensionError("Minkowski sum of sets in different dimensions")
    if isinstance(S1, Box) and isinstance(S2, Box):
        return Box(S1.lower + S2.lower, S1.upper + S2.upper)
    try:
        V1 = S1.vertex_array()
        V2 = S2.vertex_array()
    except GeometryError:
        return MinkowskiSum([S1, S2])
    sums = (V1[:, None, :] + V2[None, :, :]).reshape(-1, S1.dim)
    if S1.dim == 1:
        lo, hi = float(np.min(sums)), float(np.max(sums))
        return Polytope(np.array([[1.0], [-1.0]]), np.array([hi, -lo]),
                        vertices=np.array([[lo], [hi]]))
    try:
        hull = ConvexHull(sums)
    except Exception:
        # flat sums (e.g. collinear segments) have no full-dimensional hull
        return MinkowskiSum([S1, S2])
    return Polytope(hull.equations[:, :-1], -hull.equations[:, -1],
                    vertices=sums[hull.vertices])


def pontryagin_diff(S1: ConvexSet, S2: ConvexSet, policy=DEFAULT) -> Polytope:
    """S1 - S2 = {x: x + s in S1 for all s in S2}, for H-rep (or box) S1.

    Each halfspace offset of S1 is tightened by the support of S2 in the
    halfspace normal.  The result can be empty; emptiness is a queryable state
    of the returned polytope, not an error.
    """
    if S1.dim != S2.dim:
        raise DimensionError("Pontryagin difference of sets in different dimensions")
    A, b = S1.halfspaces()
    return Polytope(A, b - S2.support_batch(A))


def affine_image(S: ConvexSet, M) -> ConvexSet:
    """Image M @ S.  Exact closed forms where cheap, lazy support otherwise."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] != S.dim:
        raise DimensionError("map columns must equal set dimension")
    if isinstance(S, Ellipsoid) and M.shape[0] == M.shape[1]:
        det = np.linalg.det(M)
        if abs(det) > 1e-12:
            Minv = np.linalg.inv(M)
            return Ellipsoid(Minv.T @ S.P @ Minv, S.level)
    return AffineMap(M, S)


def contains(S: ConvexSet, x, tol=None) -> bool:
    return S.contains(x, tol=tol)


def subset_of(S1: ConvexSet, S2: ConvexSet, tol=None) -> bool:
    """S1 subseteq S2, decided through supports of S1 against S2's facets.

    S2 must expose halfspaces, except for the ellipsoid target case which is
    decided by checking the vertices of S1 against the quadratic form.
    """
    tol = DEFAULT.geometric if tol is None else tol
    if S1.dim != S2.dim:
        raise DimensionError("subset test between different dimensions")
    if isinstance(S2, Ellipsoid):
        V = S1.vertex_array()
        return bool(np.max(S2.quad_form(V)) <= S2.level * (1 + tol) + tol)
    A, b = S2.halfspaces()
    norms = np.maximum(np.linalg.norm(A, axis=1), 1e-300)
    return bool(np.all((S1.support_batch(A) - b) / norms <= tol))


def chebyshev_center(A, b):
    """Center and radius of the largest ball inscribed in {x: A x <= b}."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = _as_vector(b, A.shape[0])
    norms = np.linalg.norm(A, axis=1)
    dim = A.shape[1]
    c = np.zeros(dim + 1)
    c[-1] = -1.0
    A_lp = np.hstack([A, norms[:, None]])
    res = linprog(c, A_ub=A_lp, b_ub=b, bounds=[(None, None)] * dim + [(0, None)],
                  method="highs")
    if res.status == 2:
        raise GeometryError("Chebyshev center of an empty polytope")
    if res.status == 3 or not res.success:
        raise GeometryError(f"Chebyshev LP failed: {res.message}")
    return res.x[:dim], float(res.x[dim])


def bounding_box(P: Polytope):
    """Componentwise (lower, upper) bounds of an H-rep polytope via LPs."""
    lower = np.empty(P.dim)
    upper = np.empty(P.dim)
    for i in range(P.dim):
        e = np.zeros(P.dim)
        e[i] = 1.0
        upper[i] = P._support_lp(e) if P.vertices is None else np.max(P.vertices[:, i])
        lower[i] = -P._support_lp(-e) if P.vertices is None else np.min(P.vertices[:, i])
    return lower, upper


def vertices_of(P: Polytope, policy=DEFAULT) -> np.ndarray:
    """Enumerate the extreme points of a bounded H-rep polytope.

    The polytope is preconditioned to a unit-scale box (its axis widths can
    span many orders of magnitude), exactly-flat coordinates are pinned to
    their fixed value, and the intersection is enumerated by the dual
    convex-hull method around the Chebyshev center.  Intended for the small
    ambient dimensions used by this library (<= ~6).
    """
    if P.vertices is not None:
        return P.vertices
    lower, upper = bounding_box(P)
    center = 0.5 * (lower + upper)
    widths = upper - lower
    scale = np.max(np.abs(np.stack([lower, upper])), axis=0)
    flat = widths <= 1e-13 * np.maximum(1.0, scale)
    free = ~flat
    if not np.any(free):
        return center[None, :]
    # substitute pinned coordinates, then enumerate in the reduced space
    A_red = P.A[:, free]
    b_red = P.b - P.A[:, flat] @ center[flat]
    if np.count_nonzero(free) == 1:
        j = int(np.flatnonzero(free)[0])
        verts = np.tile(center, (2, 1))
        verts[0, j] = lower[j]
        verts[1, j] = upper[j]
        return verts
    keep = np.linalg.norm(A_red, axis=1) > 1e-300
    A_red, b_red = A_red[keep], b_red[keep]
    S = np.maximum(widths[free] * 0.5, 1e-300)
    A_s = A_red * S[None, :]
    row_n = np.linalg.norm(A_s, axis=1)
    good = row_n > 1e-300
    A_s = A_s[good] / row_n[good, None]
    b_s = (b_red[good] - A_red[good] @ center[free]) / row_n[good]
    c_s, r = chebyshev_center(A_s, b_s)
    if r <= 1e-12:
        raise GeometryError("polytope is not full-dimensional after pinning")
    hs = np.hstack([A_s, -b_s[:, None]])
    try:
        inter = HalfspaceIntersection(hs, c_s).intersections
    except Exception as ex:  # qhull failures surface as QhullError
        raise GeometryError(f"vertex enumeration failed: {ex}") from ex
    # deduplicate in the scaled space, then map back
    key = np.round(inter / max(policy.geometric * 1e-2, 1e-12)).astype(np.int64)
    _, idx = np.unique(key, axis=0, return_index=True)
    inter = inter[np.sort(idx)]
    verts = np.tile(center, (len(inter), 1))
    verts[:, free] = inter * S[None, :] + center[free]
    return verts


def prune_redundant(P: Polytope, policy=DEFAULT) -> Polytope:
    """Remove halfspaces whose deletion leaves the feasible set unchanged.

    One LP per row: maximize the row over the polytope formed by the other
    (kept) rows; the row is redundant iff the optimum does not exceed its
    offset.  Unboundedness of the relaxed LP means the row is essential.
    """
    if P.is_empty():
        raise GeometryError("cannot prune an empty polytope")
    A, b = P.A.copy(), P.b.copy()
    keep = np.ones(len(b), dtype=bool)
    for i in range(len(b)):
        mask = keep.copy()
        mask[i] = False
        if not np.any(mask):
            continue
        res = linprog(-A[i], A_ub=A[mask], b_ub=b[mask], bounds=(None, None),
                      method="highs")
        if res.status == 3:
            continue  # unbounded without this row: essential
        if res.success and -res.fun <= b[i] + policy.redundancy * max(1.0, abs(b[i])):
            keep[i] = False
    return Polytope(A[keep], b[keep])
