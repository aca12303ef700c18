"""Centralized numeric tolerance policy.

All tolerance knobs used across the library live in one record so that
reproducibility studies can tighten or loosen everything from a single
place.  ``algebraic`` guards matrix identities and membership tests,
``geometric`` guards vertex/halfspace computations that go through LP or
convex-hull machinery, and ``redundancy`` is the (deliberately looser)
threshold used when deciding that a constraint row is redundant.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class NumericPolicy:
    algebraic: float = 1e-9
    geometric: float = 1e-7
    redundancy: float = 1e-7
    # margin used when sampling strictly interior points of a polytope
    interior_margin: float = 1e-6
    # eigenvalue modulus must stay below 1 - schur_margin
    schur_margin: float = 1e-9


DEFAULT = NumericPolicy()
