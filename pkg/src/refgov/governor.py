"""Online reference governor: scalar line search toward the desired reference.

At each step the governor moves the applied command from its previous value
toward the requested reference by the largest fraction kappa in [0, 1] that
keeps the pair (command, state estimate) inside the current admissible set.
Because the admissible set is a polytope and the command moves along a
segment, the optimal fraction has a closed form: one slack/rate ratio per
facet.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .admissible import AdmissibleSequence, AdmissibleSet
from .numerics import DEFAULT


@dataclass
class GovernorState:
    v_prev: np.ndarray
    n: int = 0


@dataclass
class GovernorOutcome:
    kappa_star: float
    v_applied: np.ndarray
    feasible: bool
    binding_row: Optional[int] = None


def kappa_max(admissible: AdmissibleSet, v_prev, x_hat, r,
              policy=DEFAULT) -> GovernorOutcome:
    """Largest step fraction keeping (v, x_hat) admissible.

    Each row g_v'v + g_x'x <= h contributes slack s = h - g_v'v_prev - g_x'x
    and rate d = g_v'(r - v_prev); rows with positive rate cap kappa at s/d.
    ``feasible`` reports whether holding the previous command is admissible
    at all (negative slack means the governor was initialized or perturbed
    outside the admissible set).
    """
    v_prev = np.asarray(v_prev, dtype=float).reshape(-1)
    x_hat = np.asarray(x_hat, dtype=float).reshape(-1)
    r = np.asarray(r, dtype=float).reshape(-1)
    n_v = admissible.n_v
    z = np.concatenate([v_prev, x_hat])
    slack = admissible.b - admissible.A @ z
    feasible = bool(np.min(slack) >= -policy.algebraic)
    delta = r - v_prev
    if not feasible:
        return GovernorOutcome(0.0, v_prev.copy(), False)
    if np.linalg.norm(delta) == 0.0:
        return GovernorOutcome(1.0, v_prev.copy(), True)
    rates = admissible.A[:, :n_v] @ delta
    active = rates > policy.algebraic
    if not np.any(active):
        return GovernorOutcome(1.0, r.copy(), True)
    ratios = slack[active] / rates[active]
    kappa = float(np.clip(np.min(ratios), 0.0, 1.0))
    binding = None
    if kappa < 1.0:
        idx = np.flatnonzero(active)
        binding = int(idx[np.argmin(ratios)])
    return GovernorOutcome(kappa, v_prev + kappa * delta, True, binding)


def governor_step(state: GovernorState, seq: AdmissibleSequence, x_hat, r,
                  policy=DEFAULT):
    """Apply one governor update using the admissible set at the current step."""
    aset = seq.at(state.n)
    outcome = kappa_max(aset, state.v_prev, x_hat, r, policy)
    v_next = outcome.v_applied if outcome.feasible else state.v_prev
    return GovernorState(v_prev=np.asarray(v_next, dtype=float),
                         n=state.n + 1), outcome
