"""Closed-loop simulation of plant, observer, controller and governor.

Disturbance realizations come from seeded profile generators that respect
both the magnitude bound and the per-step rate bound; admissibility of every
generated sequence is asserted after generation.  Traces record everything
needed to reproduce the study figures externally (states, estimates,
commands, constraint margins) and export to CSV and JSON.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .admissible import AdmissibleSequence
from .errors import DimensionError, GeometryError, InfeasibleError
from .governor import GovernorState, governor_step
from .models import control_input, observer_step
from .numerics import DEFAULT
from .sets import Box

PROFILE_KINDS = ("constant", "ramp_saturate", "sinusoid_rate_limited",
                 "random_walk")


@dataclass
class DisturbanceProfile:
    """Seeded generator of rate-bounded disturbance sequences.

    ``target``/``rate`` parameterize the ramp profile, ``amplitude``/``period``
    the sinusoid; the random walk draws increments uniformly from the rate
    set.  Values are clipped to the magnitude box and increments to the rate
    box, then the whole sequence is checked again after generation.
    """

    kind: str = "ramp_saturate"
    seed: int = 0
    target: Optional[list] = None
    rate: Optional[list] = None
    amplitude: Optional[list] = None
    period_steps: Optional[float] = None

    def generate(self, W: Box, W_tilde: Box, steps, w0=None) -> np.ndarray:
        if self.kind not in PROFILE_KINDS:
            raise GeometryError(f"unknown disturbance kind {self.kind!r}")
        n_w = W.dim
        rng = np.random.default_rng(self.seed)
        w0 = np.zeros(n_w) if w0 is None else np.asarray(w0, dtype=float)
        w = np.empty((steps + 1, n_w))
        w[0] = np.clip(w0, W.lower, W.upper)
        rate_hi = W_tilde.upper
        rate_lo = W_tilde.lower
        if self.kind == "constant":
            w[1:] = w[0]
        elif self.kind == "ramp_saturate":
            if self.target is None:
                raise GeometryError("ramp_saturate profile needs a target")
            target = np.asarray(self.target, dtype=float)
            rate = (np.abs(np.asarray(self.rate, dtype=float))
                    if self.rate is not None else 0.5 * rate_hi)
            for k in range(steps):
                step = np.clip(target - w[k], -rate, rate)
                step = np.clip(step, rate_lo, rate_hi)
                w[k + 1] = np.clip(w[k] + step, W.lower, W.upper)
        elif self.kind == "sinusoid_rate_limited":
            amp = np.asarray(self.amplitude, dtype=float)
            period = float(self.period_steps)
            phase = rng.uniform(0, 2 * np.pi, size=n_w)
            for k in range(steps):
                want = amp * np.sin(2 * np.pi * (k + 1) / period + phase)
                step = np.clip(want - w[k], rate_lo, rate_hi)
                w[k + 1] = np.clip(w[k] + step, W.lower, W.upper)
        else:  # random_walk
            for k in range(steps):
                step = rng.uniform(rate_lo, rate_hi)
                w[k + 1] = np.clip(w[k] + step, W.lower, W.upper)
        assert_admissible(w, W, W_tilde)
        return w


def assert_admissible(w, W: Box, W_tilde: Box, tol=1e-12):
    if np.any(w < W.lower - tol) or np.any(w > W.upper + tol):
        raise GeometryError("disturbance sequence escapes its magnitude bound")
    dw = np.diff(w, axis=0)
    if np.any(dw < W_tilde.lower - tol) or np.any(dw > W_tilde.upper + tol):
        raise GeometryError("disturbance sequence violates its rate bound")


@dataclass
class SimTrace:
    """Per-step closed-loop record plus constraint margins."""

    sample_period: float
    x: np.ndarray
    x_hat: np.ndarray
    w: np.ndarray
    w_hat: np.ndarray
    u: np.ndarray
    y: np.ndarray
    v: np.ndarray
    r: np.ndarray
    kappa: np.ndarray
    feasible: np.ndarray
    margins: np.ndarray
    binding_row: np.ndarray
    e: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.e is None:
            self.e = np.hstack([self.x - self.x_hat, self.w - self.w_hat])

    @property
    def steps(self):
        return len(self.x)

    @property
    def worst_margin(self):
        return float(np.min(self.margins)) if self.margins.size else np.inf

    def violation_count(self, tol=None):
        tol = DEFAULT.algebraic if tol is None else tol
        if not self.margins.size:
            return 0
        return int(np.count_nonzero(np.min(self.margins, axis=1) < -tol))

    def column_names(self):
        names = ["n", "t"]
        names += [f"x{i + 1}" for i in range(self.x.shape[1])]
        names += [f"x{i + 1}_hat" for i in range(self.x.shape[1])]
        names += [f"w{i + 1}" for i in range(self.w.shape[1])]
        names += [f"w{i + 1}_hat" for i in range(self.w.shape[1])]
        names += [f"u{i + 1}" for i in range(self.u.shape[1])]
        names += [f"y{i + 1}" for i in range(self.y.shape[1])]
        names += [f"v{i + 1}" for i in range(self.v.shape[1])]
        names += [f"r{i + 1}" for i in range(self.r.shape[1])]
        names += ["kappa", "feasible", "binding_row"]
        names += [f"margin{i + 1}" for i in range(self.margins.shape[1])]
        return names

    def rows(self):
        for k in range(self.steps):
            row = [k, k * self.sample_period]
            row += list(self.x[k]) + list(self.x_hat[k])
            row += list(self.w[k]) + list(self.w_hat[k])
            row += list(self.u[k]) + list(self.y[k])
            row += list(self.v[k]) + list(self.r[k])
            row += [self.kappa[k], int(self.feasible[k]),
                    int(self.binding_row[k])]
            row += list(self.margins[k])
            yield row

    def to_csv(self, path, scenario_hash=""):
        with open(path, "w", newline="") as fh:
            if scenario_hash:
                fh.write(f"# scenario_hash={scenario_hash}\n")
            writer = csv.writer(fh)
            writer.writerow(self.column_names())
            for row in self.rows():
                writer.writerow([repr(v) if isinstance(v, float) else v
                                 for v in row])

    def to_json(self, path, scenario_hash=""):
        doc = {
            "meta": {**self.meta, "scenario_hash": scenario_hash,
                     "sample_period": self.sample_period},
            "columns": self.column_names(),
            "records": [list(map(_jsonify, row)) for row in self.rows()],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True)

    def summary(self):
        return {
            "steps": self.steps,
            "worst_margin": self.worst_margin,
            "violations": self.violation_count(),
            "feasible_throughout": bool(np.all(self.feasible)),
            "final_v": self.v[-1].tolist() if self.steps else [],
            "final_v_minus_r": float(np.linalg.norm(self.v[-1] - self.r[-1]))
            if self.steps else 0.0,
        }


def _jsonify(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    return v


def run_closed_loop(compiled, seq: AdmissibleSequence,
                    profile: DisturbanceProfile, steps, x0=None, v0=None,
                    x_hat0=None, w_hat0=None, w0=None, governed=True,
                    policy=DEFAULT) -> SimTrace:
    """Simulate the full loop for ``steps`` samples.

    ``compiled`` bundles plant, gains, observer, prediction model and the
    reference signal (see scenario.CompiledScenario).  With ``governed=False``
    the requested reference is applied directly (baseline mode) and governor
    feasibility is not enforced.
    """
    plant = compiled.plant
    n_x, n_w, n_v = plant.n_x, plant.n_w, compiled.gains.n_v
    x = np.zeros(n_x) if x0 is None else np.asarray(x0, dtype=float)
    x_hat = np.zeros(n_x) if x_hat0 is None else np.asarray(x_hat0, dtype=float)
    w_hat = np.zeros(n_w) if w_hat0 is None else np.asarray(w_hat0, dtype=float)
    v_prev = np.zeros(n_v) if v0 is None else np.asarray(v0, dtype=float)
    w_seq = profile.generate(compiled.constraints.W, compiled.constraints.W_tilde,
                             steps, w0=w0)
    e0 = np.concatenate([x - x_hat, w_seq[0] - w_hat])
    if not compiled.constraints.E0.contains(e0):
        raise InfeasibleError("initial estimation error outside its assumed set")

    G, bY = compiled.prediction.Y_cl.halfspaces()
    norms = np.linalg.norm(G, axis=1)
    state = GovernorState(v_prev=v_prev, n=0)
    rec = {key: [] for key in ("x", "x_hat", "w", "w_hat", "u", "y", "v", "r",
                               "kappa", "feasible", "margins", "binding")}
    for k in range(steps):
        w = w_seq[k]
        y = plant.C @ x
        r = compiled.reference(k)
        if governed:
            state, outcome = governor_step(state, seq, _governor_state(compiled, x_hat), r,
                                           policy)
            if not outcome.feasible:
                raise InfeasibleError(
                    f"governor infeasible at step {k}; the run started outside "
                    "the admissible set or the disturbance left its bounds")
            v = state.v_prev
            kappa = outcome.kappa_star
            binding = -1 if outcome.binding_row is None else outcome.binding_row
            feasible = outcome.feasible
        else:
            v = r
            state = GovernorState(v_prev=v, n=state.n + 1)
            kappa = 1.0
            binding = -1
            feasible = True
        u = control_input(compiled.gains, compiled.prediction, x_hat, w_hat, v)
        y_cl = _constrained_output(compiled, x, u, w)
        margins = (bY - G @ y_cl) / norms

        rec["x"].append(x.copy())
        rec["x_hat"].append(x_hat.copy())
        rec["w"].append(w.copy())
        rec["w_hat"].append(w_hat.copy())
        rec["u"].append(np.atleast_1d(u).copy())
        rec["y"].append(np.atleast_1d(y).copy())
        rec["v"].append(np.atleast_1d(v).copy())
        rec["r"].append(np.atleast_1d(r).copy())
        rec["kappa"].append(kappa)
        rec["feasible"].append(feasible)
        rec["margins"].append(margins)
        rec["binding"].append(binding)

        x_hat_ext = observer_step(compiled.observer,
                                  np.concatenate([x_hat, w_hat]), u, y)
        x = plant.A @ x + plant.B @ u + plant.disturbance_input @ w
        x_hat, w_hat = x_hat_ext[:n_x], x_hat_ext[n_x:]

    return SimTrace(
        sample_period=plant.sample_period,
        x=_stack(rec["x"], n_x), x_hat=_stack(rec["x_hat"], n_x),
        w=_stack(rec["w"], n_w), w_hat=_stack(rec["w_hat"], n_w),
        u=_stack(rec["u"], plant.n_u), y=_stack(rec["y"], plant.n_y),
        v=_stack(rec["v"], n_v), r=_stack(rec["r"], n_v),
        kappa=np.asarray(rec["kappa"], dtype=float),
        feasible=np.asarray(rec["feasible"], dtype=bool),
        margins=_stack(rec["margins"], len(bY)),
        binding_row=np.asarray(rec["binding"], dtype=int),
        meta={"governed": governed, "steps": steps, "seed": profile.seed,
              "profile": profile.kind},
    )


def _stack(items, width):
    if not items:
        return np.empty((0, width))
    return np.vstack([np.asarray(i, dtype=float).reshape(1, -1) for i in items])


def _governor_state(compiled, x_hat):
    """The governor acts on z_hat = H x_hat in the unmatched formulation."""
    if compiled.prediction.kind == "unmatched":
        return compiled.prediction.control_data["H"] @ x_hat
    return x_hat


def _constrained_output(compiled, x, u, w):
    """Realized constrained output: (x, u + w) matched, H x unmatched.

    In both matched input modes the quantity covered by the admissible-set
    guarantee is u + w; membership of u itself in the untightened input set
    follows from it in the subtract_W mode.
    """
    if compiled.prediction.kind == "unmatched":
        return compiled.prediction.control_data["H"] @ x
    return np.concatenate([x, np.atleast_1d(u + w)])


def run_baseline_no_rg(compiled, profile: DisturbanceProfile, steps,
                       **kwargs) -> SimTrace:
    """Closed loop with v set to the raw reference (no governor)."""
    kwargs.pop("governed", None)
    return run_closed_loop(compiled, None, profile, steps, governed=False,
                           **kwargs)


@dataclass
class TraceComparison:
    worst_margin: tuple
    time_to_90pct: tuple
    final_error: tuple
    cumulative_error: tuple

    def as_dict(self):
        return {
            "worst_margin": list(self.worst_margin),
            "time_to_90pct": list(self.time_to_90pct),
            "final_error": list(self.final_error),
            "cumulative_error": list(self.cumulative_error),
        }


def compare_traces(a: SimTrace, b: SimTrace) -> TraceComparison:
    """Side-by-side summary of two runs of the same scenario/reference."""
    if a.steps != b.steps:
        raise DimensionError("traces have different lengths")
    if not np.allclose(a.r, b.r):
        raise DimensionError("traces follow different references")
    return TraceComparison(
        worst_margin=(a.worst_margin, b.worst_margin),
        time_to_90pct=(_time_to_90(a), _time_to_90(b)),
        final_error=(float(np.linalg.norm(a.v[-1] - a.r[-1])),
                     float(np.linalg.norm(b.v[-1] - b.r[-1]))),
        cumulative_error=(float(np.sum(np.linalg.norm(a.v - a.r, axis=1))
                                * a.sample_period),
                          float(np.sum(np.linalg.norm(b.v - b.r, axis=1))
                                * b.sample_period)),
    )


def _time_to_90(trace: SimTrace):
    """First time the command covers 90% of the gap to the final reference."""
    r = trace.r[-1]
    gap0 = np.linalg.norm(trace.v[0] - r)
    if gap0 == 0:
        return 0.0
    dist = np.linalg.norm(trace.v - r[None, :], axis=1)
    hit = np.flatnonzero(dist <= 0.1 * gap0)
    return float(hit[0] * trace.sample_period) if hit.size else float("inf")
