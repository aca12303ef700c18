"""Scenario files: schema validation, model compilation and precompute.

A scenario is a single YAML document declaring the plant (continuous or
discrete), controller and observer gains, constraint boxes, bounding and
tightening parameters, the reference signal and a disturbance profile.  All
angle-valued quantities are stored in radians (inline comments in the bundled
files carry the degree values).  Parsing is strict: unknown keys, missing
keys and dimension mismatches all raise ScenarioError before any computation
starts.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from . import bounding as bounding_mod
from .admissible import AdmissibleSequence, build_sequence
from .errors import ScenarioError
from .models import (ConstraintSpec, ControllerGains, PlantModel,
                     build_observer, build_prediction, build_unmatched)
from .numerics import DEFAULT
from .sets import Box

BOUNDING_METHODS = ("polyhedral", "ellipsoidal")
REFERENCE_KINDS = ("constant", "step", "piecewise")

_TOP_KEYS = {"name", "description", "plant", "gains", "observer", "constraints",
             "tracking", "bounding", "tightening", "reference", "simulation"}


def _require(d, key, where):
    if key not in d:
        raise ScenarioError(f"missing key '{key}' in {where}")
    return d[key]


def _check_keys(d, allowed, where):
    extra = set(d) - set(allowed)
    if extra:
        raise ScenarioError(f"unknown keys {sorted(extra)} in {where}")


def _matrix(value, where):
    try:
        M = np.array(value, dtype=float)
    except (TypeError, ValueError) as ex:
        raise ScenarioError(f"{where}: not a numeric matrix ({ex})") from ex
    if M.ndim == 1:
        M = M[None, :]
    if M.ndim != 2:
        raise ScenarioError(f"{where}: expected a 2-D matrix")
    return M


def _box(value, where):
    if not isinstance(value, dict):
        raise ScenarioError(f"{where}: expected {{lower: [...], upper: [...]}}")
    _check_keys(value, {"lower", "upper"}, where)
    lower = np.asarray(_require(value, "lower", where), dtype=float).reshape(-1)
    upper = np.asarray(_require(value, "upper", where), dtype=float).reshape(-1)
    if lower.size != upper.size:
        raise ScenarioError(f"{where}: lower/upper length mismatch")
    if np.any(upper < lower):
        raise ScenarioError(f"{where}: upper < lower")
    return Box(lower, upper)


@dataclass
class Scenario:
    """Validated scenario document (raw dict plus typed views)."""

    name: str
    description: str
    raw: dict
    plant: PlantModel
    gains: ControllerGains
    L: np.ndarray
    constraints: ConstraintSpec
    tracking: Optional[np.ndarray]
    bounding: dict
    tightening: dict
    reference: dict
    simulation: dict

    def to_dict(self) -> dict:
        return self.raw


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file (or bundled scenario name)."""
    p = Path(path)
    if not p.exists():
        bundled = bundled_scenario_path(str(path))
        if bundled is None:
            raise ScenarioError(f"scenario file not found: {path}")
        p = bundled
    with open(p) as fh:
        doc = yaml.safe_load(fh)
    return parse_scenario(doc)


def bundled_scenario_path(name) -> Optional[Path]:
    base = resources.files("refgov") / "scenarios"
    cand = base / f"{name}.yaml"
    return Path(str(cand)) if cand.is_file() else None


def list_bundled_scenarios():
    base = resources.files("refgov") / "scenarios"
    return sorted(p.name[:-5] for p in base.iterdir() if p.name.endswith(".yaml"))


def parse_scenario(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a mapping")
    _check_keys(doc, _TOP_KEYS, "scenario")
    name = str(_require(doc, "name", "scenario"))
    description = str(doc.get("description", ""))

    pd = _require(doc, "plant", "scenario")
    _check_keys(pd, {"form", "sample_period", "A", "B", "C", "B1", "H"}, "plant")
    form = pd.get("form", "discrete")
    if form not in ("continuous", "discrete"):
        raise ScenarioError("plant.form must be 'continuous' or 'discrete'")
    Ts = float(_require(pd, "sample_period", "plant"))
    A = _matrix(_require(pd, "A", "plant"), "plant.A")
    B = _matrix(_require(pd, "B", "plant"), "plant.B")
    C = _matrix(_require(pd, "C", "plant"), "plant.C")
    B1 = _matrix(pd["B1"], "plant.B1") if "B1" in pd and pd["B1"] is not None else None
    H = _matrix(pd["H"], "plant.H") if "H" in pd and pd["H"] is not None else None
    try:
        if form == "continuous":
            plant = PlantModel.from_continuous(A, B, C, Ts, B1c=B1, H=H)
        else:
            plant = PlantModel(A, B, C, Ts, B1=B1, H=H)
    except Exception as ex:
        raise ScenarioError(f"plant: {ex}") from ex

    gd = _require(doc, "gains", "scenario")
    _check_keys(gd, {"K", "Gamma", "Lambda"}, "gains")
    unmatched_plant = plant.H is not None
    if not unmatched_plant and "K" not in gd:
        raise ScenarioError("gains.K is required for the matched formulation")
    gains = ControllerGains(
        K=_matrix(gd["K"], "gains.K") if gd.get("K") is not None else None,
        Gamma=_matrix(_require(gd, "Gamma", "gains"), "gains.Gamma"),
        Lambda=_matrix(gd["Lambda"], "gains.Lambda")
        if gd.get("Lambda") is not None else None,
    )

    od = _require(doc, "observer", "scenario")
    _check_keys(od, {"L"}, "observer")
    L = _matrix(_require(od, "L", "observer"), "observer.L")
    if L.shape != (plant.n_x + plant.n_w, plant.n_y):
        raise ScenarioError(
            f"observer.L: expected shape {(plant.n_x + plant.n_w, plant.n_y)}, "
            f"got {L.shape}")

    cd = _require(doc, "constraints", "scenario")
    _check_keys(cd, {"input_mode", "X", "U", "Z", "W", "W_tilde", "E0"},
                "constraints")
    unmatched = plant.H is not None
    input_mode = cd.get("input_mode", "subtract_W")
    kwargs = {}
    if unmatched:
        kwargs["Z"] = _box(_require(cd, "Z", "constraints"), "constraints.Z")
        if kwargs["Z"].dim != plant.n_z:
            raise ScenarioError("constraints.Z dimension must match H rows")
    else:
        kwargs["X"] = _box(_require(cd, "X", "constraints"), "constraints.X")
        kwargs["U"] = _box(_require(cd, "U", "constraints"), "constraints.U")
        if kwargs["X"].dim != plant.n_x:
            raise ScenarioError("constraints.X dimension must match the state")
        if kwargs["U"].dim != plant.n_u:
            raise ScenarioError("constraints.U dimension must match the input")
    W = _box(_require(cd, "W", "constraints"), "constraints.W")
    W_tilde = _box(_require(cd, "W_tilde", "constraints"), "constraints.W_tilde")
    E0 = _box(_require(cd, "E0", "constraints"), "constraints.E0")
    if W.dim != plant.n_w or W_tilde.dim != plant.n_w:
        raise ScenarioError("W and W_tilde dimensions must match the disturbance")
    if E0.dim != plant.n_x + plant.n_w:
        raise ScenarioError("E0 dimension must be n_x + n_w")
    for nm, S in (("W", W), ("W_tilde", W_tilde)):
        if np.any(S.lower >= 0) or np.any(S.upper <= 0):
            raise ScenarioError(f"constraints.{nm} must contain 0 in its interior")
    constraints = ConstraintSpec(W=W, W_tilde=W_tilde, E0=E0,
                                 input_mode=input_mode, **kwargs)

    tracking = None
    if doc.get("tracking") is not None:
        tracking = _matrix(doc["tracking"], "tracking")
        if tracking.shape != (gains.n_v, plant.n_x):
            raise ScenarioError("tracking: expected shape (n_v, n_x)")

    bd = dict(_require(doc, "bounding", "scenario"))
    _check_keys(bd, {"method", "n_bar", "n_directions", "seed", "tail_window",
                     "verify_until", "c", "terminal_mode"}, "bounding")
    method = bd.get("method", "polyhedral")
    if method not in BOUNDING_METHODS:
        raise ScenarioError(f"bounding.method must be one of {BOUNDING_METHODS}")
    bd["method"] = method
    bd["n_bar"] = int(_require(bd, "n_bar", "bounding"))
    bd.setdefault("n_directions", 100)
    bd.setdefault("seed", 0)
    bd.setdefault("c", 2.0)
    bd.setdefault("tail_window", [bd["n_bar"], bd["n_bar"]])
    bd.setdefault("verify_until", 2 * bd["n_bar"])
    bd.setdefault("terminal_mode", "auto")

    td = dict(_require(doc, "tightening", "scenario"))
    _check_keys(td, {"horizon", "epsilon", "k_max"}, "tightening")
    td["horizon"] = int(_require(td, "horizon", "tightening"))
    td["epsilon"] = float(_require(td, "epsilon", "tightening"))
    td.setdefault("k_max", 2000)

    rd = dict(_require(doc, "reference", "scenario"))
    _check_keys(rd, {"kind", "value", "initial", "at_step", "times", "values"},
                "reference")
    kind = rd.get("kind", "constant")
    if kind not in REFERENCE_KINDS:
        raise ScenarioError(f"reference.kind must be one of {REFERENCE_KINDS}")
    rd["kind"] = kind
    _validate_reference(rd, gains.n_v)

    sd = dict(doc.get("simulation", {}))
    _check_keys(sd, {"steps", "x0", "v0", "w0", "disturbance"}, "simulation")
    sd.setdefault("steps", 200)
    dd = dict(sd.get("disturbance", {"kind": "constant", "seed": 0}))
    _check_keys(dd, {"kind", "seed", "target", "rate", "amplitude",
                     "period_steps"}, "simulation.disturbance")
    sd["disturbance"] = dd

    return Scenario(name=name, description=description, raw=doc, plant=plant,
                    gains=gains, L=L, constraints=constraints, tracking=tracking,
                    bounding=bd, tightening=td, reference=rd, simulation=sd)


def _validate_reference(rd, n_v):
    kind = rd["kind"]
    if kind in ("constant", "step"):
        value = np.asarray(_require(rd, "value", "reference"), dtype=float)
        if value.reshape(-1).size != n_v:
            raise ScenarioError("reference.value length must equal n_v")
    if kind == "step":
        rd.setdefault("at_step", 0)
        rd.setdefault("initial", [0.0] * n_v)
    if kind == "piecewise":
        times = _require(rd, "times", "reference")
        values = _require(rd, "values", "reference")
        if len(times) != len(values):
            raise ScenarioError("reference.times/values length mismatch")


def make_reference(rd, n_v) -> Callable[[int], np.ndarray]:
    kind = rd["kind"]
    if kind == "constant":
        value = np.asarray(rd["value"], dtype=float).reshape(-1)
        return lambda n: value
    if kind == "step":
        value = np.asarray(rd["value"], dtype=float).reshape(-1)
        initial = np.asarray(rd["initial"], dtype=float).reshape(-1)
        at = int(rd["at_step"])
        return lambda n: value if n >= at else initial
    times = [int(t) for t in rd["times"]]
    values = [np.asarray(v, dtype=float).reshape(-1) for v in rd["values"]]

    def piecewise(n):
        out = values[0]
        for t, v in zip(times, values):
            if n >= t:
                out = v
        return out

    return piecewise


@dataclass
class CompiledScenario:
    """Scenario with all models assembled, ready to bound/build/simulate."""

    scenario: Scenario
    observer: object
    prediction: object
    reference: Callable[[int], np.ndarray]

    @property
    def plant(self):
        return self.scenario.plant

    @property
    def gains(self):
        return self.scenario.gains

    @property
    def constraints(self):
        return self.scenario.constraints

    @property
    def name(self):
        return self.scenario.name


def compile_scenario(scenario: Scenario) -> CompiledScenario:
    observer = build_observer(scenario.plant, scenario.L)
    if scenario.plant.H is not None:
        prediction = build_unmatched(scenario.plant, scenario.gains, observer,
                                     scenario.constraints.Z)
    else:
        prediction = build_prediction(scenario.plant, scenario.gains, observer,
                                      scenario.constraints)
    reference = make_reference(scenario.reference, scenario.gains.n_v)
    return CompiledScenario(scenario=scenario, observer=observer,
                            prediction=prediction, reference=reference)


def build_bounding(compiled: CompiledScenario, method=None, policy=DEFAULT):
    sc = compiled.scenario
    method = method or sc.bounding["method"]
    if method == "ellipsoidal":
        return bounding_mod.ellipsoidal_sequence(
            compiled.observer, sc.constraints.E0, sc.constraints.W_tilde,
            c=sc.bounding["c"], n_bar=sc.bounding["n_bar"], policy=policy)
    dirs = bounding_mod.direction_set(
        compiled.observer.dim, sc.bounding["n_directions"], sc.bounding["seed"])
    return bounding_mod.polyhedral_sequence(
        compiled.observer, sc.constraints.E0, sc.constraints.W_tilde, dirs,
        n_bar=sc.bounding["n_bar"], tail_window=tuple(sc.bounding["tail_window"]),
        verify_until=sc.bounding["verify_until"],
        terminal_mode=sc.bounding["terminal_mode"], policy=policy)


@dataclass
class PrecomputeResult:
    method: str
    bounding: object
    admissible: AdmissibleSequence
    tightened: object
    audit: object
    summary: dict = field(default_factory=dict)


def precompute(compiled: CompiledScenario, method=None, audit_samples=2000,
               audit_seed=0, policy=DEFAULT) -> PrecomputeResult:
    """Bounding sequence + admissible sequence + audit for one scenario."""
    sc = compiled.scenario
    method = method or sc.bounding["method"]
    t0 = time.time()
    bnd = build_bounding(compiled, method, policy)
    t1 = time.time()
    seq, tightened, audit = build_sequence(
        compiled.prediction, bnd, horizon_N=sc.tightening["horizon"],
        epsilon=sc.tightening["epsilon"], k_max=sc.tightening["k_max"],
        audit_samples=audit_samples, audit_seed=audit_seed, policy=policy)
    t2 = time.time()
    k_star = [s.k_star for s in seq.sets]
    summary = {
        "scenario": sc.name,
        "method": method,
        "n_bar": bnd.n_bar,
        "bounding_seconds": round(t1 - t0, 3),
        "admissible_seconds": round(t2 - t1, 3),
        "k_star": {"min": int(min(k_star)), "max": int(max(k_star)),
                   "first": int(k_star[0]), "last": int(k_star[-1])},
        "rows": {"min": int(min(len(s.b) for s in seq.sets)),
                 "max": int(max(len(s.b) for s in seq.sets))},
        "steady_monotone": bool(tightened.monotone),
        "audit": None if audit is None else {
            "samples": audit.samples, "violations": audit.violations,
            "worst_margin": audit.worst_margin},
    }
    if method == "ellipsoidal":
        meta = bnd.meta
        summary["ellipsoid"] = {
            "mu": meta["mu"], "rho": meta["rho"], "c": meta["c"],
            "xi_0": float(meta["xi"][0]), "xi_final": float(meta["xi"][-1]),
            "xi_floor": meta["floor"],
        }
    else:
        y = bnd.meta["y_e_max"]
        summary["polyhedral"] = {
            "directions": int(y.shape[1]),
            "y_final_max": float(np.max(y[bnd.n_bar])),
            "y_final_min": float(np.min(y[bnd.n_bar])),
        }
    return PrecomputeResult(method=method, bounding=bnd, admissible=seq,
                            tightened=tightened, audit=audit, summary=summary)
