"""Serialization of precomputed sequences and a content-addressed cache.

Precomputing the admissible sets is the expensive part of a study, so the
results are serialized to JSON (matrices as row-major nested lists, sets
tagged by variant) and stored under a key derived from the scenario fields
that affect the computation.  Identical scenario + seed reproduce the exact
same bytes, which the cache relies on.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .admissible import AdmissibleSequence, AdmissibleSet
from .bounding import BoundingSequence
from .errors import ScenarioError
from .sets import Box, Ellipsoid, Polytope


def set_to_dict(S):
    if isinstance(S, Box):
        return {"type": "box", "lower": S.lower.tolist(),
                "upper": S.upper.tolist()}
    if isinstance(S, Ellipsoid):
        return {"type": "ellipsoid", "P": S.P.tolist(), "level": S.level}
    if isinstance(S, Polytope):
        doc = {"type": "polytope", "A": S.A.tolist(), "b": S.b.tolist()}
        if S.vertices is not None:
            doc["vertices"] = S.vertices.tolist()
        return doc
    raise ScenarioError(f"cannot serialize set of type {type(S).__name__}")


def set_from_dict(doc):
    kind = doc["type"]
    if kind == "box":
        return Box(doc["lower"], doc["upper"])
    if kind == "ellipsoid":
        return Ellipsoid(np.array(doc["P"]), doc["level"])
    if kind == "polytope":
        return Polytope(np.array(doc["A"]), np.array(doc["b"]),
                        vertices=np.array(doc["vertices"])
                        if "vertices" in doc else None)
    raise ScenarioError(f"unknown set tag {kind!r}")


def bounding_to_dict(seq: BoundingSequence) -> dict:
    doc = {"method": seq.method, "n_bar": seq.n_bar,
           "omega_f": set_to_dict(seq.omega_f)}
    if seq.method == "ellipsoidal":
        meta = seq.meta
        doc["P"] = seq.omega_f.P.tolist()
        doc["xi"] = np.asarray(meta["xi"], dtype=float).tolist()
        doc["scalars"] = {k: float(meta[k]) for k in ("c", "mu", "rho",
                                                      "V0_max", "floor")}
    else:
        meta = seq.meta
        doc["directions"] = np.asarray(meta["directions"]).tolist()
        doc["w_e_max"] = np.asarray(meta["w_e_max"]).tolist()
        doc["y_e_max"] = np.asarray(meta["y_e_max"]).tolist()
        doc["tail_window"] = list(meta["tail_window"])
        doc["verify_until"] = meta["verify_until"]
        doc["omega_0"] = set_to_dict(seq.omegas[0])
    return doc


def bounding_from_dict(doc) -> BoundingSequence:
    n_bar = int(doc["n_bar"])
    omega_f = set_from_dict(doc["omega_f"])
    if doc["method"] == "ellipsoidal":
        P = np.array(doc["P"])
        xi = np.array(doc["xi"], dtype=float)
        omegas = [Ellipsoid(P, float(x)) for x in xi]
        meta = {**doc["scalars"], "xi": xi}
        return BoundingSequence("ellipsoidal", omegas, omega_f, n_bar, meta)
    directions = np.array(doc["directions"])
    y = np.array(doc["y_e_max"], dtype=float)
    A = np.vstack([directions, -directions])
    omegas = [set_from_dict(doc["omega_0"])]
    omegas += [Polytope(A, np.concatenate([y[k], y[k]]))
               for k in range(1, n_bar + 1)]
    meta = {"directions": directions, "w_e_max": np.array(doc["w_e_max"]),
            "y_e_max": y, "tail_window": tuple(doc["tail_window"]),
            "verify_until": doc["verify_until"]}
    return BoundingSequence("polyhedral", omegas, omega_f, n_bar, meta)


def admissible_to_dict(seq: AdmissibleSequence) -> dict:
    sets = []
    for s in seq.sets:
        sets.append({
            "n": s.n, "k_star": s.k_star, "n_v": s.n_v, "n_state": s.n_state,
            "A": s.A.tolist(), "b": s.b.tolist(),
            "blocks": [[label, sl.start, sl.stop] for label, sl in s.blocks],
        })
    return {"n_bar": seq.n_bar, "sets": sets}


def admissible_from_dict(doc) -> AdmissibleSequence:
    sets = []
    for sd in doc["sets"]:
        blocks = [(label, slice(start, stop)) for label, start, stop
                  in sd["blocks"]]
        sets.append(AdmissibleSet(np.array(sd["A"]), np.array(sd["b"]),
                                  sd["n"], sd["k_star"], sd["n_v"],
                                  sd["n_state"], blocks))
    return AdmissibleSequence(sets, int(doc["n_bar"]))


_HASH_KEYS = ("plant", "gains", "observer", "constraints", "bounding",
              "tightening")


def scenario_hash(raw: dict) -> str:
    """Content hash over the scenario fields that affect precomputation."""
    payload = {k: raw.get(k) for k in _HASH_KEYS}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ArtifactCache:
    """Directory of serialized precompute artifacts keyed by scenario hash."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, key: str, method: str) -> Path:
        return self.root / key / f"{method}.json"

    def load(self, key, method):
        p = self.path(key, method)
        if not p.exists():
            return None
        with open(p) as fh:
            doc = json.load(fh)
        return {
            "bounding": bounding_from_dict(doc["bounding"]),
            "admissible": admissible_from_dict(doc["admissible"]),
            "summary": doc.get("summary", {}),
        }

    def save(self, key, method, bounding, admissible, summary=None) -> Path:
        p = self.path(key, method)
        p.parent.mkdir(parents=True, exist_ok=True)
        doc = {
            "bounding": bounding_to_dict(bounding),
            "admissible": admissible_to_dict(admissible),
            "summary": summary or {},
        }
        with open(p, "w") as fh:
            json.dump(doc, fh, sort_keys=True)
        return p
