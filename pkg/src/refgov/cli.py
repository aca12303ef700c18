"""Command-line interface: precompute, simulate and verify subcommands.

Exit codes: 0 success, 1 usage or schema error, 2 infeasibility (empty sets,
infeasible initial condition), 3 property-check failure (verification,
invariance audit, or a governed-run constraint violation).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .cache import ArtifactCache, scenario_hash
from .errors import (GeometryError, InfeasibleError, ScenarioError,
                     StabilityError, VerificationError)
from .scenario import (compile_scenario, list_bundled_scenarios, load_scenario,
                       precompute)
from .simulate import DisturbanceProfile, run_baseline_no_rg, run_closed_loop
from .verification import run_all_checks

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_PROPERTY = 3


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="refgov",
        description="Observer-based robust reference governor toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", required=True,
                       help="scenario file path or bundled scenario name "
                            f"({', '.join(list_bundled_scenarios())})")
        p.add_argument("--method", choices=("polyhedral", "ellipsoidal"),
                       default=None, help="override the scenario's bounding method")
        p.add_argument("--cache", default="refgov_cache",
                       help="artifact cache directory")

    p_pre = sub.add_parser("precompute", help="build and cache the set sequences")
    common(p_pre)
    p_pre.add_argument("--audit-samples", type=int, default=2000)
    p_pre.add_argument("--force", action="store_true",
                       help="recompute even on a cache hit")

    p_sim = sub.add_parser("simulate", help="run a closed-loop simulation")
    common(p_sim)
    p_sim.add_argument("--seed", type=int, default=None,
                       help="override the disturbance seed")
    p_sim.add_argument("--steps", type=int, default=None)
    p_sim.add_argument("--no-rg", action="store_true",
                       help="baseline: apply the raw reference, no governor")
    p_sim.add_argument("--out", default="refgov_out", help="output directory")

    p_ver = sub.add_parser("verify", help="run the property-check suite")
    common(p_ver)
    p_ver.add_argument("--trajectories", type=int, default=500)
    p_ver.add_argument("--audit-samples", type=int, default=3000)
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.add_argument("--out", default=None,
                       help="also write the report JSON to this path")
    return parser


def _load(args):
    scenario = load_scenario(args.scenario)
    compiled = compile_scenario(scenario)
    method = args.method or scenario.bounding["method"]
    return scenario, compiled, method


def _ensure_artifacts(args, scenario, compiled, method, audit_samples=2000,
                      force=False):
    cache = ArtifactCache(args.cache)
    key = scenario_hash(scenario.raw)
    hit = None if force else cache.load(key, method)
    if hit is not None:
        return cache, key, hit["bounding"], hit["admissible"], hit["summary"], True
    result = precompute(compiled, method=method, audit_samples=audit_samples)
    cache.save(key, method, result.bounding, result.admissible, result.summary)
    return cache, key, result.bounding, result.admissible, result.summary, False


def cmd_precompute(args):
    scenario, compiled, method = _load(args)
    cache, key, bounding, admissible, summary, hit = _ensure_artifacts(
        args, scenario, compiled, method, audit_samples=args.audit_samples,
        force=args.force)
    k_stars = [s.k_star for s in admissible.sets]
    print(f"scenario      : {scenario.name} ({method})")
    print(f"cache         : {'hit' if hit else 'miss'} -> {cache.path(key, method)}")
    print(f"n_bar         : {bounding.n_bar}")
    print(f"k*            : first={k_stars[0]} min={min(k_stars)} "
          f"max={max(k_stars)} last={k_stars[-1]}")
    print(f"rows per set  : {min(len(s.b) for s in admissible.sets)}"
          f"..{max(len(s.b) for s in admissible.sets)}")
    if "ellipsoid" in summary:
        e = summary["ellipsoid"]
        print(f"level curve   : xi_0={e['xi_0']:.6g} -> xi_final={e['xi_final']:.6g} "
              f"(floor {e['xi_floor']:.6g})")
    if "polyhedral" in summary:
        p = summary["polyhedral"]
        print(f"slab offsets  : final in [{p['y_final_min']:.3g}, "
              f"{p['y_final_max']:.3g}] over {p['directions']} directions")
    if summary.get("audit"):
        a = summary["audit"]
        print(f"audit         : {a['samples']} samples, {a['violations']} violations")
    if not summary.get("steady_monotone", True):
        print("note          : steady-state sets were not monotone; "
              "intersection fallback in effect")
    return EXIT_OK


def cmd_simulate(args):
    scenario, compiled, method = _load(args)
    _, key, bounding, admissible, _, _ = _ensure_artifacts(
        args, scenario, compiled, method)
    sim = scenario.simulation
    steps = args.steps if args.steps is not None else sim["steps"]
    dist = dict(sim["disturbance"])
    if args.seed is not None:
        dist["seed"] = args.seed
    profile = DisturbanceProfile(**dist)
    kwargs = {k: sim[k] for k in ("x0", "v0", "w0") if k in sim}
    if args.no_rg:
        trace = run_baseline_no_rg(compiled, profile, steps, **kwargs)
        mode = "no-rg"
    else:
        trace = run_closed_loop(compiled, admissible, profile, steps, **kwargs)
        mode = method
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{scenario.name}_{mode}_seed{profile.seed}"
    trace.to_csv(out / f"{stem}_trace.csv", scenario_hash=key)
    trace.to_json(out / f"{stem}_trace.json", scenario_hash=key)
    summary = {"scenario": scenario.name, "method": mode, "hash": key,
               **trace.summary()}
    with open(out / f"{stem}_summary.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
    print(json.dumps(summary, sort_keys=True, indent=2))
    if not args.no_rg and trace.violation_count() > 0:
        print("governed run violated constraints", file=sys.stderr)
        return EXIT_PROPERTY
    return EXIT_OK


def cmd_verify(args):
    scenario, compiled, method = _load(args)
    _, key, bounding, admissible, summary, _ = _ensure_artifacts(
        args, scenario, compiled, method, audit_samples=0)
    report = run_all_checks(compiled, bounding, admissible, None,
                            mc_trajectories=args.trajectories,
                            audit_samples=args.audit_samples, seed=args.seed)
    report["method"] = method
    report["hash"] = key
    if "steady_monotone" in summary:
        for c in report["checks"]:
            if c["name"] == "steady_sets_monotone":
                c["downgraded_to_intersection"] = not summary["steady_monotone"]
                c.pop("skipped", None)
    text = json.dumps(report, sort_keys=True, indent=2)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(text)
    return EXIT_OK if report["all_passed"] else EXIT_PROPERTY


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as ex:
        # argparse exits 2 on usage errors; the contract here is exit 1
        return EXIT_OK if ex.code == 0 else EXIT_USAGE
    handlers = {"precompute": cmd_precompute, "simulate": cmd_simulate,
                "verify": cmd_verify}
    try:
        return handlers[args.command](args)
    except ScenarioError as ex:
        print(f"scenario error: {ex}", file=sys.stderr)
        return EXIT_USAGE
    except (InfeasibleError,) as ex:
        print(f"infeasible: {ex}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (StabilityError, GeometryError) as ex:
        print(f"model/geometry error: {ex}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except VerificationError as ex:
        print(f"verification failure: {ex}", file=sys.stderr)
        return EXIT_PROPERTY


if __name__ == "__main__":
    sys.exit(main())
