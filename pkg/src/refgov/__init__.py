"""Observer-based robust reference governors for constrained linear systems.

The package provides, in dependency order: convex set algebra (`sets`),
plant/observer/prediction model assembly (`models`), time-indexed bounds on
the estimation error (`bounding`), time-dependent constraint-admissible sets
(`admissible`), the online reference governor (`governor`), a closed-loop
simulation harness (`simulate`), and scenario-file tooling plus a CLI
(`scenario`, `cache`, `cli`).
"""

from .admissible import (AdmissibleSequence, AdmissibleSet, HOperators,
                         TightenedConstraints, build_sequence,
                         finite_determination, invariance_audit,
                         reachable_error_sets, steady_state_set, tightened_set)
from .bounding import (BoundingSequence, EllipsoidalBounder, direction_set,
                       ellipsoidal_sequence, polyhedral_sequence, rho_bound,
                       scaled_base_overbound, solve_dlyap, terminal_set)
from .errors import (DimensionError, GeometryError, InfeasibleError,
                     RefgovError, ScenarioError, StabilityError,
                     VerificationError)
from .governor import GovernorOutcome, GovernorState, governor_step, kappa_max
from .models import (ConstraintSpec, ControllerGains, ObserverModel,
                     PlantModel, PredictionModel, build_observer,
                     build_prediction, build_unmatched, control_input,
                     gamma_for_tracking, observer_step, zoh_discretize)
from .numerics import DEFAULT, NumericPolicy
from .scenario import (CompiledScenario, Scenario, compile_scenario,
                       list_bundled_scenarios, load_scenario, parse_scenario,
                       precompute)
from .sets import (AffineMap, Box, ConvexSet, Ellipsoid, MinkowskiSum,
                   Polytope, affine_image, contains, minkowski_sum,
                   pontryagin_diff, prune_redundant, subset_of, support,
                   vertices_of)
from .simulate import (DisturbanceProfile, SimTrace, compare_traces,
                       run_baseline_no_rg, run_closed_loop)

__version__ = "0.1.0"
