"""Adaptive truncated hierarchical B-splines on macro-element (q-box) meshes.

The package provides, bottom up:

- :mod:`thbox.splinecore` -- univariate/tensor B-spline bases, two-scale
  refinement, quadrature;
- :mod:`thbox.hierarchy` -- domain hierarchies and (truncated) hierarchical
  bases with element extraction;
- :mod:`thbox.qbox` -- macro-element classification (border / well-behaved /
  regular boxes), admissibility-controlled refinement and coarsening;
- :mod:`thbox.bezier` -- local least-squares projection onto the
  hierarchical space via macro-element solves and smoothing weights;
- :mod:`thbox.derham` -- hierarchical spline de Rham complexes and
  cohomology-dimension verification;
- :mod:`thbox.adaptive` -- marking strategies and adaptive projection /
  Poisson loops;
- :mod:`thbox.cli` -- the ``thbox`` command-line driver.
"""

from .splinecore import (
    KnotVector,
    TensorSpace,
    gauss_rule,
    make_knot_vector,
    two_scale_matrix,
    uniform_knot_vector,
    uniform_space,
)
from .hierarchy import (
    DomainHierarchy,
    LevelSequence,
    ThbSpace,
    admissibility_class,
    build_hb,
    build_thb,
    eval_thb,
    hierarchy_from_json,
    hierarchy_to_json,
    truncate,
)
from .qbox import (
    AdmissibilityPolicy,
    QBoxMesh,
    RefinementLimitError,
    classify,
    coarsen_qboxes,
    refine_qboxes,
    support_extension_S,
)
from .bezier import (
    ErrorReport,
    ProjectionResult,
    ProjectorPartition,
    SupportExtension,
    active_elements_in_box,
    bezier_project,
    build_partition,
    error_report,
    local_l2_project,
    region_gramian,
    smoothing_weights,
    support_extension,
    verify_non_overloaded,
)
from .derham import (
    AssumptionVerdict,
    ComplexSpaces,
    ExactnessReport,
    IndexGrid,
    build_complex,
    check_assumption_3a,
    check_assumption_3b,
    exactness_report,
    interior_functions,
    shortest_chain,
)
from .adaptive import (
    AdaptiveConfig,
    AdaptiveTrace,
    TraceStep,
    adapt_loop,
    adapt_poisson,
    adapt_project,
    dorfler_mark,
    poisson_solve,
    residual_estimator,
)
from .cli import ConfigError, mesh_svg

__version__ = "0.1.0"

__all__ = [
    "KnotVector",
    "TensorSpace",
    "gauss_rule",
    "make_knot_vector",
    "two_scale_matrix",
    "uniform_knot_vector",
    "uniform_space",
    "DomainHierarchy",
    "LevelSequence",
    "ThbSpace",
    "admissibility_class",
    "build_hb",
    "build_thb",
    "eval_thb",
    "hierarchy_from_json",
    "hierarchy_to_json",
    "truncate",
    "AdmissibilityPolicy",
    "QBoxMesh",
    "RefinementLimitError",
    "classify",
    "coarsen_qboxes",
    "refine_qboxes",
    "support_extension_S",
    "ErrorReport",
    "ProjectionResult",
    "ProjectorPartition",
    "SupportExtension",
    "active_elements_in_box",
    "bezier_project",
    "build_partition",
    "error_report",
    "local_l2_project",
    "region_gramian",
    "smoothing_weights",
    "support_extension",
    "verify_non_overloaded",
    "AssumptionVerdict",
    "ComplexSpaces",
    "ExactnessReport",
    "IndexGrid",
    "build_complex",
    "check_assumption_3a",
    "check_assumption_3b",
    "exactness_report",
    "interior_functions",
    "shortest_chain",
    "AdaptiveConfig",
    "AdaptiveTrace",
    "TraceStep",
    "adapt_loop",
    "adapt_poisson",
    "adapt_project",
    "dorfler_mark",
    "poisson_solve",
    "residual_estimator",
    "ConfigError",
    "mesh_svg",
    "__version__",
]
