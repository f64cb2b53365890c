"""Numerical laboratory for one-dimensional quadratic BSDEs whose generator
splits into a convex quadratic-growth core and a uniformly continuous
perturbation."""

from .conjugate import (
    ConjugateHandle,
    MajorantFamily,
    SearchConfig,
    conjugate_handle,
    conjugate_lower_bound_check,
    fenchel_inequality_check,
    fenchel_young_check,
    lambda_superlinearity_check,
    subgradient,
    subgradient_field,
    transform,
    transform_with_argmax,
)
from .duality import (
    AdmissibilityReport,
    ComparisonReport,
    CrosscheckReport,
    DualityReport,
    ZMomentReport,
    audit_admissibility,
    comparison_check,
    duality_certificate,
    extract_optimal_control,
    reflect_generator,
    reflect_terminal,
    shift_generator,
    uniqueness_crosscheck,
    z_moment_check,
)
from .exceptions import (
    ConfigurationError,
    EvaluationFault,
    NonConvexityError,
    PicardDivergenceError,
    QbsdeError,
    RegressionRankError,
    TransformDivergenceError,
)
from .generators import (
    FIXTURE_NAMES,
    CheckReport,
    Fixture,
    GeneratorSpec,
    Probe,
    Witness,
    check_quadratic_growth,
    check_strictly_quadratic,
    check_strong_convexity,
    check_uniform_continuity,
    fixture,
    gtilde,
    gtilde_slope_below,
    reevaluate_witness,
)
from .solver import (
    BsdeSolution,
    BsdeSolver,
    picard_refine,
    polynomial_basis,
    solve,
    solve_dual,
)
from .stochastics import (
    ControlProcess,
    EntropyReport,
    ExpMomentReport,
    PathEnsemble,
    TerminalSpec,
    TimeGrid,
    abs_terminal,
    as_control_map,
    class_D_diagnostic,
    critical_terminal,
    doleans,
    ensemble_digest,
    exp_moment,
    linear_terminal,
    load_ensemble,
    load_solution,
    relative_entropy,
    save_ensemble,
    save_solution,
    simulate,
    survival_inverse,
    terminal_builder,
)
from .tree import rademacher_ensemble, tree_backward_induction

__version__ = "0.1.0"
