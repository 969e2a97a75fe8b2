"""brwlab: simulation and numerical verification of critical decorated BRWs."""

from .schemes import (
    LambdaMode,
    OffspringLaw,
    Outcome,
    ReproductionSample,
    SchemeMoments,
    SchemeSpec,
    StepLaw,
    WeightMode,
    binary_pm1,
    sample_scheme,
    scheme_moments,
    size_biased_atom,
    size_biased_atom_distribution,
    tail_weight_function,
)
from .engine import (
    SimCaps,
    TailEstimate,
    TreeStats,
    estimate_conditional_laplace,
    estimate_tail,
    generation_snapshot,
    many_to_one_check,
    simulate_tree,
    stream,
)
from .gridsolve import GridSolution, pdf_from_grid, solve_h_grid, theorem4_functionals
from .analysis import (
    OdeEval,
    TiltData,
    big_R,
    h_t_infinity,
    laplace_limit_gt,
    laplace_limit_map_volume,
    phi_t,
    psi,
    t_of,
    tilted_scheme,
)
from .multitype import (
    MultitypeSpec,
    TabulatedTypedLaw,
    boundary_mean_check,
    mean_matrices,
    perron,
    reduced_params,
    simulate_reduced,
)
from .mobile import (
    BoltzmannWeights,
    Bridge,
    PartitionData,
    enumerate_bridges,
    estimate_map_observables,
    mobile_spec,
    mu_F_pmf,
    mu_V_pmf,
    sample_bridge,
    solve_partition,
)
from .stats import loglog_slope, wilson_ci

__version__ = "0.1.0"
