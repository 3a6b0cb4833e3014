"""rglab: a numerical laboratory for multiscale Gaussian covariance decompositions,
discrete scale maps on field functionals, perturbative coupling flows, and polymer
representations of partition densities on small volumes."""

from .kernels import (
    CovarianceKernel,
    FieldDimension,
    MollifierU,
    build_mollifier,
    bump_profile,
    check_positive_definite,
    fluctuation_covariance,
    kernel_from_csv,
    kernel_to_csv,
    rescaled_fluctuation,
    scale_kernel,
    unit_cutoff_covariance,
    verify_scaling_decomposition,
)
from .fields import (
    FieldEnsemble,
    LatticeField,
    LatticeGrid,
    empirical_covariance,
    multiscale_assemble,
    sample_gaussian,
    scale_field,
    slow_variation_probability,
)
from .functionals import (
    CovarianceSplit,
    LocalPotential,
    Region,
    ScalingClass,
    WickMonomial,
    apply_TL_analytic,
    apply_TL_mc,
    classify,
    invariance_check,
    reorder_wick,
    semigroup_check,
    wick_order,
)
from .flow import (
    CouplingState,
    FlowCoefficients,
    FlowTrajectory,
    critical_mass,
    critical_mass_shooting,
    cutoff_schedule,
    derive_coefficients,
    dimensionless_couplings,
    fixed_point,
    flow_rhs,
    integrate_flow,
    wick_contraction_channels,
)
from .polymers import (
    BlockLattice,
    PolymerActivity,
    TestFieldFamily,
    enumerate_polymers,
    extract_relevant_linear,
    l_closure,
    map_B,
    norm_aggregate,
    p_fluctuation,
    partition_density,
    rg_step_polymer,
    stability_bound_check,
)

__version__ = "0.1.0"
