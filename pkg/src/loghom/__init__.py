"""Numerical laboratory for homogenization of log-normal coefficient fields.

Samples stationary Gaussian fields on periodic lattices, exponentiates them
into degenerate elliptic coefficients, computes correctors / fluxes / flux
correctors and random regularity radii, and runs seeded Monte Carlo
experiments for the quantitative predictions (CLT scaling, corrector growth,
stretched log^2 radius tails, hole filling, two-scale expansion rates,
commutator normality).
"""

__version__ = "0.1.0"

from .field import (  # noqa: F401
    CovarianceSpec,
    LatticeField,
    LatticeGrid,
    covariance_eval,
    exp_field,
    lognormal_moment,
    sample_gaussian_field,
    truncate_coefficient,
)
from .pde import (  # noqa: F401
    EdgeCoefficient,
    SolveReport,
    apply_operator,
    edge_coefficients,
    solve_divform,
    solve_poisson_spectral,
)
from .correctors import (  # noqa: F401
    CorrectorSet,
    compute_corrector,
    compute_corrector_set,
    compute_flux,
    compute_sigma,
    estimate_ahom,
)
from .radii import (  # noqa: F401
    RadiusField,
    TailFit,
    compute_r_club,
    compute_r_diamond,
    compute_r_spade,
    compute_r_star,
    fit_log2_tail,
    fit_power_tail,
)
from .fluctuations import (  # noqa: F401
    CommutatorField,
    Observable,
    ScalingFit,
    TestFunction,
    avg_gradient_observable,
    build_commutator,
    commutator_observable,
    corrector_growth_observable,
    estimate_Q,
    mu_d,
)
from .twoscale import local_average, two_scale_expansion  # noqa: F401
from .experiment import ExperimentConfig, ExperimentRecord, run_experiment  # noqa: F401
