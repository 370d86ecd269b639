"""Quantile-hedging values in deflator-only diffusion markets.

Monte Carlo estimators and a regularized dual PDE solver for the minimal
capital that superreplicates a terminal claim with prescribed probability,
plus the convex-duality transforms connecting the two and a supersolution
verifier for candidate value surfaces.
"""
from . import oracles
from .duality import (
    ConvexGridFunction,
    convex_envelope,
    derivative_inverse,
    fenchel_young_gap,
    grid_function,
    legendre_p_to_q,
    legendre_q_to_p,
)
from .engine import (
    PathBundle,
    SimConfig,
    default_scheme,
    exact_bessel3_terminal,
    exact_gbm_terminal,
    integrability_diagnostic,
    simulate,
)
from .errors import (
    ArgmaxAtBoundary,
    BadDistribution,
    CFLWarning,
    ConfigError,
    DimensionUnsupported,
    DomainMismatch,
    EmptySamples,
    GridMismatch,
    InvalidCoefficients,
    MissingAux,
    NonConvexNode,
    Nonfinite,
    NotStrictlyConvex,
    POutOfRange,
    QhedgeError,
    SchemeMismatch,
    SingularDiffusion,
    UnknownModel,
)
from .market import (
    MarketModel,
    Payoff,
    builtin_model,
    linear_payoff,
    market_price_of_risk,
    payoff_from_expression,
)
from .mc import (
    Estimate,
    SampleSet,
    default_p_grid,
    default_q_grid,
    dual_curve,
    dual_value,
    dual_value_regularized,
    empirical_cdf,
    from_bundle,
    neyman_pearson_bruteforce,
    partial_expectation,
    quantile_curve,
    quantile_value,
    sample_set,
    sample_terminal,
    superhedge_value,
)
from .pde import (
    ComparisonReport,
    HJBResult,
    SupersolutionReport,
    compare_candidates,
    default_residual_tol,
    dual_to_primal,
    hjb_residual,
    solve_dual_pde,
    verify_supersolution,
)
from .surfaces import (
    GridSpec,
    Surface,
    read_surface_bin,
    write_surface_bin,
    write_surface_csv,
)

__version__ = "0.1.0"
