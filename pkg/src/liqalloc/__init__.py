"""Dynamic portfolio allocation under market impact and liquidity costs.

A least-squares Monte Carlo solver for the multi-period problem of
splitting wealth between one risky asset and cash when trades move the
price permanently, pay a temporary liquidity premium, and incur
proportional fees.  The allocation problem is solved on a discrete
control grid by simulating randomized-control trajectories forward and
regressing realized terminal utilities backward, with optional policy
iteration.
"""

from .utility import Cara, Crra, Utility, floor_wealth, utility_from_tag, utility_tag
from .liquidity import (
    CostModel,
    LiquidityParams,
    PowerLaw,
    ProportionalTc,
    ZeroCost,
    liquidity_cost_per_share,
    market_impact,
    strip_liquidity,
    switch_cost_components,
)
from .rebalance import (
    PortfolioState,
    RebalanceResult,
    rebalance_paths,
    solve_rebalance,
    transaction_volume,
)
from .model import (
    IidLognormalModel,
    MarketModel,
    PathSet,
    Var1Model,
    calibrate_var1,
    load_price_csv,
    rng_stream,
    simulate,
    simulate_iid_lognormal,
    simulate_var1,
    synthetic_var1,
)
from .regression import (
    BasisSpec,
    CoefficientVector,
    build_feature_matrix,
    build_features,
    fit,
    lstsq_ridge,
    predictor_scales_from_sample,
)
from .lsmc import (
    ControlGrid,
    ForwardSample,
    IterationDiagnostics,
    Policy,
    SolveConfig,
    backward_induction,
    forward_simulate,
    klp_backward,
    load_policy,
    policy_action,
    save_policy,
    solve_from_config,
    solve_with_iteration,
)
from .evaluate import (
    BenchmarkRow,
    ComparisonResult,
    EvaluationReport,
    EvolutionRow,
    SweepPoint,
    apply_axis,
    benchmark_matrix,
    cer,
    distribution_evolution,
    evaluate_policy,
    liquidity_blind_comparison,
    sweep,
    write_benchmark_csv,
    write_comparison_csv,
    write_evolution_csv,
    write_sweep_csv,
)

__version__ = "0.1.0"

__all__ = [
    "Cara",
    "Crra",
    "Utility",
    "floor_wealth",
    "utility_from_tag",
    "utility_tag",
    "CostModel",
    "LiquidityParams",
    "PowerLaw",
    "ProportionalTc",
    "ZeroCost",
    "liquidity_cost_per_share",
    "market_impact",
    "strip_liquidity",
    "switch_cost_components",
    "PortfolioState",
    "RebalanceResult",
    "rebalance_paths",
    "solve_rebalance",
    "transaction_volume",
    "IidLognormalModel",
    "MarketModel",
    "PathSet",
    "Var1Model",
    "calibrate_var1",
    "load_price_csv",
    "rng_stream",
    "simulate",
    "simulate_iid_lognormal",
    "simulate_var1",
    "synthetic_var1",
    "BasisSpec",
    "CoefficientVector",
    "build_feature_matrix",
    "build_features",
    "fit",
    "lstsq_ridge",
    "predictor_scales_from_sample",
    "ControlGrid",
    "ForwardSample",
    "IterationDiagnostics",
    "Policy",
    "SolveConfig",
    "backward_induction",
    "forward_simulate",
    "klp_backward",
    "load_policy",
    "policy_action",
    "save_policy",
    "solve_from_config",
    "solve_with_iteration",
    "BenchmarkRow",
    "ComparisonResult",
    "EvaluationReport",
    "EvolutionRow",
    "SweepPoint",
    "apply_axis",
    "benchmark_matrix",
    "cer",
    "distribution_evolution",
    "evaluate_policy",
    "liquidity_blind_comparison",
    "sweep",
    "write_benchmark_csv",
    "write_comparison_csv",
    "write_evolution_csv",
    "write_sweep_csv",
]
