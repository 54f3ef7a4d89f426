"""Order-parameter theory and Monte Carlo simulation of streaming
two-layer teacher-student meta-learning."""

from ._metalab import (
    Activation,
    ConfigError,
    IntegrationPlan,
    ModelConfig,
    OdeMethod,
    OrderParams,
    SimState,
    SimTrajectory,
    Trajectory,
    VariantConfig,
    cosine_similarity,
    empirical_meta_error,
    first_crossing,
    i2,
    i2_prime,
    i3,
    i4,
    init_from_order_params,
    init_sim,
    integrate,
    measure_order_params,
    meta_generalization_error,
    preset_config_json,
    preset_names,
    quadrature_oracle,
    rescale_to_matched_init,
    rhs,
    run_experiment_json,
    run_stream,
    validate_integrals,
)

__all__ = [
    "Activation",
    "ConfigError",
    "IntegrationPlan",
    "ModelConfig",
    "OdeMethod",
    "OrderParams",
    "SimState",
    "SimTrajectory",
    "Trajectory",
    "VariantConfig",
    "cosine_similarity",
    "empirical_meta_error",
    "first_crossing",
    "i2",
    "i2_prime",
    "i3",
    "i4",
    "init_from_order_params",
    "init_sim",
    "integrate",
    "measure_order_params",
    "meta_generalization_error",
    "preset_config_json",
    "preset_names",
    "quadrature_oracle",
    "rescale_to_matched_init",
    "rhs",
    "run_experiment_json",
    "run_stream",
    "validate_integrals",
]
