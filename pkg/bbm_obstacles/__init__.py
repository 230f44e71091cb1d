from bbm_obstacles._analysis import (
    DerivedConstants,
    ModelConstants,
    annealed_constant,
    clearing_radius,
    clearing_scale,
    confinement_prob_series_1d,
    derived_constants,
    dirichlet_eigenvalue,
    lambda_c_constant_drift,
    local_growth_exponent,
    predicted_log_mass,
    predicted_rate,
    principal_eigenvalue_unit_ball,
    quenched_constant,
    unit_ball_volume,
)
from bbm_obstacles._branching import (
    Ball,
    DichotomyReport,
    GenealogyLog,
    GrowthCurve,
    Record,
    SimConfig,
    dichotomy_experiment,
    local_mass,
    run_bbm,
    run_free_bbm,
    run_replicates,
    trim_coupling,
)
from bbm_obstacles._config import ExperimentSpec
from bbm_obstacles._environment import (
    Clearing,
    FieldSpec,
    ObstacleField,
    dump_points,
    field_create,
    load_points,
)
from bbm_obstacles._errors import (
    BbmError,
    ConfigError,
    DomainError,
    QueryError,
    TruncationError,
)
from bbm_obstacles._feynman_kac import (
    FkEstimate,
    estimate_annealed_mass,
    estimate_confinement_prob,
    estimate_quenched_mass,
    occupation_functional,
    refinement_check,
)
from bbm_obstacles._genealogy import (
    MrcaLaw,
    YuleTree,
    cdf_table,
    martingale_limit_samples,
    mrca_cdf,
    mrca_density,
    pre_coalescence_size_pmf,
    sample_mrca_pairs,
    sample_pair_mrca,
    simulate_yule_tree,
    size_pmf_table,
    yule_count_pmf,
)


__all__ = [
    "Ball",
    "BbmError",
    "Clearing",
    "ConfigError",
    "DerivedConstants",
    "DichotomyReport",
    "DomainError",
    "ExperimentSpec",
    "FieldSpec",
    "FkEstimate",
    "GenealogyLog",
    "GrowthCurve",
    "ModelConstants",
    "MrcaLaw",
    "ObstacleField",
    "QueryError",
    "Record",
    "SimConfig",
    "TruncationError",
    "YuleTree",
    "annealed_constant",
    "cdf_table",
    "clearing_radius",
    "clearing_scale",
    "confinement_prob_series_1d",
    "derived_constants",
    "dichotomy_experiment",
    "dirichlet_eigenvalue",
    "dump_points",
    "estimate_annealed_mass",
    "estimate_confinement_prob",
    "estimate_quenched_mass",
    "field_create",
    "lambda_c_constant_drift",
    "load_points",
    "local_growth_exponent",
    "local_mass",
    "martingale_limit_samples",
    "mrca_cdf",
    "mrca_density",
    "occupation_functional",
    "pre_coalescence_size_pmf",
    "predicted_log_mass",
    "predicted_rate",
    "principal_eigenvalue_unit_ball",
    "quenched_constant",
    "refinement_check",
    "run_bbm",
    "run_free_bbm",
    "run_replicates",
    "sample_mrca_pairs",
    "sample_pair_mrca",
    "simulate_yule_tree",
    "size_pmf_table",
    "trim_coupling",
    "unit_ball_volume",
    "yule_count_pmf",
]
