"""Grey-box modeling of partially observed continuous-discrete stochastic
state-space models: symbolic model specification, exact/extended Kalman
filtering, maximum likelihood estimation, simulation and profile likelihood.
"""

from .expr import (
    EvaluationError,
    ExprError,
    ExprSyntaxError,
    differentiate,
    evaluate,
    free_variables,
    parse,
    simplify,
    to_string,
)
from .model import (
    CompiledModel,
    ModelError,
    ModelSpec,
    ParameterSetting,
    load_model,
    parse_model,
)
from .kalman import (
    DataError,
    Dataset,
    FilterError,
    LikelihoodOptions,
    SimulationResult,
    StepRecord,
    negative_log_likelihood,
    predict_one_step,
    propagate_ekf,
    propagate_linear,
    simulate_stochastic,
    update,
)
from .estimate import (
    EstimationError,
    FitResult,
    ProfileResult,
    fit,
    observed_information,
    profile_likelihood,
    recover_simulation,
    summarize,
)

__version__ = "0.1.0"

__all__ = [
    "CompiledModel",
    "DataError",
    "Dataset",
    "EstimationError",
    "EvaluationError",
    "ExprError",
    "ExprSyntaxError",
    "FilterError",
    "FitResult",
    "LikelihoodOptions",
    "ModelError",
    "ModelSpec",
    "ParameterSetting",
    "ProfileResult",
    "SimulationResult",
    "StepRecord",
    "differentiate",
    "evaluate",
    "fit",
    "free_variables",
    "load_model",
    "negative_log_likelihood",
    "observed_information",
    "parse",
    "parse_model",
    "predict_one_step",
    "profile_likelihood",
    "propagate_ekf",
    "propagate_linear",
    "recover_simulation",
    "simplify",
    "simulate_stochastic",
    "summarize",
    "to_string",
    "update",
]
