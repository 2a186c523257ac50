"""Evolution families and exponential dichotomies for non-densely defined
operators, computed on finite boundary-block models."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    ContractionFailure,
    NondenseError,
    NotContracting,
    ScheduleExhausted,
    SpectralGapMissing,
    TailBudgetExceeded,
)
from .operator_core import (  # noqa: F401
    LambdaSchedule,
    OperatorModel,
    TimeGrid,
    descriptor_operator,
    lifted_operator,
    matrix_operator,
)
from .evolution_family import (  # noqa: F401
    PerturbationFamily,
    PropagatorTable,
    build_family,
    constant_perturbation,
    from_function,
    periodic_perturbation,
    zero_perturbation,
)
from .voc_solver import SolutionTrace, solve_ivp_direct, solve_ivp_resolvent  # noqa: F401
from .dichotomy import (  # noqa: F401
    DichotomySplit,
    bounded_solution,
    persistence_solve,
    spectral_split_autonomous,
    verify_dichotomy,
)
