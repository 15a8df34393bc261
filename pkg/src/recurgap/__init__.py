"""Gap-time regression for recurrent events under right censoring.

Conditional estimating equations with nonparametric imputation of the
censored gap, sandwich standard errors, a parametric-imputation comparator,
and a reproducible Monte Carlo harness.
"""

from .comparator import NORMAL_TAIL, TailMomentTable, cs_fit, k1_normal, k2_normal
from .estimate import FitResult, SolverOptions, fit, g1_hat, g2_hat, sigma2_closed_form, solve_theta
from .exceptions import (
    ConfigError,
    ContractError,
    DegenerateDataError,
    EvaluationError,
    GenerationError,
    ModelDomainError,
    RecurGapError,
    SingularJacobianError,
    TidyParseError,
)
from .harness import MCConfig, MCSummary, render_summary, run_study
from .model import History, ModelSpec, MurphyAbsMeanModel, MurphyModel, Parameters
from .simulate import Dataset, ErrorDistribution, SimConfig, SubjectPath, read_tidy, simulate_dataset, write_tidy
from .streams import seed_stream

__version__ = "0.1.0"
