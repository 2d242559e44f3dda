"""Empirical-Bayes and experiment-splitting adjustment of A/B test readouts."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    ConfigurationError,
    ExperimentReadout,
    NumericalError,
    SelectionRule,
    ValidationError,
    apply_selection,
    read_readouts,
    two_sided_p,
    write_readouts,
)
from .posteriors import (  # noqa: E402
    Gaussian,
    Huber,
    Laplace,
    Mixture,
    PosteriorSummary,
    StudentT,
    Zero,
    ZeroInflated,
    marginal_loglik,
    posterior,
    posterior_gaussian,
    posterior_laplace,
    posterior_mixture,
    posterior_moments,
    posterior_quadrature,
)
from .fitting import FitResult, fit_ghidorah, fit_mle2, fit_sure_gaussian  # noqa: E402
from .cmle import CmleResult, cmle_ci, cmle_solve, expected_selection_bias  # noqa: E402
from .localh1 import PriorOdds, h1_posterior_bound, localh1_estimate  # noqa: E402
from .splitreg import (  # noqa: E402
    SplitPair,
    TarwesModel,
    predict_tarwes,
    train_rwes_linear,
    train_second_moment,
    train_tarwes,
)
from .simlab import Scenario, builtin_case, generate  # noqa: E402
from .evalreport import EvalReport, score_against_split_b, score_against_truth  # noqa: E402
