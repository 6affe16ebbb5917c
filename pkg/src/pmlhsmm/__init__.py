"""Penalised maximum likelihood estimation of hidden semi-Markov models.

Dwell-time distributions have an unstructured start and a geometric tail and
are smoothed with difference penalties; likelihoods are evaluated through an
exact hidden Markov representation of the semi-Markov chain.
"""

from .dwell import (
    DwellTimeSpec,
    dwell_cdf,
    dwell_from_working,
    dwell_hazard,
    dwell_pmf,
    dwell_survival,
    dwell_to_working,
    geometric_dwell,
    negative_binomial_dwell,
)
from .emission import Normal, Poisson, VonMises, ZeroInflatedGamma, emission_cdf, emission_density, joint_density
from .expand import ExpandedHmm, HsmmModel, aggregate_marginals, expand, stationary_distribution
from .fit import FitError, FitOptions, FitResult, ModelSpec, fit, initialize, refit
from .inference import (
    Dataset,
    forward_loglik,
    penalised_loglik,
    pseudo_residuals,
    state_probs,
    viterbi,
)
from .kernels import BACKEND
from .penalty import PenaltyConfig, difference, penalty_gradient_hessian, penalty_value
from .select import CvPlan, SelectionReport, aic, candidate_table, cross_validate, effective_df
from .simulate import SimOutput, brute_force_loglik_expanded, brute_force_loglik_semimarkov, simulate

__version__ = "0.1.0"
