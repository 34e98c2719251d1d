"""Sequential design for exceedance probabilities of stochastic responses.

A variational heteroscedastic Gaussian process models the mean ``f`` and
log-variance ``g`` of a noisy input-to-response map; a density-weighted
uncertainty acquisition picks the next sample, and the exceedance
probability is integrated under the posterior means.
"""

__version__ = "0.1.0"

from stochbed.acquisition import cubature_std, select_next, tail_prob, variance_upper_bound
from stochbed.design import RunRecord, estimate_pe, latin_hypercube, run_sequential
from stochbed.gp import ConditioningError, Dataset, KernelParams, SgprHyper, sgpr_fit, sgpr_log_marginal
from stochbed.problems import FourBranch2D, Problem, Synthetic1D
from stochbed.vhgpr import TrainedVhgpr, VhgprHyper, elbo, variational_moments, vhgpr_fit

__all__ = [
    "ConditioningError",
    "Dataset",
    "FourBranch2D",
    "KernelParams",
    "Problem",
    "RunRecord",
    "SgprHyper",
    "Synthetic1D",
    "TrainedVhgpr",
    "VhgprHyper",
    "cubature_std",
    "elbo",
    "estimate_pe",
    "latin_hypercube",
    "run_sequential",
    "select_next",
    "sgpr_fit",
    "sgpr_log_marginal",
    "tail_prob",
    "variance_upper_bound",
    "variational_moments",
    "vhgpr_fit",
]
