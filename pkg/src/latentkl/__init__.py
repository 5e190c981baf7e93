"""Maximum-likelihood and Bayes estimation of latent labels in regular mixture models,
with closed-form asymptotic error coefficients and Monte Carlo checks of them."""

from .estimators import BAYES, ML, Prior, align_mle, build_posterior, em_fit
from .fisher import FisherBundle, coefficient_report, fisher_matrices
from .model import MixtureModel, NonRegularError, TrueDistribution, sample_dataset

__all__ = [
    "BAYES",
    "ML",
    "FisherBundle",
    "MixtureModel",
    "NonRegularError",
    "Prior",
    "TrueDistribution",
    "align_mle",
    "build_posterior",
    "coefficient_report",
    "em_fit",
    "fisher_matrices",
    "sample_dataset",
]
