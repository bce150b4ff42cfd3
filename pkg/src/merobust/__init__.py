"""Tests of the causal null that survive classical measurement error in covariates."""

from .basis import BasisSpec, DesignMatrix, evaluate_basis, evaluate_bases, gram_schmidt_orthonormalize
from .dataset import Dataset
from .gmm import GmmFit, WeightingScheme, chi2_pvalue, estimate_effect, gmm_minimize
from .moments import MomentSystem, make_system

__all__ = [
    "BasisSpec", "Dataset", "DesignMatrix", "GmmFit", "MomentSystem", "WeightingScheme",
    "chi2_pvalue", "estimate_effect", "evaluate_basis", "evaluate_bases", "gmm_minimize",
    "gram_schmidt_orthonormalize", "make_system",
]
