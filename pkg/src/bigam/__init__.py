"""Penalized bivariate additive models for binary and ordinal responses."""
from .copula import CopulaSpec, parse_copula
from .estimator import BivariateGAM
from .fit import FitOptions, fit
from .model import ModelTriplet, ResponseSpec, TermSpec, build_design
from .penalty import Adjacency, read_adjacency

__all__ = [
    "Adjacency",
    "BivariateGAM",
    "CopulaSpec",
    "FitOptions",
    "ModelTriplet",
    "ResponseSpec",
    "TermSpec",
    "build_design",
    "fit",
    "parse_copula",
    "read_adjacency",
]

__version__ = "0.1.0"
