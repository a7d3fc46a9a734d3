"""Scikit-learn style estimator wrapping design, fit and inference."""
from __future__ import annotations

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator

from . import infer
from ._validation import check_frame, check_is_fitted, check_responses
from .config import _term
from .fit import FitOptions, fit
from .model import ModelTriplet, ResponseSpec, TermSpec, build_design, cell_probability, evaluate

__all__ = ["BivariateGAM"]


def _as_term(t):
    if isinstance(t, TermSpec):
        return t
    if isinstance(t, str):
        return TermSpec("linear", t)
    return _term(dict(t), None)


class BivariateGAM(BaseEstimator):
    """Penalized bivariate model for two binary or ordinal responses.

    Parameters
    ----------
    kind : {"biv_binary_copula", "biv_ordinal_gaussian", "selection_binary", "triangular_ordinal"}
    copula : str
        Family with optional rotation suffix, e.g. ``"clayton90"``.
    response_types : pair of {"binary", "ordinal"}
    levels : pair of int
        Number of categories per margin (2 for binary).
    equations : sequence of term lists
        Terms for margin 1, margin 2 and (optionally) the association
        parameter. A term is a :class:`TermSpec`, a dict as in the JSON
        config, or a column name (linear term).
    lam : array-like or None
        Starting smoothing parameters (all ones by default).
    fixed_lambda : bool
        Keep ``lam`` instead of selecting it by UBRE.
    """

    def __init__(self, kind="biv_binary_copula", copula="gaussian", response_types=("binary", "binary"),
                 levels=(2, 2), equations=((), ()), lam=None, fixed_lambda=False,
                 max_outer=50, max_inner=100, tol=1e-6, kappa=1.0, seed=0):
        self.kind = kind
        self.copula = copula
        self.response_types = response_types
        self.levels = levels
        self.equations = equations
        self.lam = lam
        self.fixed_lambda = fixed_lambda
        self.max_outer = max_outer
        self.max_inner = max_inner
        self.tol = tol
        self.kappa = kappa
        self.seed = seed

    def _triplet(self):
        responses = tuple(ResponseSpec(k, int(l)) for k, l in zip(self.response_types, self.levels))
        eqs = [[_as_term(t) for t in eq] for eq in self.equations]
        return ModelTriplet(self.kind, responses, eqs, self.copula)

    def _options(self):
        return FitOptions(self.max_outer, self.max_inner, self.tol, self.kappa, self.seed)

    def fit(self, X, y):
        triplet = self._triplet()
        cols = [t.column for eq in triplet.equations for t in eq]
        df = check_frame(X, cols)
        y = check_responses(y, len(df))
        design = build_design(df, triplet, y)
        self.triplet_ = triplet
        self.result_ = fit(design, self._options(), lam=self.lam, fixed_lambda=self.fixed_lambda)
        self.n_features_in_ = df.shape[1]
        self.feature_names_in_ = np.asarray(df.columns, dtype=object)
        return self

    # -- fitted attributes -------------------------------------------------
    @property
    def coef_(self):
        check_is_fitted(self)
        return pd.Series(self.result_.theta, index=self.result_.design.names)

    @property
    def lambda_(self):
        check_is_fitted(self)
        return self.result_.lam

    @property
    def converged_(self):
        check_is_fitted(self)
        return self.result_.converged

    @property
    def association_(self):
        """Copula parameter (intercept-only association) or ``(psi, rho)`` for the triangular model."""
        check_is_fitted(self)
        names = self.result_.design.names
        th = self.result_.theta
        if self.kind == "triangular_ordinal":
            return {"psi": float(th[names.index("psi")]), "rho": float(np.tanh(th[names.index("atanh_rho")]))}
        eq3 = self.result_.design.equations[2]
        if eq3.terms or eq3.threshold != "intercept":
            return None
        return float(self.triplet_.copula.gamma(th[eq3.offset]))

    # -- prediction ---------------------------------------------------------
    def _design_for(self, X, y=None):
        check_is_fitted(self)
        cols = [t.column for eq in self.triplet_.equations for t in eq]
        df = check_frame(X, cols)
        if y is not None:
            y = check_responses(y, len(df))
        return self.result_.design.rows_for(df, y)

    def predict_proba(self, X):
        """Cell probabilities, ``(n, K1, K2)`` (``(n, 3)`` for selection models)."""
        return cell_probability(self._design_for(X), self.result_.theta)

    def predict(self, X):
        """Most probable response pair; selection models return ``NaN`` for unselected outcomes."""
        P = self.predict_proba(X)
        n = P.shape[0]
        if self.kind == "selection_binary":
            k = np.argmax(P, axis=1)
            y1 = (k > 0).astype(float)
            y2 = np.where(k == 0, np.nan, k - 1.0)
            return np.column_stack([y1, y2])
        flat = np.argmax(P.reshape(n, -1), axis=1)
        i, j = np.unravel_index(flat, P.shape[1:])
        off = [0 if k == "binary" else 1 for k in self.response_types]
        return np.column_stack([i + off[0], j + off[1]]).astype(float)

    def score(self, X, y):
        """Mean log-likelihood per observation."""
        d = self._design_for(X, y)
        return evaluate(d, self.result_.theta, order=0, fisher=False).loglik / d.n

    # -- inference ----------------------------------------------------------
    def covariance(self):
        check_is_fitted(self)
        return infer.posterior_cov(self.result_)

    def confidence_interval(self, functional, n_sim=10000, alpha=0.05, seed=None, vectorized=False):
        V = self.covariance().V_theta
        return infer.simulate_ci(self.result_.theta, V, functional, n_sim, alpha,
                                 self.seed if seed is None else seed, vectorized)

    def smooth_bands(self, term, grid=None, alpha=0.05, equation=None):
        check_is_fitted(self)
        return infer.smooth_bands(self.result_, term, grid, alpha, equation)

    def edf(self):
        check_is_fitted(self)
        return infer.term_edf(self.result_)

    def information_criteria(self):
        check_is_fitted(self)
        return infer.information_criteria(self.result_)

