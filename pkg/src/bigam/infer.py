"""Covariance matrices, simulation-based intervals, smooth bands and information criteria."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import pandas as pd
from scipy import linalg

from .copula import norm_ppf
from .fit import FitResult
from .sim import make_rng

__all__ = [
    "PosteriorCov",
    "posterior_cov",
    "simulate_ci",
    "smooth_bands",
    "information_criteria",
    "term_edf",
    "CIResult",
]


class IndefiniteError(RuntimeError):
    pass


@dataclass
class PosteriorCov:
    V_theta: np.ndarray
    V_theta_freq: np.ndarray


def posterior_cov(result: FitResult) -> PosteriorCov:
    """Bayesian ``(F + S)^{-1}`` and sandwich ``H_p^{-1} H H_p^{-1}``.

    ``H`` is the observed information and ``H_p = H + S``; when ``H_p`` is not
    positive definite the expected information stands in for ``H``.
    """
    A = result.fisher + result.S
    A = 0.5 * (A + A.T)
    try:
        c = linalg.cho_factor(A)
    except linalg.LinAlgError as exc:
        raise IndefiniteError("penalized information is not positive definite; the fit has not converged") from exc
    V = linalg.cho_solve(c, np.eye(A.shape[0]))
    V = 0.5 * (V + V.T)
    H = -0.5 * (result.hessian + result.hessian.T)
    try:
        Hp = linalg.cho_solve(linalg.cho_factor(H + result.S), np.eye(A.shape[0]))
    except linalg.LinAlgError:
        H, Hp = result.fisher, V
    Vf = Hp @ H @ Hp
    return PosteriorCov(V, 0.5 * (Vf + Vf.T))


@dataclass
class CIResult:
    estimate: float
    lower: float
    upper: float
    n_sim: int
    alpha: float
    n_nonfinite: int

    def to_dict(self):
        return {
            "estimate": self.estimate,
            "lower": self.lower,
            "upper": self.upper,
            "n_sim": self.n_sim,
            "alpha": self.alpha,
            "n_nonfinite": self.n_nonfinite,
        }


def draw_coefficients(theta, V, n_sim: int, seed: int = 0):
    """``n_sim`` draws from ``N(theta, V)`` via the Cholesky factor of ``V``."""
    L = linalg.cholesky(0.5 * (V + V.T), lower=True)
    rng = make_rng(seed, 0)
    z = rng.standard_normal((n_sim, len(theta)))
    return theta[None, :] + z @ L.T


def simulate_ci(theta, V, functional: Callable, n_sim: int = 10000, alpha: float = 0.05, seed: int = 0,
                vectorized: bool = False) -> CIResult:
    """Interval from the empirical ``alpha/2`` and ``1 - alpha/2`` order statistics of ``T(theta*)``.

    ``functional`` maps one coefficient vector to a scalar, or the whole
    ``(n_sim, p)`` draw matrix to a vector when ``vectorized`` is set.
    """
    if n_sim < 100:
        raise ValueError("n_sim must be at least 100")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    theta = np.asarray(theta, dtype=float)
    draws = draw_coefficients(theta, np.asarray(V, dtype=float), n_sim, seed)
    if vectorized:
        vals = np.asarray(functional(draws), dtype=float).reshape(n_sim)
    else:
        vals = np.array([float(functional(d)) for d in draws])
    bad = ~np.isfinite(vals)
    if bad.sum() > 0.01 * n_sim:
        raise ValueError(f"functional is non-finite on {int(bad.sum())} of {n_sim} draws")
    vals = np.sort(vals[~bad])
    m = vals.size
    lo_i = max(int(np.floor(m * alpha / 2)) - 1, 0)
    hi_i = min(int(np.floor(m * (1 - alpha / 2))) - 1, m - 1)
    est = float(functional(theta[None, :])[0]) if vectorized else float(functional(theta))
    return CIResult(est, float(vals[lo_i]), float(vals[hi_i]), n_sim, alpha, int(bad.sum()))


def _smooth_term(result: FitResult, term_name: str, equation: int | None = None):
    hits = []
    for eq in result.design.equations:
        if equation is not None and eq.index != equation:
            continue
        for t in eq.terms:
            if term_name in (t.name, t.spec.column) and t.spec.kind == "smooth":
                hits.append((eq, t))
    if not hits:
        raise KeyError(f"no smooth term {term_name!r}")
    if len(hits) > 1:
        raise KeyError(f"smooth {term_name!r} appears in several equations; pass equation=")
    eq, t = hits[0]
    return t, eq.term_slices()[t.name]


def smooth_bands(result: FitResult, term: str, grid=None, alpha: float = 0.05, equation: int | None = None,
                 V: np.ndarray | None = None):
    """Pointwise ``fit +- z * sqrt(b' V b)`` bands for a smooth on ``grid``.

    The grid defaults to 200 equispaced points over the knot range.
    """
    t, s = _smooth_term(result, term, equation)
    if grid is None:
        grid = np.linspace(t.knots[0], t.knots[-1], 200)
    grid = np.asarray(grid, dtype=float)
    if np.any(grid < t.knots[0]) or np.any(grid > t.knots[-1]):
        raise ValueError(f"grid outside the knot range [{t.knots[0]}, {t.knots[-1]}]")
    if V is None:
        V = posterior_cov(result).V_theta
    B = t.columns(pd.DataFrame({t.spec.column: grid}))
    fit = B @ result.theta[s]
    se = np.sqrt(np.maximum(np.einsum("gi,ij,gj->g", B, V[s, s], B), 0.0))
    z = float(norm_ppf(1 - alpha / 2))
    return pd.DataFrame({"x": grid, "fit": fit, "se": se, "lower": fit - z * se, "upper": fit + z * se})


def term_edf(result: FitResult):
    """Effective degrees of freedom per term from the diagonal of ``(F + S)^{-1} F``."""
    A = result.fisher + result.S
    P = linalg.solve(0.5 * (A + A.T), result.fisher, assume_a="sym")
    d = np.diag(P)
    out = {}
    for eq in result.design.equations:
        start = eq.offset
        if eq.n_threshold:
            out[f"eq{eq.index}:{eq.threshold}"] = float(d[start:start + eq.n_threshold].sum())
        for name, s in eq.term_slices().items():
            out[f"eq{eq.index}:{name}"] = float(d[s].sum())
    return out


def information_criteria(result: FitResult):
    """``AIC = 2 tr(P) - 2 loglik`` reported with UBRE and the edf."""
    d = result.diagnostics
    return {"AIC": 2.0 * d.tr_P - 2.0 * d.loglik, "UBRE": d.ubre, "edf": d.tr_P}
