"""Penalized IRLS with UBRE smoothing-parameter selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .copula import norm_ppf
from .model import Design, Evaluation, evaluate

__all__ = [
    "FitOptions",
    "FitDiagnostics",
    "FitResult",
    "NonIdentifiableError",
    "start_values",
    "pirls",
    "ubre",
    "optimize_lambda",
    "influence_trace",
    "fit",
]

log = logging.getLogger(__name__)

LOG_LAMBDA_BOUNDS = (-15.0, 20.0)
MAX_HALVING = 30


class NonIdentifiableError(RuntimeError):
    """The penalized system stays singular after ridge stabilization."""


@dataclass
class FitOptions:
    max_outer: int = 50
    max_inner: int = 100
    tol: float = 1e-6
    kappa: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not self.kappa >= 1:
            raise ValueError("kappa must be at least 1")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration limits must be positive")


@dataclass
class FitDiagnostics:
    tr_P: float = float("nan")
    n_tilde: int = 0
    ubre: float = float("nan")
    penalized_loglik: float = float("nan")
    loglik: float = float("nan")
    n_inner: int = 0
    n_outer: int = 0
    converged: bool = False
    floored_prob_count: int = 0
    ridge: float = 0.0
    trace: list = field(default_factory=list)

    def to_dict(self):
        return {
            "tr_P": self.tr_P,
            "n_tilde": self.n_tilde,
            "ubre": self.ubre,
            "penalized_loglik": self.penalized_loglik,
            "loglik": self.loglik,
            "n_inner": self.n_inner,
            "n_outer": self.n_outer,
            "converged": self.converged,
            "floored_prob_count": self.floored_prob_count,
            "ridge": self.ridge,
            "trace": self.trace,
        }


@dataclass
class FitResult:
    design: Design
    theta: np.ndarray
    lam: np.ndarray
    diagnostics: FitDiagnostics
    fisher: np.ndarray
    hessian: np.ndarray
    score: np.ndarray

    @property
    def S(self):
        return self.design.penalties.matrix(self.lam) if len(self.design.penalties) else np.zeros((self.design.p,) * 2)

    @property
    def converged(self):
        return self.diagnostics.converged

    def loglik(self):
        return self.diagnostics.loglik


# ---------------------------------------------------------------------------
# linear algebra helpers
# ---------------------------------------------------------------------------

def _offending_term(design: Design, A):
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    vec = np.abs(V[:, 0])
    j = int(np.argmax(vec))
    for (eq, name), s in design.term_slices().items():
        if s.start <= j < s.stop:
            return f"eq{eq}:{name}"
    return design.names[j]


def _stable_cho(A, design: Design | None = None):
    """Cholesky factor with bounded ridge escalation; returns ``(factor, ridge)``."""
    A = 0.5 * (A + A.T)
    try:
        return linalg.cho_factor(A), 0.0
    except linalg.LinAlgError:
        pass
    scale = max(float(np.max(np.abs(np.diag(A)))), 1.0)
    ridge = 1e-7
    while ridge <= 1e-3 * (1 + 1e-12):
        try:
            return linalg.cho_factor(A + ridge * scale * np.eye(A.shape[0])), ridge
        except linalg.LinAlgError:
            ridge *= 10
    where = _offending_term(design, A) if design is not None else "unknown block"
    raise NonIdentifiableError(f"penalized system is singular; offending block: {where}")


def _is_pd(A):
    try:
        linalg.cho_factor(0.5 * (A + A.T))
        return True
    except linalg.LinAlgError:
        return False


def influence_trace(fisher, S):
    """``tr(P) = tr((F + S)^{-1} F)`` via the Cholesky factor."""
    c, _ = _stable_cho(fisher + S)
    return float(np.trace(linalg.cho_solve(c, fisher)))


# ---------------------------------------------------------------------------
# start values
# ---------------------------------------------------------------------------

def start_values(design: Design):
    """Cuts at normal quantiles of empirical cumulative proportions; everything else at 0.

    Binary intercepts use the same rule, association parameters start at
    independence.
    """
    theta = np.zeros(design.p)
    nb = design.n_cuts
    cats = [design.cat1, None]
    sel = design.lo2 + 1 == design.hi2
    cats[1] = design.lo2[sel]
    for j, eq in enumerate(design.equations[:2]):
        c = cats[j]
        if eq.threshold == "none" or c.size == 0:
            continue
        counts = np.bincount(c, minlength=nb[j] + 1).astype(float)
        cum = np.cumsum(counts)[:-1] / counts.sum()
        cum = np.clip(cum, 0.01, 0.99)
        q = norm_ppf(cum)
        if eq.threshold == "cuts":
            theta[eq.offset:eq.offset + nb[j]] = np.maximum.accumulate(q)
        else:
            theta[eq.offset] = q[0]
    e3 = design.equations[2]
    if e3.threshold == "intercept":
        theta[e3.offset] = design.triplet.copula.independence_gstar
    return theta


# ---------------------------------------------------------------------------
# inner loop
# ---------------------------------------------------------------------------

def _penalized(ev: Evaluation, theta, S):
    return ev.loglik - 0.5 * float(theta @ S @ theta)


def pirls_step(design: Design, theta, S, ev: Evaluation | None = None):
    """One Newton (or Fisher-scoring) step with step halving.

    Returns ``(theta_new, evaluation_at_new, info)``.
    """
    if ev is None:
        ev = evaluate(design, theta, order=2)
    A = -ev.hessian + S
    newton = _is_pd(A)
    if not newton:
        A = ev.fisher + S
    c, ridge = _stable_cho(A, design)
    step = linalg.cho_solve(c, ev.score - S @ theta)
    pen0 = _penalized(ev, theta, S)
    alpha = 1.0
    for halving in range(MAX_HALVING + 1):
        cand = theta + alpha * step
        ev_new = evaluate(design, cand, order=0, fisher=False)
        pen = _penalized(ev_new, cand, S)
        if np.isfinite(pen) and pen >= pen0 - 1e-10 * abs(pen0):
            break
        alpha *= 0.5
    else:
        return theta, ev, {"newton": newton, "halvings": MAX_HALVING, "ridge": ridge, "accepted": False}
    return cand, None, {"newton": newton, "halvings": halving, "ridge": ridge, "accepted": True}


def pirls(design: Design, theta, S, options: FitOptions | None = None):
    """Iterate P-IRLS at fixed penalty ``S`` until ``max|dtheta| < tol``."""
    options = options or FitOptions()
    theta = np.asarray(theta, dtype=float).copy()
    ev = None
    ridge = 0.0
    for it in range(1, options.max_inner + 1):
        new, _, info = pirls_step(design, theta, S, ev)
        ridge = max(ridge, info["ridge"])
        delta = np.max(np.abs(new - theta)) if new.size else 0.0
        theta = new
        ev = None
        if delta < options.tol or not info["accepted"]:
            return theta, it, delta < options.tol, ridge
    return theta, options.max_inner, False, ridge


# ---------------------------------------------------------------------------
# UBRE
# ---------------------------------------------------------------------------

@dataclass
class _UbreState:
    theta: np.ndarray
    fisher: np.ndarray
    score: np.ndarray
    rss0: float
    n_tilde: int


def _ubre_state(design: Design, theta, ev: Evaluation | None = None):
    if ev is None or ev.fisher is None:
        ev = evaluate(design, theta, order=1, fisher=True)
    n_tilde = design.e_dim * design.n + design.p
    return _UbreState(np.asarray(theta, dtype=float), ev.fisher, ev.score, ev.rss0, n_tilde)


def _ubre_eval(design: Design, st: _UbreState, lam, kappa):
    S = design.penalties.matrix(lam)
    c, _ = _stable_cho(st.fisher + S, design)
    theta_star = linalg.cho_solve(c, st.fisher @ st.theta + st.score)
    delta = theta_star - st.theta
    rss = float(delta @ st.fisher @ delta - 2.0 * delta @ st.score + st.rss0)
    trP = float(np.trace(linalg.cho_solve(c, st.fisher)))
    v = rss / st.n_tilde - 1.0 + 2.0 * kappa * trP / st.n_tilde
    return v, theta_star, trP


def ubre(design: Design, theta, lam, kappa=1.0):
    """UBRE score of the one-step update from ``theta`` at smoothing parameters ``lam``.

    Returns ``(V_u, theta_star, tr_P)``.
    """
    return _ubre_eval(design, _ubre_state(design, theta), lam, kappa)


def optimize_lambda(design: Design, theta, lam, kappa=1.0, state: _UbreState | None = None):
    """Minimise UBRE over ``log(lambda)`` (L-BFGS-B, numerical gradients)."""
    lam = np.asarray(lam, dtype=float)
    if lam.size == 0:
        return lam, float("nan")
    if all(not np.any(mat) for _, mat in design.penalties.blocks):
        return lam, float("nan")
    st = state or _ubre_state(design, theta)

    def obj(rho):
        return _ubre_eval(design, st, np.exp(rho), kappa)[0]

    rho0 = np.clip(np.log(lam), *LOG_LAMBDA_BOUNDS)
    best = optimize.minimize(
        obj,
        rho0,
        method="L-BFGS-B",
        bounds=[LOG_LAMBDA_BOUNDS] * lam.size,
        options={"ftol": 1e-14, "gtol": 1e-9, "maxiter": 200},
    )
    rho = best.x
    v = best.fun
    # guard against a poor local step: never accept a worse score than the start
    v0 = obj(rho0)
    if not v <= v0:
        rho, v = rho0, v0
    return np.exp(rho), float(v)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def fit(design: Design, options: FitOptions | None = None, lam=None, theta0=None, fixed_lambda=False):
    """Maximum penalized likelihood fit with UBRE-selected smoothing parameters.

    The inner loop is run to convergence at the starting ``lam``; each outer
    pass then chooses ``lam`` by UBRE around the current iterate and takes one
    P-IRLS step. Once ``lam`` settles the inner loop is polished to ``tol``.
    """
    options = options or FitOptions()
    n_pen = len(design.penalties)
    lam = np.ones(n_pen) if lam is None else np.atleast_1d(np.asarray(lam, dtype=float)).copy()
    if lam.size != n_pen:
        raise ValueError(f"expected {n_pen} smoothing parameters, got {lam.size}")
    theta = start_values(design) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    diag = FitDiagnostics(n_tilde=design.e_dim * design.n + design.p)

    def S_of(l):
        return design.penalties.matrix(l) if n_pen else np.zeros((design.p, design.p))

    theta, it, ok, ridge = pirls(design, theta, S_of(lam), options)
    diag.n_inner += it
    diag.ridge = max(diag.ridge, ridge)
    select = n_pen > 0 and not fixed_lambda
    converged = ok and not select

    if select:
        lam_done = False
        for outer in range(1, options.max_outer + 1):
            diag.n_outer = outer
            ev = evaluate(design, theta, order=2, fisher=True)
            new_lam = lam
            v = float("nan")
            if not lam_done:
                new_lam, v = optimize_lambda(design, theta, lam, options.kappa, _ubre_state(design, theta, ev))
            dlog = float(np.max(np.abs(np.log(new_lam) - np.log(lam))))
            lam = new_lam
            new, _, info = pirls_step(design, theta, S_of(lam), ev)
            diag.n_inner += 1
            diag.ridge = max(diag.ridge, info["ridge"])
            dtheta = float(np.max(np.abs(new - theta)))
            theta = new
            diag.trace.append({"outer": outer, "ubre": v, "log_lambda": np.log(lam).tolist(), "max_dtheta": dtheta})
            log.debug("outer %d ubre=%.6g dlog=%.2g dtheta=%.2g", outer, v, dlog, dtheta)
            if dlog < 1e-3:
                lam_done = True
            if lam_done and dtheta < options.tol:
                converged = True
                break
        if not converged:
            theta, it, ok, ridge = pirls(design, theta, S_of(lam), options)
            diag.n_inner += it
            converged = ok and lam_done

    S = S_of(lam)
    ev = evaluate(design, theta, order=2, fisher=True)
    v, _, trP = _ubre_eval(design, _ubre_state(design, theta, ev), lam, options.kappa) if n_pen else (
        float("nan"), None, influence_trace(ev.fisher, S))
    if not n_pen:
        st = _ubre_state(design, theta, ev)
        v = st.rss0 / st.n_tilde - 1.0 + 2.0 * options.kappa * trP / st.n_tilde
    diag.tr_P = trP
    diag.ubre = float(v)
    diag.loglik = ev.loglik
    diag.penalized_loglik = _penalized(ev, theta, S)
    diag.floored_prob_count = ev.floored
    diag.converged = bool(converged and ev.floored == 0 and np.isfinite(ev.loglik))
    return FitResult(design, theta, lam, diag, ev.fisher, ev.hessian, ev.score)
