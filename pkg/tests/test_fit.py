import numpy as np
import pandas as pd
import pytest
from scipy import linalg

from bigam.fit import (
    FitOptions,
    NonIdentifiableError,
    _stable_cho,
    fit,
    influence_trace,
    pirls_step,
    start_values,
    ubre,
)
from bigam.model import ModelTriplet, ResponseSpec, TermSpec, build_design, evaluate, log_likelihood, obs_contrib
from bigam.sim import DgpSpec, gen_biv_binary, gen_triangular_ordinal, test_functions, triangular_triplet

from .conftest import richardson

BIN = (ResponseSpec(), ResponseSpec())


def smooth_probit(n=1000, seed=0, basis_dim=10):
    """Bivariate probit whose first margin carries one smooth of v."""
    r = np.random.default_rng(seed)
    df = gen_biv_binary(DgpSpec(n=n, seed=seed, kind="biv_binary_copula", beta1=(0.2, 0.0, 0.5),
                                beta2=(-0.3, 0.8), gamma=0.4))
    v = r.uniform(size=n)
    df["v"] = v
    # shift the first response by a smooth signal through a re-draw of its latent error
    z = r.standard_normal(n)
    eta = 0.2 + 0.5 * df["x2"] + np.sin(2 * np.pi * v)
    df["y1"] = (z <= eta).astype(float)
    trip = ModelTriplet("biv_binary_copula", BIN,
                        [[TermSpec("linear", "x2"), TermSpec("smooth", "v", basis_dim=basis_dim)],
                         [TermSpec("linear", "x1")]], "gaussian")
    return build_design(df, trip, df[["y1", "y2"]].to_numpy(float))


def linear_probit(n, seed=0, gamma=0.5, copula="gaussian"):
    df = gen_biv_binary(DgpSpec(n=n, seed=seed, kind="biv_binary_copula", beta1=(0.3, -0.6, 0.5),
                                beta2=(-0.2, 0.7), gamma=gamma, copula=copula))
    trip = ModelTriplet("biv_binary_copula", BIN,
                        [[TermSpec("linear", "x1"), TermSpec("linear", "x2")], [TermSpec("linear", "x1")]], copula)
    return build_design(df, trip, df[["y1", "y2"]].to_numpy(float))


def test_matches_hand_rolled_newton():
    d = linear_probit(20, seed=1, gamma=0.3)
    res = fit(d)
    th = start_values(d)
    for _ in range(40):
        g = richardson(lambda t: log_likelihood(d, t), th)[0]
        H = richardson(lambda t: richardson(lambda s: log_likelihood(d, s), t, h=1e-2)[0], th, h=1e-2)
        step = np.linalg.solve(-0.5 * (H + H.T), g)
        while log_likelihood(d, th + step) < log_likelihood(d, th):
            step /= 2
        th = th + step
        if np.max(np.abs(step)) < 1e-10:
            break
    assert np.allclose(res.theta, th, atol=1e-5)
    assert res.converged


def test_converged_fit_solves_penalized_score():
    d = smooth_probit(600, seed=1)
    res = fit(d)
    grad = res.score - res.S @ res.theta
    assert np.max(np.abs(grad)) < 1e-5 * max(1.0, np.max(np.abs(res.score)))


def test_penalized_loglik_never_decreases():
    d = smooth_probit(400, seed=2)
    S = d.penalties.matrix([1.0])
    th = start_values(d)
    prev = -np.inf
    for _ in range(12):
        th, _, info = pirls_step(d, th, S)
        ev = evaluate(d, th, order=0, fisher=False)
        pen = ev.loglik - 0.5 * th @ S @ th
        assert pen >= prev - 1e-10 * abs(pen)
        prev = pen


def test_unpenalized_trace_is_p():
    d = linear_probit(300)
    res = fit(d)
    assert res.diagnostics.tr_P == pytest.approx(d.p, abs=1e-9)
    assert res.lam.size == 0


def test_trace_two_ways_and_monotone():
    d = smooth_probit(500, seed=4)
    res = fit(d, lam=[1.0], fixed_lambda=True)
    oc = obs_contrib(d, res.theta)
    # explicit influence matrix of the stacked weighted design
    L = np.linalg.cholesky(oc.W_bar + 1e-300 * np.eye(oc.W_bar.shape[1]))
    A = np.einsum("nml,nmp->nlp", L, oc.D).reshape(-1, d.p)
    F = A.T @ A
    assert np.allclose(F, res.fisher, rtol=1e-10, atol=1e-8)
    traces = []
    for lam in np.logspace(-3, 3, 9):
        S = d.penalties.matrix([lam])
        P = A @ np.linalg.solve(F + S, A.T)
        t_solve = influence_trace(F, S)
        assert t_solve == pytest.approx(np.trace(P), rel=1e-8)
        # generalized eigenvalues of (F, F + S) give the same trace
        assert t_solve == pytest.approx(linalg.eigh(F, F + S, eigvals_only=True).sum(), rel=1e-8)
        traces.append(t_solve)
    assert np.all(np.diff(traces) < 0)


def test_ubre_optimum_beats_grid_and_edf_range():
    d = smooth_probit(1000, seed=5)
    res = fit(d)
    v_opt, _, _ = ubre(d, res.theta, res.lam)
    grid = [ubre(d, res.theta, [lam])[0] for lam in np.logspace(-4, 6, 21)]
    assert v_opt <= min(grid) + 1e-12
    edf = res.diagnostics.tr_P - (d.p - 9)
    assert 2 <= edf <= 9


def test_larger_kappa_selects_smoother_fit():
    d = smooth_probit(800, seed=6)
    t1 = fit(d, FitOptions(kappa=1.0)).diagnostics.tr_P
    t2 = fit(d, FitOptions(kappa=2.0)).diagnostics.tr_P
    assert t2 <= t1 + 1e-8


def test_heavy_penalty_gives_straight_line():
    d = smooth_probit(800, seed=7)
    res = fit(d, lam=[1e8], fixed_lambda=True)
    term = d.equations[0].terms[1]
    s = d.equations[0].term_slices()[term.name]
    grid = np.linspace(term.knots[0], term.knots[-1], 50)
    f = term.columns(pd.DataFrame({"v": grid})) @ res.theta[s]
    resid = f - np.polyval(np.polyfit(grid, f, 1), grid)
    assert np.max(np.abs(resid)) < 1e-3 * max(np.ptp(f), 1e-3) + 1e-6


def test_refit_is_a_fixed_point():
    d = smooth_probit(600, seed=8)
    opts = FitOptions()
    res = fit(d, opts)
    again = fit(d, opts, lam=res.lam, theta0=res.theta)
    assert np.max(np.abs(again.theta - res.theta)) <= opts.tol


def test_gaussian_copula_recovers_association():
    d = linear_probit(3000, seed=11, gamma=0.5)
    res = fit(d)
    gamma = np.tanh(res.theta[d.equations[2].offset])
    assert abs(gamma - 0.5) < 0.15


def test_fisher_and_observed_information_agree_as_n_grows():
    gaps = []
    for n in (500, 2000, 8000):
        d = linear_probit(n, seed=21)
        res = fit(d)
        gaps.append(np.linalg.norm(-res.hessian - res.fisher) / np.linalg.norm(res.fisher))
    assert gaps[0] > gaps[1] > gaps[2]


def test_triangular_fit_recovers_structural_parameters():
    df = gen_triangular_ordinal(DgpSpec(n=2000, seed=3))
    d = build_design(df, triangular_triplet(), df[["y1", "y2"]].to_numpy(float))
    res = fit(d)
    assert res.converged
    assert abs(res.theta[d.names.index("psi")] + 0.3) < 0.1
    assert abs(np.tanh(res.theta[d.names.index("atanh_rho")]) - 0.9) < 0.1
    # warm start from a perturbed optimum reaches the same penalized likelihood
    r = np.random.default_rng(0)
    warm = fit(d, theta0=res.theta + r.normal(scale=0.05, size=d.p), lam=res.lam * 3)
    assert warm.diagnostics.penalized_loglik == pytest.approx(res.diagnostics.penalized_loglik, abs=1e-4) or \
        abs(warm.diagnostics.loglik - res.diagnostics.loglik) < 1e-2


def test_duplicate_column_is_stabilised():
    d = linear_probit(200)
    df = pd.DataFrame({"x1": d.Z[:, 0, 1], "x1b": d.Z[:, 0, 1], "x2": d.Z[:, 0, 2], "z": d.Z[:, 1, 4]})
    y = np.column_stack([1 - d.cat1, 1 - d.lo2]).astype(float)
    trip = ModelTriplet("biv_binary_copula", BIN,
                        [[TermSpec("linear", "x1"), TermSpec("linear", "x1b")], [TermSpec("linear", "z")]])
    res = fit(build_design(df, trip, y))
    assert res.diagnostics.ridge > 0


def test_stable_cholesky_reports_offending_block():
    d = linear_probit(50)
    A = np.eye(d.p)
    A[2, 2] = -1e6
    with pytest.raises(NonIdentifiableError, match="eq1:x2"):
        _stable_cho(A, d)


def test_options_validation():
    with pytest.raises(ValueError):
        FitOptions(tol=0)
    with pytest.raises(ValueError):
        FitOptions(kappa=0.5)
