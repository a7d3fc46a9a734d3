import numpy as np
import pytest

from bigam.copula import norm_ppf
from bigam.fit import fit
from bigam.infer import information_criteria, posterior_cov, simulate_ci, smooth_bands, term_edf

from .test_fit import linear_probit, smooth_probit


@pytest.fixture(scope="module")
def linear_fit():
    return fit(linear_probit(800, seed=3, gamma=0.4))


@pytest.fixture(scope="module")
def smooth_fit():
    return fit(smooth_probit(600, seed=9))


def test_unpenalized_posterior_is_inverse_fisher(linear_fit):
    pc = posterior_cov(linear_fit)
    assert np.allclose(pc.V_theta, np.linalg.inv(linear_fit.fisher), rtol=1e-8)
    # no penalty: the sandwich collapses to the inverse observed information
    assert np.allclose(pc.V_theta_freq, np.linalg.inv(-linear_fit.hessian), rtol=1e-8)


def test_sandwich_matches_explicit_formula(smooth_fit):
    pc = posterior_cov(smooth_fit)
    H = -smooth_fit.hessian
    Hp = np.linalg.inv(H + smooth_fit.S)
    assert np.allclose(pc.V_theta_freq, Hp @ H @ Hp, rtol=1e-7, atol=1e-12)
    # the penalty only removes variance
    assert np.linalg.eigvalsh(Hp - pc.V_theta_freq).min() > -1e-10


def test_linear_functional_matches_closed_form():
    r = np.random.default_rng(0)
    A = r.normal(size=(4, 4))
    V = A @ A.T + np.eye(4)
    theta = r.normal(size=4)
    a = np.array([1.0, -0.5, 0.25, 2.0])
    ci = simulate_ci(theta, V, lambda d: d @ a, n_sim=100_000, seed=1, vectorized=True)
    sd = np.sqrt(a @ V @ a)
    z = float(norm_ppf(0.975))
    assert ci.estimate == pytest.approx(theta @ a)
    assert (ci.upper - ci.lower) / 2 == pytest.approx(z * sd, rel=0.02)
    assert ci.lower < ci.estimate < ci.upper


def test_scalar_and_vectorized_paths_agree():
    V = np.diag([0.5, 2.0])
    th = np.array([0.1, -1.0])
    a = simulate_ci(th, V, lambda t: t[0] * t[1], n_sim=500, seed=4)
    b = simulate_ci(th, V, lambda d: d[:, 0] * d[:, 1], n_sim=500, seed=4, vectorized=True)
    assert (a.lower, a.upper) == (b.lower, b.upper)


def test_constant_functional_gives_degenerate_interval():
    ci = simulate_ci(np.zeros(3), np.eye(3), lambda t: 7.0, n_sim=200)
    assert ci.lower == ci.upper == ci.estimate == 7.0


def test_same_seed_same_interval():
    V = np.eye(2)
    f = lambda t: np.exp(t[0]) + t[1]  # noqa: E731
    a = simulate_ci(np.ones(2), V, f, n_sim=1000, seed=12)
    b = simulate_ci(np.ones(2), V, f, n_sim=1000, seed=12)
    c = simulate_ci(np.ones(2), V, f, n_sim=1000, seed=13)
    assert a == b
    assert a != c


def test_ci_argument_errors():
    with pytest.raises(ValueError, match="n_sim"):
        simulate_ci(np.zeros(1), np.eye(1), lambda t: t[0], n_sim=10)
    for alpha in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError, match="alpha"):
            simulate_ci(np.zeros(1), np.eye(1), lambda t: t[0], alpha=alpha)
    with pytest.raises(ValueError, match="non-finite"):
        simulate_ci(np.zeros(1), np.eye(1), lambda t: t[0] if t[0] > 0 else np.nan, n_sim=200)


def test_smooth_bands(smooth_fit):
    df = smooth_bands(smooth_fit, "v")
    assert len(df) == 200
    assert np.all(df["se"] >= 0)
    assert np.all(df["lower"] <= df["fit"]) and np.all(df["fit"] <= df["upper"])
    wide = smooth_bands(smooth_fit, "v", alpha=0.01)
    assert np.all(wide["upper"] - wide["lower"] >= df["upper"] - df["lower"])
    with pytest.raises(ValueError, match="knot range"):
        smooth_bands(smooth_fit, "v", grid=[-5.0])
    with pytest.raises(KeyError):
        smooth_bands(smooth_fit, "nope")


def test_edf_and_information_criteria(linear_fit, smooth_fit):
    ic = information_criteria(linear_fit)
    assert ic["AIC"] == pytest.approx(2 * linear_fit.design.p - 2 * linear_fit.diagnostics.loglik, rel=1e-10)
    edf = term_edf(smooth_fit)
    assert sum(edf.values()) == pytest.approx(smooth_fit.diagnostics.tr_P, rel=1e-8)
    assert 1.0 <= edf["eq1:s(v)"] <= 9.0
