import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from bigam import BivariateGAM
from bigam.sim import DgpSpec, gen_biv_binary, gen_selection_binary, gen_triangular_ordinal, triangular_triplet


@pytest.fixture(scope="module")
def binary_data():
    df = gen_biv_binary(DgpSpec(n=800, seed=1, kind="biv_binary_copula", beta1=(0.2, 0.5, -0.3), beta2=(0.1, 0.4),
                                gamma=0.4))
    return df[["x1", "x2"]], df[["y1", "y2"]]


def test_params_roundtrip_and_clone():
    est = BivariateGAM(copula="clayton", equations=(("x1",), ("x2",)), kappa=1.4)
    params = est.get_params()
    assert params["copula"] == "clayton" and params["kappa"] == 1.4
    c = clone(est)
    assert c.get_params() == params
    c.set_params(copula="frank")
    assert est.copula == "clayton"


def test_not_fitted():
    est = BivariateGAM(equations=(("x1",), ("x2",)))
    with pytest.raises(NotFittedError):
        est.predict_proba(np.zeros((2, 2)))
    with pytest.raises(NotFittedError):
        est.coef_


def test_fit_predict_shapes(binary_data):
    X, y = binary_data
    est = BivariateGAM(equations=(("x1", "x2"), ("x1",))).fit(X, y)
    assert est.converged_
    assert list(est.coef_.index[:3]) == ["eq1:(Intercept)", "eq1:x1", "eq1:x2"]
    P = est.predict_proba(X.iloc[:10])
    assert P.shape == (10, 2, 2)
    assert np.allclose(P.sum(axis=(1, 2)), 1)
    pred = est.predict(X.iloc[:10])
    assert pred.shape == (10, 2) and set(np.unique(pred)) <= {0.0, 1.0}
    assert est.score(X, y) < 0
    assert abs(est.association_ - 0.4) < 0.2
    ci = est.confidence_interval(lambda t: t[1], n_sim=500)
    assert ci.lower < est.coef_.iloc[1] < ci.upper


def test_smooth_terms_and_edf():
    df = gen_triangular_ordinal(DgpSpec(n=1000, seed=5))
    trip = triangular_triplet(basis_dim=8)
    est = BivariateGAM(kind="triangular_ordinal", response_types=("ordinal", "ordinal"), levels=(5, 6),
                       equations=trip.equations[:2], max_outer=20)
    est.fit(df, df[["y1", "y2"]])
    assoc = est.association_
    assert set(assoc) == {"psi", "rho"}
    assert est.predict_proba(df.iloc[:3]).shape == (3, 5, 6)
    assert set(np.unique(est.predict(df.iloc[:50])[:, 0])) <= set(range(1, 6))
    bands = est.smooth_bands("v2", equation=1)
    assert len(bands) == 200
    with pytest.raises(KeyError, match="several"):
        est.smooth_bands("v1")
    edf = est.edf()
    assert 1.0 < edf["eq1:s(v2)"] < 8.0
    assert est.information_criteria()["edf"] == pytest.approx(sum(edf.values()))


def test_selection_prediction():
    df = gen_selection_binary(DgpSpec(n=1000, seed=2, kind="selection_binary", beta1=(0.3, 0.5, 0.8),
                                      beta2=(-0.2, 0.6), gamma=0.5))
    est = BivariateGAM(kind="selection_binary", equations=(("x1", "x2"), ("x1",))).fit(df, df[["y1", "y2"]])
    P = est.predict_proba(df)
    assert P.shape == (1000, 3)
    pred = est.predict(df)
    assert np.all(np.isnan(pred[pred[:, 0] == 0, 1]))
    assert np.all(np.isfinite(pred[pred[:, 0] == 1, 1]))


def test_bad_inputs(binary_data):
    X, y = binary_data
    est = BivariateGAM(equations=(("x1", "nope"), ("x1",)))
    with pytest.raises(Exception, match="nope"):
        est.fit(X, y)
    with pytest.raises(Exception):
        BivariateGAM(equations=(("x1",), ("x1",))).fit(X, y.iloc[:5])
