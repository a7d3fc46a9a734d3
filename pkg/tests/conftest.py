import numpy as np
import pandas as pd
import pytest

from bigam.model import ModelTriplet, ResponseSpec, TermSpec, build_design, cell_probability

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def binary_frame(n, seed=0):
    r = np.random.default_rng(seed)
    return pd.DataFrame({"x": r.normal(size=n), "z": r.normal(size=n), "v": r.uniform(size=n)})


def richardson(f, x, h=2e-3):
    """Jacobian of ``f`` at ``x`` by Richardson-extrapolated central differences.

    Steps are kept large because small cells are differences of O(1) CDF
    values and carry ~1e-9 cancellation noise.
    """
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(f(x))
    out = np.zeros(f0.shape + x.shape)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = 1.0

        def cd(step):
            return (np.atleast_1d(f(x + step * e)) - np.atleast_1d(f(x - step * e))) / (2 * step)

        out[..., j] = (4 * cd(h / 2) - cd(h)) / 3
    return out


def random_instance(kind, copula="gaussian", n=20, seed=0, smooth=True, draw_y=False):
    """Small random design with a plausible coefficient vector.

    Responses are uniform over the cells unless ``draw_y`` is set, in which
    case they are drawn from the model at the returned coefficients.
    """
    r = np.random.default_rng(seed)
    df = binary_frame(n, seed)
    eq = [TermSpec("linear", "x")]
    if smooth:
        eq.append(TermSpec("smooth", "v", basis_dim=5))
    if kind in ("biv_binary_copula", "selection_binary"):
        resp = (ResponseSpec(), ResponseSpec())
        eqs = [eq, [TermSpec("linear", "z")], [TermSpec("linear", "x")]]
    elif kind == "biv_ordinal_gaussian":
        resp = (ResponseSpec("ordinal", 4), ResponseSpec("binary"))
        eqs = [eq, [TermSpec("linear", "z")]]
    else:
        resp = (ResponseSpec("ordinal", 4), ResponseSpec("ordinal", 3))
        eqs = [eq, [TermSpec("linear", "z")]]
    trip = ModelTriplet(kind, resp, eqs, copula)
    y = np.empty((n, 2))
    for j, rs in enumerate(resp):
        y[:, j] = r.integers(0, 2, n) if rs.kind == "binary" else r.integers(1, rs.levels + 1, n)
    if kind == "selection_binary":
        y[y[:, 0] == 0, 1] = np.nan
    d = build_design(df, trip, y)
    th = r.normal(scale=0.4, size=d.p)
    for s in d.cut_slices():
        th[s] = np.sort(r.normal(scale=1.0, size=s.stop - s.start)) + np.arange(s.stop - s.start) * 0.3
    e3 = d.equations[2]
    if e3.threshold == "intercept":
        lo = {"gaussian": -1.0, "frank": -3.0}.get(trip.copula.family, -2.0)
        hi = {"gaussian": 1.0, "frank": 3.0}.get(trip.copula.family, 1.0)
        th[e3.offset] = r.uniform(lo, hi)
        th[e3.offset + 1:e3.offset + e3.size] = r.normal(scale=0.2, size=e3.size - 1)
    if kind == "triangular_ordinal":
        th[d.names.index("psi")] = r.uniform(-0.8, 0.8)
        th[d.names.index("atanh_rho")] = r.uniform(-1.0, 1.0)
    if draw_y:
        P = cell_probability(d, th).reshape(n, -1)
        k = (r.uniform(size=n)[:, None] > np.cumsum(P, axis=1)).sum(axis=1)
        k = np.minimum(k, P.shape[1] - 1)
        if kind == "selection_binary":
            y = np.column_stack([k > 0, np.where(k == 0, np.nan, k - 1.0)]).astype(float)
        else:
            k1, k2 = np.divmod(k, P.shape[1] // (resp[0].levels))
            off = [0 if rs.kind == "binary" else 1 for rs in resp]
            y = np.column_stack([k1 + off[0], k2 + off[1]]).astype(float)
        d = build_design(df, trip, y)
    return d, th
