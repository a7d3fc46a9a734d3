"""Data generators and the Monte Carlo harness for the triangular ordinal study."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg
from threadpoolctl import threadpool_limits

from .copula import copula_derivs, norm_cdf, norm_ppf, parse_copula
from .fit import FitOptions, fit
from .model import ModelTriplet, ResponseSpec, TermSpec, build_design

__all__ = [
    "DgpSpec",
    "test_functions",
    "make_rng",
    "box_muller",
    "discretize",
    "gen_triangular_ordinal",
    "gen_selection_binary",
    "gen_biv_binary",
    "triangular_triplet",
    "MonteCarloSummary",
    "monte_carlo",
    "worker_count",
]

CURVES = {"s11": (0, "v1"), "s12": (0, "v2"), "s21": (1, "v1")}


@dataclass
class DgpSpec:
    n: int = 2000
    seed: int = 0
    kind: str = "triangular_ordinal"
    beta1: tuple = (1.0, 2.0, 1.0)
    beta2: tuple = (1.0, -2.0)
    psi: float = -0.3
    rho: float = 0.9
    cuts1: tuple = (-2.0, -1.0, 0.0, 2.0)
    cuts2: tuple = (-1.4, -0.7, -0.2, 0.7, 3.0)
    copula: str = "gaussian"
    gamma: float = 0.5

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.kind not in ("triangular_ordinal", "selection_binary", "biv_binary_copula"):
            raise ValueError(f"no generator for kind {self.kind!r}")
        if not -1 < self.rho < 1:
            raise ValueError("rho must lie in (-1, 1)")
        for c in (self.cuts1, self.cuts2):
            if np.any(np.diff(c) < 0):
                raise ValueError("cut points must be non-decreasing")

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("beta1", "beta2", "cuts1", "cuts2"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def test_functions(name: str, v):
    v = np.asarray(v, dtype=float)
    if name == "s11":
        return 1.0 - v + 1.6 * v ** 2 - np.sin(5.0 * v)
    if name == "s12":
        return 4.0 * v
    if name == "s21":
        return 0.08 * (v ** 11 * (10.0 * (1.0 - v)) ** 6 + 10.0 * (10.0 * v) ** 3 * (1.0 - v) ** 10)
    raise ValueError(f"unknown test function {name!r}")


test_functions.__test__ = False  # keep pytest from collecting it


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def box_muller(rng: np.random.Generator, n: int):
    """Two independent standard normal vectors from uniform pairs."""
    u1 = 1.0 - rng.random(n)  # (0, 1]
    u2 = rng.random(n)
    r = np.sqrt(-2.0 * np.log(u1))
    return r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)


def discretize(latent, cuts):
    """Category ``k`` (1-based) when ``c[k-1] < y* <= c[k]``."""
    return np.searchsorted(np.asarray(cuts, dtype=float), np.asarray(latent, dtype=float), side="left") + 1


def gen_triangular_ordinal(spec: DgpSpec, stream: int = 0, return_latent=False):
    rng = make_rng(spec.seed, stream)
    n = spec.n
    v1 = rng.random(n)
    v2 = rng.random(n)
    x = (rng.random((3, n)) < 0.5).astype(float) - 0.5
    z1, z2 = box_muller(rng, n)
    e1 = z1
    e2 = spec.rho * z1 + np.sqrt(1.0 - spec.rho ** 2) * z2
    b1, b2 = spec.beta1, spec.beta2
    y1s = b1[0] * x[0] + b1[1] * x[1] + b1[2] * x[2] + test_functions("s11", v1) + test_functions("s12", v2) + e1
    y2s = spec.psi * y1s + b2[0] * x[0] + b2[1] * x[1] + test_functions("s21", v1) + e2
    df = pd.DataFrame({
        "y1": discretize(y1s, spec.cuts1),
        "y2": discretize(y2s, spec.cuts2),
        "x1": x[0], "x2": x[1], "x3": x[2],
        "v1": v1, "v2": v2,
    })
    if return_latent:
        return df, np.column_stack([y1s, y2s]), np.column_stack([e1, e2])
    return df


def _conditional_inverse(cop, u, w, gstar, iters=60):
    """Solve ``dC/du (u, v) = w`` for ``v`` by bisection."""
    lo = np.zeros_like(u)
    hi = np.ones_like(u)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        h = copula_derivs(cop, u, mid, gstar).h1
        below = h < w
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def gen_biv_binary(spec: DgpSpec, stream: int = 0):
    """Two binary responses joined by a copula with standard normal margins.

    ``beta1`` = (intercept, x1, x2) and ``beta2`` = (intercept, x1); missing
    trailing coefficients are zero. ``y_j = 1`` when the latent error falls
    below the predictor.
    """
    rng = make_rng(spec.seed, stream)
    n = spec.n
    cop = parse_copula(spec.copula)
    gstar = np.full(n, float(cop.inverse_link(spec.gamma)))
    x1 = rng.standard_normal(n)
    x2 = rng.standard_normal(n)
    u = np.clip(rng.random(n), 1e-12, 1 - 1e-12)
    w = np.clip(rng.random(n), 1e-12, 1 - 1e-12)
    v = _conditional_inverse(cop, u, w, gstar)
    b1 = tuple(spec.beta1) + (0.0,) * (3 - len(spec.beta1))
    b2 = tuple(spec.beta2) + (0.0,) * (2 - len(spec.beta2))
    eta1 = b1[0] + b1[1] * x1 + b1[2] * x2
    eta2 = b2[0] + b2[1] * x1
    y1 = (u <= norm_cdf(eta1)).astype(float)
    y2 = (v <= norm_cdf(eta2)).astype(float)
    return pd.DataFrame({"y1": y1, "y2": y2, "x1": x1, "x2": x2})


def gen_selection_binary(spec: DgpSpec, stream: int = 0):
    """Selection data: ``y2`` recorded (0/1) only where ``y1 == 1``, otherwise missing.

    Coefficients as in :func:`gen_biv_binary`; ``x2`` enters selection only and
    acts as the exclusion restriction.
    """
    df = gen_biv_binary(spec, stream)
    df.loc[df["y1"] == 0, "y2"] = np.nan
    return df


def triangular_triplet(basis_dim: int = 10) -> ModelTriplet:
    """Model matching the triangular generator's predictor structure."""
    eq1 = [TermSpec("linear", "x1"), TermSpec("linear", "x2"), TermSpec("linear", "x3"),
           TermSpec("smooth", "v1", basis_dim=basis_dim), TermSpec("smooth", "v2", basis_dim=basis_dim)]
    eq2 = [TermSpec("linear", "x1"), TermSpec("linear", "x2"), TermSpec("smooth", "v1", basis_dim=basis_dim)]
    return ModelTriplet(
        "triangular_ordinal",
        (ResponseSpec("ordinal", 5), ResponseSpec("ordinal", 6)),
        [eq1, eq2],
        "gaussian",
    )


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

def worker_count():
    env = os.environ.get("BIGAM_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


@dataclass
class MonteCarloSummary:
    grid: np.ndarray
    curves: dict                  # name -> dict(truth, mean, estimates, se)
    rmse: dict
    coverage: dict
    params: pd.DataFrame
    failures: int
    replications: int
    metadata: dict = field(default_factory=dict)

    @property
    def failure_rate(self):
        return self.failures / self.replications

    def to_dict(self):
        ok = self.params.dropna()
        return {
            "replications": self.replications,
            "failures": self.failures,
            "failure_rate": self.failure_rate,
            "rmse": self.rmse,
            "coverage": self.coverage,
            "psi_mean": float(ok["psi"].mean()) if len(ok) else None,
            "rho_mean": float(ok["rho"].mean()) if len(ok) else None,
            "metadata": self.metadata,
        }


def _curve_estimate(result, eq_index, column, grid, z):
    design = result.design
    eq = design.equations[eq_index]
    term = next(t for t in eq.terms if t.spec.kind == "smooth" and t.spec.column == column)
    s = eq.term_slices()[term.name]
    B = term.columns(pd.DataFrame({column: grid}))
    V = linalg.inv(0.5 * (result.fisher + result.S + (result.fisher + result.S).T))
    Vt = V[s, s]
    est = B @ result.theta[s]
    se = np.sqrt(np.maximum(np.einsum("gi,ij,gj->g", B, Vt, B), 0.0))
    return est, se


def _replicate(args):
    spec, rep, grid_base, options, basis_dim = args
    z = float(norm_ppf(0.975))
    with threadpool_limits(1):
        df = gen_triangular_ordinal(spec, stream=rep)
        trip = triangular_triplet(basis_dim)
        try:
            design = build_design(df, trip, df[["y1", "y2"]].to_numpy(float))
            res = fit(design, options)
        except Exception as exc:  # recorded, not fatal
            return {"rep": rep, "ok": False, "error": repr(exc)}
        out = {"rep": rep, "ok": bool(res.converged), "curves": {}}
        th = res.theta
        out["psi"] = float(th[design.names.index("psi")])
        out["rho"] = float(np.tanh(th[design.names.index("atanh_rho")]))
        for name, (eq_idx, col) in CURVES.items():
            v = df[col].to_numpy()
            grid = np.clip(grid_base, v.min(), v.max())
            truth = test_functions(name, grid) - test_functions(name, v).mean()
            est, se = _curve_estimate(res, eq_idx, col, grid, z)
            cover = float(np.mean(np.abs(est - truth) <= z * se))
            out["curves"][name] = {"truth": truth, "est": est, "se": se, "coverage": cover}
        out["n_outer"] = res.diagnostics.n_outer
        return out


def monte_carlo(spec: DgpSpec, replications: int, options: FitOptions | None = None,
                grid_size: int = 200, workers: int | None = None, basis_dim: int = 10) -> MonteCarloSummary:
    """Generate-and-fit replications of the triangular ordinal study.

    Each replication uses its own generator stream ``(seed, rep)``, so the
    summary does not depend on the number of workers.
    """
    if replications < 1:
        raise ValueError("replications must be at least 1")
    options = options or FitOptions()
    grid = np.linspace(0.005, 0.995, grid_size)
    jobs = [(spec, rep, grid, options, basis_dim) for rep in range(replications)]
    workers = worker_count() if workers is None else workers
    if workers > 1 and replications > 1:
        with ProcessPoolExecutor(max_workers=min(workers, replications)) as pool:
            results = list(pool.map(_replicate, jobs))
    else:
        results = [_replicate(j) for j in jobs]

    good = [r for r in results if r["ok"]]
    failures = replications - len(good)
    curves, rmse, coverage = {}, {}, {}
    for name in CURVES:
        if good:
            truth = np.mean([r["curves"][name]["truth"] for r in good], axis=0)
            ests = np.array([r["curves"][name]["est"] for r in good])
            mean = ests.mean(axis=0)
            rmse[name] = float(np.sqrt(np.mean((mean - truth) ** 2)))
            coverage[name] = float(np.mean([r["curves"][name]["coverage"] for r in good]))
        else:
            truth = mean = np.full(grid_size, np.nan)
            ests = np.empty((0, grid_size))
            rmse[name] = coverage[name] = float("nan")
        curves[name] = {"truth": truth, "mean": mean, "estimates": ests}
    params = pd.DataFrame([
        {"rep": r["rep"], "converged": r["ok"], "psi": r.get("psi", np.nan), "rho": r.get("rho", np.nan)}
        for r in results
    ])
    params.loc[~params["converged"], ["psi", "rho"]] = np.nan
    meta = {
        "dgp": spec.to_dict(),
        "covariates": "v1, v2 ~ U(0,1); x1, x2, x3 ~ Bernoulli(0.5) - 0.5",
        "errors": [r["error"] for r in results if "error" in r],
    }
    summary = MonteCarloSummary(grid, curves, rmse, coverage, params, failures, replications, meta)
    if failures > 0.2 * replications:
        raise RuntimeError(f"{failures} of {replications} replications failed")
    return summary
