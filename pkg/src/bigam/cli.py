"""``bigam`` command line: fit, simulate, replicate-fig1, ci.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 non-convergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from . import infer
from .config import SCHEMA_VERSION, ConfigError, ModelConfig, load_config
from .fit import NonIdentifiableError, fit
from .model import (
    DesignError,
    EquationLayout,
    FittedTerm,
    build_design,
    cell_probability,
)
from .sim import DgpSpec, gen_biv_binary, gen_selection_binary, gen_triangular_ordinal, monte_carlo, worker_count

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE = 0, 2, 3, 4

log = logging.getLogger("bigam")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=False, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def read_csv(path):
    try:
        return pd.read_csv(path, na_values=["NA"], keep_default_na=False, encoding="utf-8")
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise CliError(f"cannot read data {path}: {exc}", EXIT_DATA) from exc


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _fit_record(cfg: ModelConfig, res):
    design = res.design
    th = res.theta
    cov = infer.posterior_cov(res)
    rec = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.resolved(),
        "coefficients": dict(zip(design.names, th.tolist())),
        "names": design.names,
        "theta": th.tolist(),
        "lambda": res.lam.tolist(),
        "penalized_terms": [f"eq{e}:{n}" for e, n in design.penalty_terms],
        "cut_points": {},
        "edf": infer.term_edf(res),
        "tr_P": res.diagnostics.tr_P,
        "loglik": res.diagnostics.loglik,
        "ubre": res.diagnostics.ubre,
        "aic": infer.information_criteria(res)["AIC"],
        "convergence": res.diagnostics.to_dict(),
        "floored_prob_count": res.diagnostics.floored_prob_count,
        "V_theta": cov.V_theta.ravel().tolist(),
        "layout": [
            {
                "index": eq.index,
                "threshold": eq.threshold,
                "n_threshold": eq.n_threshold,
                "offset": eq.offset,
                "size": eq.size,
                "sign": eq.sign,
                "terms": [t.to_dict() for t in eq.terms],
            }
            for eq in design.equations
        ],
    }
    for eq in design.equations[:2]:
        if eq.threshold == "cuts":
            rec["cut_points"][f"eq{eq.index}"] = th[eq.offset:eq.offset + eq.n_threshold].tolist()
    if cfg.kind == "triangular_ordinal":
        rec["association"] = {"psi": float(th[design.names.index("psi")]),
                              "rho": float(np.tanh(th[design.names.index("atanh_rho")]))}
    else:
        eq3 = design.equations[2]
        if eq3.threshold == "intercept" and not eq3.terms:
            rec["association"] = {"gamma": float(design.triplet.copula.gamma(th[eq3.offset]))}
        else:
            rec["association"] = {"equation": "see coefficients eq3:*"}
    return rec


def cmd_fit(config_path, data_path, out_dir):
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    df = read_csv(data_path)
    missing = [c for c in cfg.columns() if c not in df.columns]
    if missing:
        raise CliError(f"column(s) not in data: {', '.join(missing)}", EXIT_CONFIG)
    y = df[cfg.response_columns].apply(pd.to_numeric, errors="coerce").to_numpy(float)
    if cfg.kind == "selection_binary" and not np.isnan(y[:, 1]).any():
        warnings.warn("selection model fitted on data without missing outcomes; the selection map is degenerate")
    try:
        design = build_design(df, cfg.triplet(), y)
        res = fit(design, cfg.fit)
    except (DesignError, ValueError) as exc:
        raise CliError(f"data error: {exc}", EXIT_DATA) from exc
    except NonIdentifiableError as exc:
        raise CliError(str(exc), EXIT_CONVERGENCE) from exc
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "fit.json", _fit_record(cfg, res))
    for eq in design.equations:
        for t in eq.terms:
            if t.spec.kind == "smooth":
                bands = infer.smooth_bands(res, t.name, equation=eq.index)
                bands.to_csv(out / f"smooth_eq{eq.index}_{t.spec.column}.csv", index=False)
    if not res.converged:
        raise CliError("fit did not converge; outputs written with convergence flag false", EXIT_CONVERGENCE)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / replicate
# ---------------------------------------------------------------------------

def cmd_simulate(spec_path, out_dir):
    try:
        raw = json.loads(Path(spec_path).read_text())
        spec = DgpSpec.from_dict(raw)
    except OSError as exc:
        raise CliError(f"cannot read spec {spec_path}: {exc}", EXIT_CONFIG) from exc
    except (json.JSONDecodeError, ValueError, TypeError) as exc:
        raise CliError(f"invalid simulation spec: {exc}", EXIT_CONFIG) from exc
    gen = {"triangular_ordinal": gen_triangular_ordinal, "selection_binary": gen_selection_binary,
           "biv_binary_copula": gen_biv_binary}[spec.kind]
    df = gen(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    df.to_csv(out / "data.csv", index=False, na_rep="NA", float_format="%.17g")
    counts = {c: {str(k): int(v) for k, v in df[c].value_counts(dropna=False).sort_index().items()}
              for c in ("y1", "y2")}
    _write_json(out / "summary.json", {
        "schema_version": SCHEMA_VERSION,
        "spec": spec.to_dict(),
        "rows": len(df),
        "columns": list(df.columns),
        "category_counts": counts,
        "covariates": ("v1, v2 ~ U(0,1); x1, x2, x3 ~ Bernoulli(0.5) - 0.5"
                       if spec.kind == "triangular_ordinal" else "x1, x2 ~ N(0,1)"),
    })
    return EXIT_OK


def cmd_replicate_fig1(out_dir, n=2000, reps=25, seed=0, workers=None):
    spec = DgpSpec(n=n, seed=seed)
    try:
        summary = monte_carlo(spec, reps, workers=workers)
    except RuntimeError as exc:
        raise CliError(str(exc), EXIT_CONVERGENCE) from exc
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, c in summary.curves.items():
        tab = pd.DataFrame({"v": summary.grid, "truth": c["truth"], "mean_estimate": c["mean"]})
        for i, est in enumerate(c["estimates"]):
            tab[f"rep{i + 1}"] = est
        tab.to_csv(out / f"curve_{name}.csv", index=False, float_format="%.17g")
    summary.params.to_csv(out / "parameters.csv", index=False, float_format="%.17g")
    _write_json(out / "summary.json", {"schema_version": SCHEMA_VERSION, "n": n, "reps": reps, "seed": seed,
                                       **summary.to_dict()})
    return EXIT_OK


# ---------------------------------------------------------------------------
# ci
# ---------------------------------------------------------------------------

def load_fit(path):
    """Rebuild the pieces of a saved fit needed for interval computation."""
    try:
        rec = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read fit {path}: {exc}", EXIT_CONFIG) from exc
    cfg = ModelConfig.from_dict(rec["config"])
    equations = []
    for e in rec["layout"]:
        terms = [FittedTerm.from_dict(t) for t in e["terms"]]
        equations.append(EquationLayout(e["index"], e["threshold"], e["n_threshold"], terms,
                                        e["offset"], e["size"], e["sign"]))
    theta = np.asarray(rec["theta"], dtype=float)
    p = theta.size
    V = np.asarray(rec["V_theta"], dtype=float).reshape(p, p)
    template = SimpleNamespace(equations=equations)
    return SimpleNamespace(rec=rec, cfg=cfg, triplet=cfg.triplet(), theta=theta, V=V,
                           names=rec["names"], template=template)


def _functional(saved, f):
    """Vectorised map from draws ``(N, p)`` to values for one functional spec."""
    kind = f.get("type")
    names = saved.names
    if kind == "coef":
        name = f.get("coef")
        if name not in names:
            raise CliError(f"unknown coefficient {name!r}", EXIT_CONFIG)
        j = names.index(name)
        return lambda D: D[:, j]
    if kind == "smooth":
        eqi = f.get("equation")
        term = f.get("term")
        for eq in saved.template.equations:
            if eqi is not None and eq.index != eqi:
                continue
            for t in eq.terms:
                if t.spec.kind == "smooth" and term in (t.name, t.spec.column):
                    s = eq.term_slices()[t.name]
                    try:
                        b = t.columns(pd.DataFrame({t.spec.column: [float(f["at"])]}))[0]
                    except (KeyError, ValueError) as exc:
                        raise CliError(f"bad smooth evaluation point: {exc}", EXIT_CONFIG) from exc
                    return lambda D, s=s, b=b: D[:, s] @ b
        raise CliError(f"unknown smooth {term!r}", EXIT_CONFIG)
    if kind == "gamma":
        eq3 = saved.template.equations[2]
        if saved.cfg.kind == "triangular_ordinal" or eq3.threshold != "intercept" or eq3.terms:
            raise CliError("gamma needs an intercept-only association equation", EXIT_CONFIG)
        cop = saved.triplet.copula
        return lambda D: cop.gamma(D[:, eq3.offset])
    if kind in ("psi", "rho"):
        if saved.cfg.kind != "triangular_ordinal":
            raise CliError(f"{kind} is defined only for triangular_ordinal fits", EXIT_CONFIG)
        j = names.index("psi" if kind == "psi" else "atanh_rho")
        return (lambda D: D[:, j]) if kind == "psi" else (lambda D: np.tanh(D[:, j]))
    if kind == "cell_probability":
        try:
            row = pd.DataFrame({k: [v] for k, v in f["covariates"].items()})
            design = build_design(row, saved.triplet, template=saved.template)
            cell = tuple(int(c) for c in np.atleast_1d(f["cell"]))
            if saved.cfg.kind != "selection_binary":
                # response values to table positions: ordinal levels start at 1
                cell = tuple(c - (r.kind == "ordinal") for c, r in zip(cell, saved.triplet.responses))
        except (KeyError, DesignError, ValueError, TypeError) as exc:
            raise CliError(f"bad cell_probability functional: {exc}", EXIT_CONFIG) from exc
        Z0 = design.Z[0]
        probe = cell_probability(design, saved.theta)[0]
        try:
            if min(cell) < 0:
                raise IndexError
            probe[cell]
        except IndexError as exc:
            raise CliError(f"cell {f['cell']} outside the table of shape {probe.shape}", EXIT_CONFIG) from exc

        def T(D):
            P = cell_probability(design, None, t=D @ Z0.T)
            return P[(slice(None),) + cell]
        return T
    raise CliError(f"unknown functional type {kind!r}", EXIT_CONFIG)


def cmd_ci(fit_path, functional_path, n_sim=10000, alpha=0.05, seed=0, out_path=None):
    if not 0 < alpha < 1:
        raise CliError("alpha must lie in (0, 1)", EXIT_CONFIG)
    if n_sim < 100:
        raise CliError("nsim must be at least 100", EXIT_CONFIG)
    saved = load_fit(fit_path)
    try:
        spec = json.loads(Path(functional_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read functional spec: {exc}", EXIT_CONFIG) from exc
    items = spec.get("functionals", [spec]) if isinstance(spec, dict) else spec
    results = {}
    for i, f in enumerate(items):
        label = f.get("name", f"{f.get('type')}_{i}")
        T = _functional(saved, f)
        try:
            r = infer.simulate_ci(saved.theta, saved.V, T, n_sim, alpha, seed, vectorized=True)
        except ValueError as exc:
            raise CliError(f"{label}: {exc}", EXIT_DATA) from exc
        results[label] = {**r.to_dict(), "spec": f}
    rec = {"schema_version": SCHEMA_VERSION, "fit": str(fit_path), "seed": seed, "intervals": results}
    text = json.dumps(rec, indent=2, default=_json_default) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="bigam", description="Penalized bivariate models for binary and ordinal responses")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model described by a JSON config")
    f.add_argument("-c", "--config", required=True)
    f.add_argument("-d", "--data", required=True)
    f.add_argument("-o", "--out", required=True)

    s = sub.add_parser("simulate", help="generate data from a JSON generator spec")
    s.add_argument("-s", "--spec", required=True)
    s.add_argument("-o", "--out", required=True)

    r = sub.add_parser("replicate-fig1", help="Monte Carlo study of the triangular ordinal model")
    r.add_argument("-o", "--out", required=True)
    r.add_argument("--n", type=int, default=2000)
    r.add_argument("--reps", type=int, default=25)
    r.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("ci", help="simulation intervals for functionals of a saved fit")
    c.add_argument("-f", "--fit", required=True)
    c.add_argument("-t", "--functional", required=True)
    c.add_argument("--nsim", type=int, default=10000)
    c.add_argument("--alpha", type=float, default=0.05)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("-o", "--out", default=None)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        # single-threaded linear algebra keeps results independent of the machine's core count
        with threadpool_limits(1):
            if args.command == "fit":
                return cmd_fit(args.config, args.data, args.out)
            if args.command == "simulate":
                return cmd_simulate(args.spec, args.out)
            if args.command == "replicate-fig1":
                return cmd_replicate_fig1(args.out, args.n, args.reps, args.seed, worker_count())
            return cmd_ci(args.fit, args.functional, args.nsim, args.alpha, args.seed, args.out)
    except CliError as exc:
        print(f"bigam: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
