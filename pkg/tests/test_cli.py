import json

import pytest

from bigam.cli import main

TRI_CONFIG = {
    "schema_version": 1,
    "kind": "triangular_ordinal",
    "copula": "gaussian",
    "responses": [{"column": "y1", "type": "ordinal", "levels": 5}, {"column": "y2", "type": "ordinal", "levels": 6}],
    "equations": [
        [{"type": "linear", "column": "x1"}, {"type": "smooth", "column": "v2", "basis_dim": 6}],
        [{"type": "linear", "column": "x2"}],
    ],
    "fit": {"max_outer": 15},
}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = write(root / "dgp.json", {"n": 500, "seed": 3})
    assert main(["simulate", "-s", spec, "-o", str(root / "sim")]) == 0
    cfg = write(root / "cfg.json", TRI_CONFIG)
    assert main(["fit", "-c", cfg, "-d", str(root / "sim" / "data.csv"), "-o", str(root / "fit")]) == 0
    return root


def test_simulate_outputs(fitted):
    summary = json.loads((fitted / "sim" / "summary.json").read_text())
    assert summary["rows"] == 500
    assert summary["spec"]["seed"] == 3
    assert "Bernoulli" in summary["covariates"]


def test_fit_outputs(fitted):
    rec = json.loads((fitted / "fit" / "fit.json").read_text())
    assert rec["convergence"]["converged"]
    p = len(rec["theta"])
    assert len(rec["V_theta"]) == p * p
    assert set(rec["association"]) >= {"psi", "rho"}
    assert (fitted / "fit" / "smooth_eq1_v2.csv").exists()


def test_ci_functionals(fitted, tmp_path, capsys):
    fn = write(tmp_path / "fn.json", {"functionals": [
        {"name": "b", "type": "coef", "coef": "eq1:x1"},
        {"type": "psi"},
        {"type": "rho"},
        {"name": "s", "type": "smooth", "term": "v2", "at": 0.5},
        {"name": "p", "type": "cell_probability", "cell": [1, 1],
         "covariates": {"x1": 0.5, "x2": -0.5, "v2": 0.3}},
    ]})
    out = tmp_path / "ci.json"
    assert main(["ci", "-f", str(fitted / "fit" / "fit.json"), "-t", fn, "--nsim", "500", "-o", str(out)]) == 0
    res = json.loads(out.read_text())["intervals"]
    assert set(res) == {"b", "psi_1", "rho_2", "s", "p"}
    for r in res.values():
        assert r["lower"] <= r["upper"]
    assert 0 <= res["p"]["lower"] <= res["p"]["upper"] <= 1
    assert -1 < res["rho_2"]["lower"] <= res["rho_2"]["upper"] < 1
    # stdout variant prints the same record
    assert main(["ci", "-f", str(fitted / "fit" / "fit.json"), "-t", fn, "--nsim", "500"]) == 0
    assert json.loads(capsys.readouterr().out)["intervals"] == res


def test_rerun_is_bit_identical(fitted, tmp_path):
    cfg = write(tmp_path / "cfg.json", TRI_CONFIG)
    data = str(fitted / "sim" / "data.csv")
    assert main(["fit", "-c", cfg, "-d", data, "-o", str(tmp_path / "again")]) == 0
    a = json.loads((fitted / "fit" / "fit.json").read_text())
    b = json.loads((tmp_path / "again" / "fit.json").read_text())
    assert a["theta"] == b["theta"] and a["V_theta"] == b["V_theta"]
    spec = write(tmp_path / "dgp.json", {"n": 500, "seed": 3})
    assert main(["simulate", "-s", spec, "-o", str(tmp_path / "sim")]) == 0
    assert (tmp_path / "sim" / "data.csv").read_bytes() == (fitted / "sim" / "data.csv").read_bytes()


def test_missing_column_exits_2(fitted, tmp_path, capsys):
    cfg = dict(TRI_CONFIG, equations=[[{"type": "linear", "column": "income"}], []])
    code = main(["fit", "-c", write(tmp_path / "c.json", cfg), "-d", str(fitted / "sim" / "data.csv"),
                 "-o", str(tmp_path / "o")])
    assert code == 2
    assert "income" in capsys.readouterr().err


def test_bad_config_exits_2(fitted, tmp_path):
    cfg = dict(TRI_CONFIG, kind="multinomial")
    code = main(["fit", "-c", write(tmp_path / "c.json", cfg), "-d", str(fitted / "sim" / "data.csv"),
                 "-o", str(tmp_path / "o")])
    assert code == 2


@pytest.mark.parametrize("args,functional", [
    (["--alpha", "1"], {"type": "psi"}),
    (["--nsim", "10"], {"type": "psi"}),
    ([], {"type": "quantile"}),
    ([], {"type": "coef", "coef": "eq9:nothing"}),
    ([], {"type": "gamma"}),
    ([], {"type": "cell_probability", "cell": [9, 9], "covariates": {"x1": 0, "x2": 0, "v2": 0.5}}),
])
def test_ci_errors_exit_2(fitted, tmp_path, args, functional):
    fn = write(tmp_path / "fn.json", functional)
    assert main(["ci", "-f", str(fitted / "fit" / "fit.json"), "-t", fn, *args]) == 2


def test_selection_without_missing_outcomes_warns(tmp_path):
    spec = write(tmp_path / "dgp.json", {"n": 300, "seed": 1, "kind": "biv_binary_copula", "gamma": 0.3})
    assert main(["simulate", "-s", spec, "-o", str(tmp_path / "sim")]) == 0
    cfg = write(tmp_path / "cfg.json", {
        "kind": "selection_binary",
        "responses": [{"column": "y1"}, {"column": "y2"}],
        "equations": [[{"type": "linear", "column": "x1"}, {"type": "linear", "column": "x2"}],
                      [{"type": "linear", "column": "x1"}]],
    })
    with pytest.warns(UserWarning, match="selection"):
        main(["fit", "-c", cfg, "-d", str(tmp_path / "sim" / "data.csv"), "-o", str(tmp_path / "fit")])
