import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from frailtyz import gof, plots
from frailtyz import residuals as res
from frailtyz.cli import main
from frailtyz.data import load_csv, save_csv
from frailtyz.frailty import Covariate, FrailtyFit, fit_ppl
from frailtyz.simulation import MODELS


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def spec(tmp_path, kind, **kw):
    return plots.PlotSpec(kind, tmp_path / f"{kind}.svg", tmp_path / f"{kind}.csv", **kw)


def check_svg(path):
    root = ET.parse(path).getroot()
    assert root.get("width") == "640" and root.get("height") == "480"
    assert "http" not in path.read_text().replace("http://www.w3.org/2000/svg", "")


def test_qq_three_values(tmp_path):
    s = spec(tmp_path, "qq")
    plots.render_qq(s, [1.0, -1.0, 0.0])
    rows = read_csv(s.csv_path)
    assert rows[0] == ["theoretical", "sample"]
    assert [float(r[1]) for r in rows[1:]] == [-1.0, 0.0, 1.0]
    assert float(rows[2][0]) == 0.0
    check_svg(s.svg_path)


def test_chf45_passthrough(tmp_path):
    s = spec(tmp_path, "chf45")
    chf = gof.km_chf([1.0, 2.0, 3.0])
    plots.render_chf45(s, chf)
    rows = [(float(a), float(b)) for a, b in read_csv(s.csv_path)[1:]]
    assert rows == chf.pairs()
    check_svg(s.svg_path)


def test_grouped_box_counts(tmp_path, true_fit, sim_data):
    z = res.z_residual(true_fit, sim_data, 1)
    s = spec(tmp_path, "grouped_box", k=10)
    plots.render_grouped_box(s, z.linear_predictors, z.values)
    rows = read_csv(s.csv_path)[1:]
    assert len(rows) <= 10
    assert sum(int(r[3]) for r in rows) == len(sim_data)
    check_svg(s.svg_path)


def test_scatter_lowess(tmp_path, true_fit, sim_data):
    z = res.z_residual(true_fit, sim_data, 1)
    s = spec(tmp_path, "scatter_lowess")
    plots.render_scatter_lowess(s, z.linear_predictors, z.values)
    rows = np.array(read_csv(s.csv_path)[1:], dtype=float)
    assert rows.shape == (len(sim_data), 3)
    assert np.all(np.diff(rows[:, 0]) >= 0)
    check_svg(s.svg_path)


def test_pvalue_hist(tmp_path):
    s = spec(tmp_path, "pvalue_hist")
    p = np.random.default_rng(0).uniform(size=100)
    plots.render_pvalue_hist(s, p, gof.pmin(p))
    rows = read_csv(s.csv_path)[1:]
    assert sum(int(r[2]) for r in rows) == 100
    assert float(rows[0][3]) == gof.pmin(p)
    check_svg(s.svg_path)


def test_unknown_kind(tmp_path):
    with pytest.raises(ValueError):
        spec(tmp_path, "pie")


def test_unwritable_path(tmp_path):
    s = plots.PlotSpec("qq", tmp_path / "no" / "x.svg", tmp_path / "no" / "x.csv")
    with pytest.raises(OSError):
        plots.render_qq(s, [0.0, 1.0, 2.0])


# ---------------------------------------------------------------------------
# CLI


@pytest.fixture()
def cli_files(tmp_path, sim_data):
    data = tmp_path / "d.csv"
    save_csv(sim_data, data)
    fit = tmp_path / "fit.json"
    rc = main(["fit", "--data", str(data), "--time", "time", "--status", "status",
               "--cluster", "cluster", "--covariate", "x1", "--covariate", "x2",
               "--covariate", "x3", "--out", str(fit)])
    assert rc == 0
    return data, fit


def test_fit_json_shape(cli_files):
    d = json.loads(cli_files[1].read_text())
    assert len(d["coefficients"]) == 3 and d["theta"] > 0
    assert d["schema"]["cluster"] == "cluster"


def test_test_replicates_shape(tmp_path, cli_files):
    data, fit = cli_files
    out = tmp_path / "t.json"
    rc = main(["test", "--fit", str(fit), "--data", str(data), "--method", "z-aov-lp",
               "--seed", "1", "--replicates", "1000", "--out", str(out)])
    assert rc == 0
    d = json.loads(out.read_text())
    assert len(d["p_values"]) == 1000 and 0 <= d["p_min"] <= 1


def test_seed_required(tmp_path, cli_files):
    data, fit = cli_files
    rc = main(["residuals", "--fit", str(fit), "--data", str(data), "--kind", "z",
               "--out", str(tmp_path / "r.csv")])
    assert rc == 2


def test_validation_exit_code(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,status,cluster,x1\n0,1,a,1\n")
    rc = main(["fit", "--data", str(bad), "--time", "time", "--status", "status",
               "--cluster", "cluster", "--covariate", "x1", "--out", str(tmp_path / "f.json")])
    assert rc == 2
    assert main(["fit"]) == 2


def test_nonconvergence_exit_code(tmp_path, cli_files, monkeypatch):
    from frailtyz import cli, frailty
    data, _ = cli_files
    real = frailty.fit_ppl
    monkeypatch.setattr(cli, "fit_ppl",
                        lambda ds, sp: real(ds, sp, frailty.FitControl(max_inner=1)))
    rc = main(["fit", "--data", str(data), "--time", "time", "--status", "status",
               "--cluster", "cluster", "--covariate", "x1", "--out", str(tmp_path / "f.json")])
    assert rc == 3
    assert not json.loads((tmp_path / "f.json").read_text())["converged"]


def test_residuals_deterministic(tmp_path, cli_files):
    data, fit = cli_files
    outs = []
    for name in ("a.csv", "b.csv"):
        assert main(["residuals", "--fit", str(fit), "--data", str(data), "--kind", "z",
                     "--seed", "77", "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]


@pytest.mark.parametrize("kind", plots.PLOT_KINDS)
def test_plot_commands(tmp_path, cli_files, kind):
    data, fit = cli_files
    args = ["plot", "--kind", kind, "--fit", str(fit), "--data", str(data), "--x", "x2:log",
            "--seed", "3", "--svg", str(tmp_path / "p.svg"), "--csv", str(tmp_path / "p.csv")]
    if kind == "pvalue_hist":
        args += ["--method", "z-sw", "--replicates", "20"]
    assert main(args) == 0
    check_svg(tmp_path / "p.svg")


def test_end_to_end_matches_library(tmp_path):
    cfg = tmp_path / "grid.json"
    cfg.write_text(json.dumps({"cluster_sizes": [40], "censor_targets": [0.5], "n_replicates": 1,
                               "models": ["wrong"], "save_datasets": 1, "seed": 12}))
    assert main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "sim")]) == 0
    data = tmp_path / "sim" / "datasets" / "cell0_rep0.csv"
    fit_json = tmp_path / "w.json"
    assert main(["fit", "--data", str(data), "--time", "time", "--status", "status",
                 "--cluster", "cluster", "--covariate", "x1", "--covariate", "x2",
                 "--covariate", "x3", "--out", str(fit_json)]) == 0
    out = tmp_path / "t.json"
    assert main(["test", "--fit", str(fit_json), "--data", str(data), "--method", "z-aov-cov",
                 "--cov", "x2:log", "--seed", "99", "--out", str(out)]) == 0
    cli_p = json.loads(out.read_text())["p_value"]

    ds = load_csv(data)
    fit = fit_ppl(ds, MODELS["wrong"])
    lib = gof.run_test("Z-AOV-COV", fit, ds, seed=99, covariate=Covariate.parse("x2:log"))
    assert cli_p == lib.p_value
    back = FrailtyFit.from_dict(json.loads(fit_json.read_text()))
    np.testing.assert_array_equal(back.beta, fit.beta)
