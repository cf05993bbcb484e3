import csv

import pytest

from multigroup.cli import main, read_config, read_groups, write_dataset
from multigroup.experiments import gen_spatial


@pytest.fixture
def files(tmp_path):
    write_dataset(gen_spatial(120, 0.1, 1), tmp_path / "d.csv")
    (tmp_path / "g.txt").write_text("id,lo,hi\n0,0,1\n1,0,0.5\n2,0.5,1\n3,0.1,0.2\n")
    return tmp_path


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_fit_shaky(files, capsys):
    out = files / "fit"
    code = main(["fit", "--method", "shaky", "--lambda", "0.2", "--sigma", "0.01", "--seed", "7",
                 "--data", str(files / "d.csv"), "--groups", str(files / "g.txt"), "--out", str(out)])
    assert code == 0
    trace = rows(out / "trace.csv")
    assert trace and trace[-1]["group"] == ""
    assert sum(r["group"] != "" for r in trace) == len(trace) - 1
    assert "status" in (out / "certificate.txt").read_text()
    assert (out / "manifest.txt").exists()


def test_fit_sigma_zero_matches_skeleton(files):
    a, b = files / "a", files / "b"
    base = ["fit", "--method", "shaky", "--lambda", "0.01", "--sigma", "0", "--data",
            str(files / "d.csv"), "--groups", str(files / "g.txt")]
    assert main(base + ["--seed", "1", "--out", str(a)]) == 0
    assert main(base + ["--seed", "2", "--out", str(b)]) == 0
    assert (a / "trace.csv").read_text() == (b / "trace.csv").read_text()
    assert all(float(r["threshold_noise"]) == 0 for r in rows(a / "trace.csv"))


def test_fit_missing_lambda(files, capsys):
    assert main(["fit", "--method", "shaky", "--data", str(files / "d.csv")]) == 2
    assert "lambda" in capsys.readouterr().err


def test_fit_bad_file(files, capsys):
    assert main(["fit", "--method", "prepend", "--lambda", "0.1", "--data", str(files / "nope.csv"),
                 "--out", str(files / "x")]) != 0
    assert "error" in capsys.readouterr().err


def test_manifest_rerun(files):
    out1, out2 = files / "r1", files / "r2"
    assert main(["fit", "--method", "group_prepend", "--lambda", "0.005", "--data",
                 str(files / "d.csv"), "--groups", str(files / "g.txt"), "--out", str(out1)]) == 0
    cfg = read_config(out1 / "manifest.txt")
    assert cfg["method"] == "group_prepend" and cfg["lam"] == "0.005"
    assert main(["fit", "--config", str(out1 / "manifest.txt"), "--out", str(out2)]) == 0
    for name in ("trace.csv", "predictor.txt", "certificate.txt"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_config_unknown_key(files, capsys):
    (files / "c.txt").write_text("bogus=1\n")
    assert main(["bounds", "--config", str(files / "c.txt")]) == 2


def test_experiment_minimal(files):
    out = files / "exp"
    assert main(["experiment", "spatial", "--runs", "1", "--methods", "prepend", "--n-test", "300",
                 "--out", str(out)]) == 0
    r = rows(out / "results.csv")
    assert len(r) == 1
    assert list(r[0]) == ["run_id", "method", "seed", "n", "lambda", "sigma", "eta", "criterion",
                          "total_loss", "worst_group_loss", "worst_group_id", "num_updates", "wall_ms"]
    assert (out / "total_loss.svg").exists() and (out / "worst_group_loss.svg").exists()


def test_experiment_plot_fit_reproducible(files):
    a, b = files / "e1", files / "e2"
    args = ["experiment", "spatial", "--noise", "0.1", "--runs", "2", "--methods",
            "group_prepend,sleeping_expert", "--n-test", "300", "--plot-fit"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(["experiment", "--config", str(a / "manifest.txt"), "--out", str(b)]) == 0
    for name in ("fit.svg", "total_loss.svg", "aggregates.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    strip = lambda p: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows(p)]
    assert strip(a / "results.csv") == strip(b / "results.csv")


def test_experiment_unknown_scenario(capsys):
    assert main(["experiment", "nope"]) == 2


def test_bounds(files, capsys):
    assert main(["bounds", "--n", "1000", "--groups", "10", "--hyps", "10", "--beta", "0.05",
                 "--out", str(files / "b")]) == 0
    out = capsys.readouterr().out
    assert "shaky epsilon" in out and "0.133888" in out
    assert "group_prepend lambda" in out and "0.213123" in out


def test_tune_worst_group(files, capsys):
    out = files / "t"
    assert main(["tune", "--method", "prepend", "--criterion", "worst_group_loss",
                 "--lambdas", "0.5,0.01,0.002", "--out", str(out)]) == 0
    table = rows(out / "tune.csv")
    wg = [float(r["worst_group_loss"]) for r in table]
    assert f"'lam': {[0.5, 0.01, 0.002][wg.index(min(wg))]}" in capsys.readouterr().out


def test_tune_files_need_val(files):
    assert main(["tune", "--method", "prepend", "--data", str(files / "d.csv")]) == 2


def test_dp_audit(files, capsys):
    out = files / "a"
    assert main(["dp-audit", "--n", "8", "--trials", "2000", "--identical", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "ln_ratio" in text and "envelope" in text
    assert rows(out / "audit.csv")


def test_read_groups_rejects_gaps(tmp_path):
    (tmp_path / "g.txt").write_text("0,0,1\n2,0,1\n")
    with pytest.raises(ValueError):
        read_groups(tmp_path / "g.txt")
