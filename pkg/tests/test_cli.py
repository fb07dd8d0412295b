import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from uqstp import cli
from uqstp.metrics import METRIC_NAMES

TINY = {"model": {"mdgcn_hidden": 4, "embed_dim": 4, "itcn_channels": 2, "head_hidden": 4},
        "train": {"batch_size": 32, "t": 6}}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["generate", "--regions", "4", "--variables", "2", "--length", "120",
                     "--cross-corr", "0.6", "--seed", "7", "--out", str(d / "data")]) == 0
    (d / "cfg.json").write_text(json.dumps(TINY))
    return d


def data_flags(d):
    return ["--data", d / "data" / "data.csv", "--meta", d / "data" / "meta.json"]


def test_generate_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, _, _ = run(capsys, "generate", "--regions", 5, "--variables", 3, "--length", 60,
                         "--seed", 7, "--out", tmp_path / name)
        assert code == 0
    for f in ("data.csv", "meta.json", "truth.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_generate_bad_correlation(tmp_path, capsys):
    code, _, err = run(capsys, "generate", "--cross-corr", 1.5, "--out", tmp_path)
    assert code == 2 and "correlation must be in [-1,1]" in err


def test_graph_inspect(workdir, capsys):
    code, out, _ = run(capsys, "graph", "inspect", "--graph", workdir / "data" / "meta.json", "--max-k", 3)
    lines = out.splitlines()
    assert code == 0 and lines[0] == "regions,4" and lines[3] == "K,truncation_mass"
    masses = [float(l.split(",")[1]) for l in lines[4:]]
    assert len(masses) == 4 and masses == sorted(masses)


def test_train_evaluate_predict(workdir, capsys):
    ck, hist = workdir / "m.ckpt", workdir / "h.csv"
    code, out, _ = run(capsys, "train", *data_flags(workdir), "--config", workdir / "cfg.json",
                       "--max-epochs", 2, "--checkpoint", ck, "--history", hist)
    assert code == 0 and ck.exists() and "best val loss" in out
    assert len(hist.read_text().splitlines()) == 3

    code, out, _ = run(capsys, "evaluate", *data_flags(workdir), "--checkpoint", ck, "--selective")
    rep = json.loads(out)
    assert code == 0 and set(rep["overall"]) == set(METRIC_NAMES)
    assert set(rep["per_variable"]) == {"var0", "var1"}
    assert len(rep["selective"]) == 10 and np.isclose(rep["selective"][-1][1], rep["overall"]["mae"])

    code, again, _ = run(capsys, "evaluate", *data_flags(workdir), "--checkpoint", ck, "--selective")
    assert again == out

    code, out, _ = run(capsys, "predict", *data_flags(workdir), "--checkpoint", ck)
    pred = json.loads(out)
    assert code == 0 and pred["kind"] == "gaussian"
    assert np.asarray(pred["mu"]).shape[1:] == (1, 4, 2) and np.asarray(pred["sigma_lower"]).shape[-1] == 3


def test_train_zero_epochs_and_no_mpp(workdir, capsys):
    code, _, _ = run(capsys, "train", *data_flags(workdir), "--config", workdir / "cfg.json",
                     "--max-epochs", 0, "--checkpoint", workdir / "z.ckpt", "--history", workdir / "z.csv")
    assert code == 0 and len((workdir / "z.csv").read_text().splitlines()) == 1
    code, _, _ = run(capsys, "train", *data_flags(workdir), "--config", workdir / "cfg.json", "--variant",
                     "no-mpp", "--max-epochs", 1, "--checkpoint", workdir / "d.ckpt", "--history", workdir / "d.csv")
    row = list(csv.DictReader(open(workdir / "d.csv")))[0]
    assert code == 0 and 0 < float(row["train_loss"]) < 1  # MAE on the [0, 1] scale


def test_train_reproducible(workdir, capsys):
    paths = []
    for name in ("r1", "r2"):
        p = workdir / f"{name}.ckpt"
        run(capsys, "train", *data_flags(workdir), "--config", workdir / "cfg.json", "--max-epochs", 1,
            "--seed", 5, "--checkpoint", p)
        paths.append(p.read_bytes())
    assert paths[0] == paths[1]


def test_variable_mismatch_exit_2(workdir, tmp_path, capsys):
    run(capsys, "generate", "--regions", 4, "--variables", 3, "--length", 120, "--seed", 7, "--out", tmp_path)
    run(capsys, "train", *data_flags(workdir), "--config", workdir / "cfg.json", "--max-epochs", 0,
        "--checkpoint", workdir / "v.ckpt")
    code, _, err = run(capsys, "evaluate", "--data", tmp_path / "data.csv", "--meta", tmp_path / "meta.json",
                       "--checkpoint", workdir / "v.ckpt")
    assert code == 2 and "variables" in err


def test_unknown_config_key(workdir, tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"model": {"depth": 3}}))
    code, _, err = run(capsys, "train", *data_flags(workdir), "--config", tmp_path / "bad.json",
                       "--checkpoint", tmp_path / "x.ckpt")
    assert code == 2 and "depth" in err


def test_ablate_rows(workdir, capsys):
    out = workdir / "ablate.csv"
    code, _, _ = run(capsys, "ablate", *data_flags(workdir), "--config", workdir / "cfg.json",
                     "--max-epochs", 1, "--out", out)
    rows = list(csv.reader(open(out)))
    assert code == 0 and rows[0] == ["variant", *METRIC_NAMES]
    assert [r[0] for r in rows[1:]] == ["full", "no-mdgcn", "no-itcn", "no-mpp", "indep-univariate"]


def test_gradcheck_injected_fault(capsys):
    code, out, err = run(capsys, "gradcheck", "--instances", 1, "--inject-fault", "exp")
    rows = list(csv.reader(io.StringIO(out)))
    assert code == 1 and "exp" in err
    assert rows[0] == ["op", "max_rel_err", "status"]
    assert dict((r[0], r[2]) for r in rows[1:])["exp"] == "FAIL"


def test_help_documents_defaults():
    proc = subprocess.run([sys.executable, "-m", "uqstp", "train", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for flag in ("--batch-size", "--lr", "--patience", "--t", "--v-min"):
        assert flag in proc.stdout
    assert "default 64" in proc.stdout and "default 1e-3" in proc.stdout


def test_bad_flag_exit_2():
    proc = subprocess.run([sys.executable, "-m", "uqstp", "train", "--variant", "nope"], capture_output=True)
    assert proc.returncode == 2
