import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from riskrank import cli
from riskrank.errors import NumericError

SMALL = "d_k = 8\nff_width = 16\nn_self_layers = 1\nn_cross_layers = 1\npretrain_epochs = 1\nfinetune_epochs = 2\nlr = 0.001\n"


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "d"
    assert run("synth", "--n", 2000, "--seed", 7, "--out", out) == 0
    assert run("split", "--seed", 7, "--out", out) == 0
    assert run("group", "--size", 50, "--seed", 7, "--out", out, "--exhaustive-test-groups") == 0
    return out


def test_train_groups_hold_one_positive(dataset_dir):
    train = pd.read_csv(dataset_dir / "train.csv", comment="#")
    lines = [l for l in (dataset_dir / "groups_train.jsonl").read_text().splitlines() if not l.startswith("#")]
    assert lines
    for line in lines:
        members = json.loads(line)["members"]
        assert train["label"].to_numpy()[members].sum() == 1


def test_gradcheck_subcommand(capsys):
    assert run("gradcheck", "--seed", 1) == 0
    value = float(capsys.readouterr().out.split()[-1])
    assert value < 1e-4


def test_eval_on_oracle_scores(dataset_dir, tmp_path, capsys):
    test = pd.read_csv(dataset_dir / "test.csv", comment="#")
    scores = tmp_path / "oracle.csv"
    pd.DataFrame({"row": np.arange(len(test)), "score": test["return"]}).to_csv(scores, index=False)
    out = tmp_path / "e"
    for name in ("test.csv", "schema.json", "groups_test.jsonl"):
        (out / name).parent.mkdir(exist_ok=True)
        (out / name).write_bytes((dataset_dir / name).read_bytes())
    assert run("eval", "--with-prior", "--scores", scores, "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["f1"] == 1.0
    assert report["tp"] == math.ceil(0.01 * len(test))
    assert "F1 (macro)   1.0000" in capsys.readouterr().out


def _pipeline(root: Path):
    (root).mkdir(parents=True)
    cfg = root / "run.cfg"
    cfg.write_text("# small settings\n" + SMALL + "exhaustive_test_groups = true\n")
    steps = [
        ("synth", "--n", 300),
        ("split",),
        ("group", "--group-size", 20),
        ("pretrain",),
        ("train", "--loss", "pa-bce"),
        ("rank",),
        ("rank", "--split", "valid"),
        ("eval", "--with-prior"),
        ("twostep",),
    ]
    for step in steps:
        assert run(*step, "--config", cfg, "--seed", 3, "--out", root / "d") == 0, step
    return root / "d"


def test_reruns_are_byte_identical_and_stamped(tmp_path, capsys):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir())
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    manifest = json.loads((a / "manifest.json").read_text())["artifacts"]
    assert set(manifest) == set(files) - {"manifest.json"}
    for name, entry in manifest.items():
        assert entry["seed"] == 3 and len(entry["config_hash"]) == 16
        if name.endswith((".csv", ".jsonl", ".txt")):
            assert (a / name).read_text().startswith("# seed=3 config_hash=")
        elif name.endswith(".json"):
            body = json.loads((a / name).read_text())
            assert body["seed"] == 3 and body["config_hash"]
    scores = pd.read_csv(a / "scores_test.csv", comment="#")
    assert list(scores.columns) == ["row", "account_id", "period", "group_id", "score"]


def test_without_prior_regime(tmp_path, capsys):
    d = _pipeline(tmp_path / "w")
    assert run("eval", "--without-prior", "--config", tmp_path / "w" / "run.cfg", "--seed", 3, "--out", d) == 0
    report = json.loads((d / "report.json").read_text())
    assert report["regime"] == "without-prior" and report["threshold"] in [round(0.1 * i, 1) for i in range(1, 10)]


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("seed = 11\nn = 150\n")
    assert run("synth", "--config", cfg, "--seed", 4, "--out", tmp_path / "d") == 0
    schema = json.loads((tmp_path / "d" / "schema.json").read_text())
    assert schema["seed"] == 4
    assert len(pd.read_csv(tmp_path / "d" / "records.csv", comment="#")) == 150 * 5


@pytest.mark.parametrize(
    "args, code",
    [
        (["frobnicate"], 2),
        (["synth", "--bogus"], 2),
        (["train", "--loss", "hinge"], 2),
        (["eval", "--out", "/nonexistent/dir"], 3),
        (["synth", "--n", "10", "--out", "{tmp}"], 2),
    ],
)
def test_error_exit_codes(args, code, tmp_path, capsys):
    args = [a.replace("{tmp}", str(tmp_path)) for a in args]
    assert run(*args) == code
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith("error: ")


def test_malformed_and_unknown_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("this line has no delimiter\n")
    assert run("synth", "--config", bad) == 2
    bad.write_text("flux_capacitor = 3\n")
    assert run("synth", "--config", bad) == 2
    bad.write_text("n = many\n")
    assert run("synth", "--config", bad) == 2
    assert "'n'" in capsys.readouterr().err


def test_numeric_failure_maps_to_exit_four(monkeypatch, capsys):
    def boom(ws):
        raise NumericError("non-finite value produced by\nlog")

    monkeypatch.setitem(cli.COMMANDS, "gradcheck", boom)
    assert run("gradcheck") == 4
    assert capsys.readouterr().err == "error: NumericError: non-finite value produced by log\n"
