import json

import numpy as np
import pytest

from uniql.artifact import (
    artifact_to_model,
    load,
    model_to_artifact,
    random_calibration,
    save_calibration,
)
from uniql.cli import cli_main
from uniql.model import build_toy_model


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    model = build_toy_model(("attn", "mlp", "mamba"), vocab_size=128, seed=8)
    model_to_artifact(model).save(root / "model.uq")
    save_calibration(random_calibration(128, 6, 24, seed=5), root / "calib.json")
    return root


def test_compress_prune_eval_roundtrip(workspace, capsys):
    root = workspace
    rc = cli_main(["compress", "--model", str(root / "model.uq"),
                   "--calib", str(root / "calib.json"), "--rates", "15,25,35",
                   "--bits", "4", "--group", "128", "--epsilon", "0.1",
                   "--lambda", "1.0", "--out", str(root / "art.uq")])
    assert rc == 0
    rc = cli_main(["compress", "--model", str(root / "model.uq"),
                   "--calib", str(root / "calib.json"), "--bits", "32",
                   "--out", str(root / "ref.uq")])
    assert rc == 0
    rc = cli_main(["prune", "--artifact", str(root / "art.uq"),
                   "--rate", "25", "--out", str(root / "art25.uq")])
    assert rc == 0
    capsys.readouterr()
    rc = cli_main(["eval", "--model", str(root / "art25.uq"),
                   "--reference", str(root / "ref.uq"),
                   "--data", str(root / "calib.json")])
    assert rc == 0
    metrics = json.loads(capsys.readouterr().out)
    assert set(metrics) == {"logit_mse", "logit_kl", "artifact_bytes"}
    assert np.isfinite(metrics["logit_mse"]) and metrics["logit_mse"] > 0


def test_inspect_prints_manifest(workspace, capsys):
    rc = cli_main(["inspect", "--artifact", str(workspace / "art.uq")])
    assert rc == 0
    manifest = json.loads(capsys.readouterr().out)
    assert len(manifest["layers"]) == 3
    assert [e["rate"] for e in manifest["pruning_plan"]["rates"]] == [0.15, 0.25, 0.35]


def test_unsupported_rate_exits_2(workspace, capsys):
    rc = cli_main(["prune", "--artifact", str(workspace / "art.uq"),
                   "--rate", "99", "--out", str(workspace / "nope.uq")])
    assert rc == 2


def test_unknown_flag_exits_1(capsys):
    assert cli_main(["prune", "--bogus"]) == 1


def test_missing_file_exits_2(workspace, capsys):
    rc = cli_main(["inspect", "--artifact", str(workspace / "missing.uq")])
    assert rc == 2


def test_seed_env_override(workspace, monkeypatch):
    root = workspace
    args = ["compress", "--model", str(root / "model.uq"),
            "--calib", str(root / "calib.json"), "--seed", "3"]
    monkeypatch.setenv("UNIQL_SEED", "42")
    assert cli_main(args + ["--out", str(root / "a.uq")]) == 0
    monkeypatch.delenv("UNIQL_SEED")
    assert cli_main(args + ["--out", str(root / "b.uq")]) == 0
    a = load(root / "a.uq")
    b = load(root / "b.uq")
    assert a.manifest["seed"] == 42 and b.manifest["seed"] == 3


def test_pruned_artifact_loads_and_runs(workspace, rng):
    from uniql.model import model_forward
    model = artifact_to_model(load(workspace / "art25.uq"))
    logits, _ = model_forward(model, rng.integers(0, 128, 10))
    assert np.all(np.isfinite(logits))
