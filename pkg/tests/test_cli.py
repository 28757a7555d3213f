import csv
import json
import shutil

import numpy as np
import pytest

from recondetect import persist
from recondetect.cli import ExperimentConfig, build_parser, load_config, main

GENS = [{"id": f"G{i}", "kind": "analytic-shifted", "offset": o, "var_scale": v}
        for i, (o, v) in enumerate([(0.1, 1.0), (0.0, 1.6), (0.08, 1.2), (-0.1, 1.0)], 1)]
TINY = {
    "world": {"dim": 8, "latent": 3, "components": 2, "ae_hidden": 16, "ae_iters": 300, "n_per_class": 40,
              "generators": GENS, "detector": {"steps": 5}, "classifier": {"epochs": 10}},
    "attack": {"epsilon": 0.031, "steps": 5, "variant": "APGD"},
    "eval_per_class": 5,
    "transfer": {"per_class": 3},
    "purify": {"ratios": [0.01, 0.02, 0.03, 0.05, 0.1], "per_class": 3, "kinds": ["DIRE"],
               "attack": {"epsilon": 0.031, "steps": 3, "variant": "PGD", "grad_mode": "adjoint"}},
    "advtrain": {"generators": ["G1"], "per_class": 3, "val_per_class": 3, "epochs": 2},
    "rho": {"per_class": 3, "steps": 3},
    "collapse": {"n": 50},
}
PIPELINE = ["gen-data", "train-ae", "train-detector", "attack", "transfer", "purify", "advtrain",
            "analyze-rho", "collapse"]


def run(cmd, ws, cfg, *extra):
    return main([cmd, "--config", str(cfg), "--out", str(ws), *extra])


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture(scope="module")
def workspace(tiny_cfg, tmp_path_factory):
    ws = tmp_path_factory.mktemp("ws")
    codes = {cmd: run(cmd, ws, tiny_cfg) for cmd in PIPELINE}
    return ws, codes


def rows(ws, name):
    h, r = persist.read_csv(ws / "results" / f"{name}.csv")
    return r


def test_pipeline_exit_codes(workspace):
    _, codes = workspace
    assert codes == {cmd: 0 for cmd in PIPELINE}


def test_every_table_carries_config_hash(workspace):
    ws, _ = workspace
    want = persist.config_hash(json.loads((ws / "config.json").read_text()))
    tables = sorted((ws / "results").glob("*.csv"))
    assert len(tables) >= 9
    assert all(persist.read_csv(p)[0] == want for p in tables)


def test_transfer_long_format_shape(workspace):
    ws, _ = workspace
    r = rows(ws, "transfer")
    assert len(r) == 12 * 12
    assert {x["regime"] for x in r} == {"white-box", "cross-generator", "cross-method", "cross-both"}
    assert sum(x["regime"] == "white-box" for x in r) == 12


def test_purify_row_per_ratio(workspace):
    ws, _ = workspace
    r = [x for x in rows(ws, "purify") if x["generator"] == "G2" and x["input"] == "adversarial"]
    assert [float(x["ratio"]) for x in r] == [0.01, 0.02, 0.03, 0.05, 0.1]


def test_collapse_fractions(workspace):
    ws, _ = workspace
    r = rows(ws, "collapse")
    assert len(r) == 12 and all(0.0 <= float(x["fraction_real"]) <= 1.0 for x in r)


def test_verify_passes_on_fresh_workspace(workspace, tiny_cfg, capsys):
    ws, _ = workspace
    assert run("verify", ws, tiny_cfg) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "adversarial set adv/whitebox" in out


def test_verify_flags_corrupted_checkpoint(workspace, tiny_cfg, tmp_path, capsys):
    ws, _ = workspace
    copy = tmp_path / "ws"
    shutil.copytree(ws, copy)
    p = copy / "autoencoders" / "G2.json"
    p.write_text(p.read_text().replace("0.", "0.9", 1))
    assert run("verify", copy, tiny_cfg) == 3
    out = capsys.readouterr().out
    assert "[FAIL] autoencoder: checkpoint autoencoders/G2.json" in out


def test_verify_empty_workspace_runs_oracles_only(tmp_path, capsys):
    assert main(["verify", "--out", str(tmp_path / "nothing")]) == 0
    out = capsys.readouterr().out
    modules = {line.split("]")[1].split(":")[0].strip() for line in out.splitlines() if line.startswith("[")}
    assert modules == {"adjoint-grad", "score-models", "sde-core"}
    assert not (tmp_path / "nothing").exists()


def test_gen_data_deterministic(tiny_cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("gen-data", a, tiny_cfg) == 0 and run("gen-data", b, tiny_cfg) == 0
    for name in ("G1.npz", "G3.npz", "real.npz"):
        with np.load(a / "data" / name) as fa, np.load(b / "data" / name) as fb:
            assert all(np.array_equal(fa[k], fb[k]) for k in fa.files)
    ds = persist.load_dataset(a / "data" / "G1.npz")
    assert ds.balanced and len(ds) == 80


def test_seed_override_changes_data(tiny_cfg, tmp_path):
    assert run("gen-data", tmp_path / "s", tiny_cfg, "--seed", "5") == 0
    assert json.loads((tmp_path / "s" / "config.json").read_text())["world"]["seed"] == 5


def test_size_zero_is_config_error(tmp_path):
    p = tmp_path / "zero.json"
    p.write_text(json.dumps({"world": {"n_per_class": 0}}))
    assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "w")]) == 1


def test_config_errors(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
    bad.write_text(json.dumps({"colour": 1}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
    bad.write_text(json.dumps({"advtrain": {"generators": ["G9"]}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert main(["gen-data", "--workers", "0", "--out", str(tmp_path)]) == 1


def test_missing_prerequisite_names_command(tiny_cfg, tmp_path, capsys):
    assert run("attack", tmp_path / "empty", tiny_cfg) == 1
    assert "gen-data" in capsys.readouterr().err


def test_unknown_command_rejected():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["dance"])


def test_config_round_trip():
    cfg = load_config()
    assert ExperimentConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    assert len(cfg.world.generators) == 4 and cfg.world.n_per_class == 2000


def test_workers_do_not_change_results(tiny_cfg, workspace, tmp_path):
    ws, _ = workspace
    copy = tmp_path / "ws"
    shutil.copytree(ws, copy)
    assert run("attack", copy, tiny_cfg, "--workers", "2") == 0
    with open(ws / "results" / "attack.csv") as f1, open(copy / "results" / "attack.csv") as f2:
        assert list(csv.reader(f1)) == list(csv.reader(f2))
