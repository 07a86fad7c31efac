"""End-to-end tests for the command-line interface."""

from __future__ import annotations

import json
import os

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from warpclust import cli, data
from warpclust.errors import ConfigError

TINY = """
epochs = 3
basis_k = 4
encoder_channels = 4,8,16
flow_hidden = 16,16
substeps = 2
synth_per_cluster = 6
synth_grid = 32
synth_sharpness = 0.05
"""


@pytest.fixture()
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


def run(*argv):
    return cli.main(list(argv))


# -- configuration ----------------------------------------------------------

def test_config_file_parsing(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nepochs = 12\nalpha=0.5\nname = run a\n"
                    "flag = true\n\n")
    settings = cli.load_config_file(str(path))
    assert settings == {"epochs": 12, "alpha": 0.5, "name": "run a",
                        "flag": True}


def test_config_file_rejects_bare_line(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("epochs\n")
    with pytest.raises(ConfigError, match="c.cfg:1"):
        cli.load_config_file(str(path))


def test_flag_overrides_config(tiny_cfg, tmp_path):
    out = str(tmp_path / "run")
    assert run("train", "--config", tiny_cfg, "--epochs", "2",
               "--seed", "5", "--out", out) == 0
    with open(os.path.join(out, "report.json")) as fh:
        report = json.load(fh)
    assert report["config"]["epochs"] == 2
    assert report["config"]["basis_k"] == 4
    assert report["config"]["seed"] == 5


def test_parse_c_range():
    assert cli._parse_c_range("1-5") == [1, 2, 3, 4, 5]
    assert cli._parse_c_range("2,4,9") == [2, 4, 9]
    assert cli._parse_c_range("3") == [3]


# -- error handling ---------------------------------------------------------

def test_missing_data_path_exits_2(tmp_path, capsys):
    assert run("train", "--data", str(tmp_path / "absent.tsv"),
               "--out", str(tmp_path / "o")) == 2
    assert "absent.tsv" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert run("train", "--config", str(tmp_path / "absent.cfg"),
               "--out", str(tmp_path / "o")) == 2


def test_bad_setting_exits_1(tiny_cfg, tmp_path, capsys):
    assert run("train", "--config", tiny_cfg, "--clusters", "0",
               "--out", str(tmp_path / "o")) == 1
    assert "error:" in capsys.readouterr().err


def test_config_mixing_data_and_synth_keys(tmp_path):
    cfg = tmp_path / "mix.cfg"
    cfg.write_text("data = somewhere.tsv\nsynth_grid = 32\n")
    assert run("train", "--config", str(cfg),
               "--out", str(tmp_path / "o")) == 1


# -- train artifacts --------------------------------------------------------

def test_train_writes_all_artifacts(tiny_cfg, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--config", tiny_cfg, "--seed", "1",
               "--out", str(out)) == 0
    for name in ("checkpoint.bin", "report.json", "results.jsonl",
                 "timings.txt", "raw_dim0.tsv", "aligned_dim0.tsv",
                 "warps.tsv", "assignments.tsv", "labels.tsv",
                 "truth_labels.tsv", "truth_warps.tsv"):
        assert (out / name).exists(), name
    warps = cli.read_matrix(str(out / "warps.tsv"))
    assert warps.shape == (12, 32)
    assignments = cli.read_matrix(str(out / "assignments.tsv"))
    assert assignments.shape == (12, 2)
    np.testing.assert_allclose(assignments.sum(axis=1), 1.0, atol=1e-12)


def test_train_deterministic_artifacts(tiny_cfg, tmp_path):
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert run("train", "--config", tiny_cfg, "--seed", "2",
                   "--out", str(out)) == 0
        outs.append(out)
    for name in ("checkpoint.bin", "report.json", "results.jsonl",
                 "warps.tsv", "assignments.tsv", "labels.tsv",
                 "aligned_dim0.tsv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_train_multivariate(tiny_cfg, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--config", tiny_cfg, "--dims", "2", "--seed", "1",
               "--out", str(out)) == 0
    assert (out / "raw_dim1.tsv").exists()
    assert (out / "aligned_dim1.tsv").exists()


# -- round trips ------------------------------------------------------------

def test_synth_then_train_from_file(tiny_cfg, tmp_path):
    ds_dir = tmp_path / "ds"
    assert run("synth", "--config", tiny_cfg, "--seed", "4",
               "--out", str(ds_dir)) == 0
    loaded = data.load_table(str(ds_dir / "data_dim0.tsv"))
    spec = cli._synth_spec(cli.load_config_file(tiny_cfg) | {"seed": 4})
    assert_array_equal(loaded.values, data.generate_synthetic(spec).values)

    out = tmp_path / "run"
    assert run("train", "--config", tiny_cfg, "--seed", "4",
               "--data", str(ds_dir / "data_dim0.tsv"),
               "--out", str(out)) == 0
    assert (out / "labels.tsv").exists()


def test_eval_reproduces_train_scores(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    run("train", "--config", tiny_cfg, "--seed", "3", "--out", str(out))
    with open(out / "report.json") as fh:
        trained = json.load(fh)["scores"]
    assert run("eval", "--out", str(out)) == 0
    capsys.readouterr()
    with open(out / "eval.json") as fh:
        scored = json.load(fh)
    assert scored == trained


def test_eval_without_artifacts_exits_2(tmp_path):
    assert run("eval", "--out", str(tmp_path)) == 2


def test_read_matrix_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    array = rng.standard_normal((5, 7))
    path = str(tmp_path / "m.tsv")
    cli._write_matrix(path, array)
    assert_array_equal(cli.read_matrix(path), array)


# -- analysis commands ------------------------------------------------------

def test_elbow_command(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "elbow"
    assert run("elbow", "--config", tiny_cfg, "--epochs", "2", "--seed", "1",
               "--c-range", "1-3", "--out", str(out)) == 0
    assert "suggested cluster count" in capsys.readouterr().out
    lines = (out / "elbow.tsv").read_text().strip().splitlines()
    assert lines[0] == "clusters\ttv\tstatus"
    assert len(lines) == 4
    assert all(line.endswith("ok") for line in lines[1:])


def test_robustness_command(tiny_cfg, tmp_path):
    out = tmp_path / "rob"
    assert run("robustness", "--config", tiny_cfg, "--epochs", "2",
               "--seed", "1", "--protocol", "noise", "--levels", "0.05",
               "--out", str(out)) == 0
    lines = (out / "robustness.tsv").read_text().strip().splitlines()
    assert lines[0] == "protocol\tlevel\tacc\tnmi"
    assert len(lines) == 3  # header + clean + one level
    assert lines[1].startswith("clean\t0\t")
    assert lines[2].startswith("noise\t0.05\t")


def test_export_plots(tiny_cfg, tmp_path):
    out = tmp_path / "run"
    run("train", "--config", tiny_cfg, "--seed", "1", "--out", str(out))
    assert run("export-plots", "--out", str(out)) == 0
    for name in ("raw.svg", "warps.svg", "aligned.svg", "templates.svg"):
        assert (out / name).stat().st_size > 0, name
    templates = cli.read_matrix(str(out / "templates.tsv"))
    assert templates.shape == (2, 32)


def test_results_log_appends(tiny_cfg, tmp_path):
    out = tmp_path / "run"
    run("train", "--config", tiny_cfg, "--seed", "3", "--out", str(out))
    first = (out / "results.jsonl").read_text().count("\n")
    run("eval", "--out", str(out))
    second = (out / "results.jsonl").read_text().count("\n")
    assert second == first + 4
    for line in (out / "results.jsonl").read_text().splitlines():
        record = json.loads(line)
        assert {"name", "value", "dataset", "seed"} <= set(record)
