"""CLI contract tests: config loading and validation, flag overrides,
write-once artifacts, manifest replay, exit codes, and stdout hygiene.

Everything runs main() in-process on micro problem sizes.
"""

import json
import os

import pytest

from deepcodec.cli import main
from deepcodec.signal_core import load_dataset

FAST_LASSO = {"num_lambdas": 10, "max_iter": 1000}


def run(*argv):
    return main(list(argv))


def gen_data(tmp_path, sub="data", n=16, k=2, train=8, test=4, seed=1):
    out = tmp_path / sub
    rc = run("gen-data", "--out", str(out), "--n", str(n), "--k", str(k),
             "--train", str(train), "--test", str(test), "--seed", str(seed))
    assert rc == 0
    return out / "dataset.bin"


# ---------------------------------------------------------------------------
# gen-data and the manifest contract


def test_gen_data_writes_dataset_and_manifest(tmp_path, capsys):
    data = gen_data(tmp_path)
    assert data.is_file()
    assert (data.parent / "dataset.bin.manifest.json").is_file()
    ds = load_dataset(str(data))
    assert (ds.n, ds.k, len(ds.train), len(ds.test)) == (16, 2, 8, 4)

    manifest = json.loads((data.parent / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["config"] == {"n": 16, "k": 2, "train": 8, "test": 4,
                                  "seed": 1}
    assert manifest["artifacts"] == ["dataset.bin",
                                     "dataset.bin.manifest.json"]
    assert set(manifest["versions"]) == {"deepcodec", "numpy", "python"}
    assert manifest["wall_time_s"] >= 0

    # machine-readable results go to files; stdout stays empty
    assert capsys.readouterr().out == ""


def test_write_once_refuses_then_force_overwrites(tmp_path, capsys):
    gen_data(tmp_path)
    args = ("gen-data", "--out", str(tmp_path / "data"), "--n", "16",
            "--k", "2", "--train", "8", "--test", "4", "--seed", "1")
    assert run(*args) == 2
    assert "dataset.bin" in capsys.readouterr().err
    assert run(*args, "--force") == 0


def test_flag_overrides_config_and_manifest_records_merge(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 16, "k": 2, "train": 8, "test": 4}))
    out = tmp_path / "data"
    assert run("gen-data", "--config", str(cfg), "--out", str(out),
               "--n", "24") == 0
    assert load_dataset(str(out / "dataset.bin")).n == 24
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["n"] == 24  # the effective value, not the file's


# ---------------------------------------------------------------------------
# config validation


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 16, "k": 2, "train": 8, "test": 4,
                               "bogus_knob": 3}))
    assert run("gen-data", "--config", str(cfg),
               "--out", str(tmp_path / "d")) == 2
    assert "bogus_knob" in capsys.readouterr().err


def test_missing_required_key_rejected(tmp_path, capsys):
    assert run("gen-data", "--out", str(tmp_path / "d"), "--n", "16",
               "--k", "2", "--train", "8") == 2
    assert "test" in capsys.readouterr().err


def test_malformed_json_rejected_without_partial_outputs(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{not json")
    out = tmp_path / "d"
    assert run("phase-grid", "--config", str(cfg), "--out", str(out)) == 2
    assert "valid JSON" in capsys.readouterr().err
    assert not (out / "grid.csv").exists()
    assert not (out / "run_manifest.json").exists()


def test_config_must_be_object(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("[1, 2]")
    assert run("gen-data", "--config", str(cfg),
               "--out", str(tmp_path / "d")) == 2


def test_missing_config_file(tmp_path):
    assert run("gen-data", "--config", str(tmp_path / "nope.json"),
               "--out", str(tmp_path / "d")) == 2


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as e:
        run("frobnicate")
    assert e.value.code == 2


def test_writing_command_requires_out(tmp_path, capsys):
    assert run("lasso", "--n", "16", "--m", "12", "--k", "2") == 2
    assert "--out" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train / eval round trip


def test_train_eval_roundtrip(tmp_path, capsys):
    data = gen_data(tmp_path)
    train_out = tmp_path / "train"
    rc = run("train", "--out", str(train_out), "--dataset", str(data),
             "--arch", "deepcodec", "--r", "2", "--filter-len", "5",
             "--epochs", "2", "--batch-size", "4", "--seed", "0")
    assert rc == 0
    for f in ("final.ckpt", "best.ckpt", "train_curve.csv",
              "run_manifest.json"):
        assert (train_out / f).is_file()

    eval_cfg = tmp_path / "eval.json"
    eval_cfg.write_text(json.dumps({"dataset": str(data),
                                    "lasso_m": 12, "lasso": FAST_LASSO}))
    eval_out = tmp_path / "eval"
    rc = run("eval", "--config", str(eval_cfg), "--out", str(eval_out),
             "--checkpoint", str(train_out / "best.ckpt"))
    assert rc == 0
    table = (eval_out / "nmse_table.csv").read_text().splitlines()
    methods = {line.split(",")[0] for line in table[1:]}
    assert methods == {"deepcodec-r2", "lasso"}
    assert (eval_out / "sample_recovery.csv").is_file()
    assert capsys.readouterr().out == ""


def test_train_reruns_byte_identical(tmp_path):
    data = gen_data(tmp_path)
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        rc = run("train", "--out", str(out), "--dataset", str(data),
                 "--arch", "deepcodec", "--r", "2", "--filter-len", "5",
                 "--epochs", "2", "--batch-size", "4", "--seed", "3")
        assert rc == 0
    for f in ("final.ckpt", "best.ckpt", "train_curve.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_train_deepinverse_needs_m(tmp_path, capsys):
    data = gen_data(tmp_path)
    assert run("train", "--out", str(tmp_path / "t"), "--dataset", str(data),
               "--arch", "deepinverse", "--epochs", "1") == 2
    assert "m" in capsys.readouterr().err


def test_eval_corrupt_checkpoint_is_runtime_error(tmp_path):
    data = gen_data(tmp_path)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    assert run("eval", "--out", str(tmp_path / "e"), "--dataset", str(data),
               "--checkpoint", str(bad)) == 1


def test_eval_needs_something_to_evaluate(tmp_path):
    data = gen_data(tmp_path)
    assert run("eval", "--out", str(tmp_path / "e"),
               "--dataset", str(data)) == 2


# ---------------------------------------------------------------------------
# lasso, phase-grid, curve, complexity, describe


def test_lasso_manifest_replay_and_threads(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lasso": FAST_LASSO}))
    first = tmp_path / "run1"
    rc = run("lasso", "--config", str(cfg), "--out", str(first),
             "--n", "16", "--m", "12", "--k", "2", "--q", "3", "--seed", "7")
    assert rc == 0
    trials = (first / "lasso_trials.csv").read_bytes()
    assert trials.decode().splitlines()[0] == \
        "trial,nmse,lambda,sweeps,converged"

    # replaying the manifest reproduces the run byte for byte
    second = tmp_path / "run2"
    rc = run("lasso", "--config", str(first / "run_manifest.json"),
             "--out", str(second))
    assert rc == 0
    assert (second / "lasso_trials.csv").read_bytes() == trials

    # and the thread count never changes results
    third = tmp_path / "run3"
    rc = run("lasso", "--config", str(first / "run_manifest.json"),
             "--out", str(third), "--threads", "4")
    assert rc == 0
    assert (third / "lasso_trials.csv").read_bytes() == trials


def test_manifest_for_wrong_command_rejected(tmp_path, capsys):
    data = gen_data(tmp_path)
    manifest = data.parent / "run_manifest.json"
    assert run("lasso", "--config", str(manifest),
               "--out", str(tmp_path / "x")) == 2
    assert "gen-data" in capsys.readouterr().err


def test_phase_grid_point_flags(tmp_path):
    out = tmp_path / "grid"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lasso": FAST_LASSO}))
    rc = run("phase-grid", "--config", str(cfg), "--out", str(out),
             "--n", "24", "--q", "3", "--seed", "2",
             "--point", "12,2", "--point", "4,3")
    assert rc == 0
    lines = (out / "grid.csv").read_text().splitlines()
    assert len(lines) == 3  # header + one lasso row per point
    assert lines[1].split(",")[1] == "12"
    assert lines[2].split(",")[1] == "4"


def test_phase_grid_bad_point_flag(tmp_path, capsys):
    assert run("phase-grid", "--out", str(tmp_path / "g"), "--n", "24",
               "--q", "3", "--point", "12;2") == 2
    assert "--point" in capsys.readouterr().err


def test_curve_command_micro(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "n": 16, "k": 2, "r": 2, "lasso_m": 12, "train": 8, "test": 4,
        "epochs_deepcodec": 1, "epochs_deepinverse": 1, "batch_size": 4,
        "filter_len_deepcodec": 5, "filter_len_deepinverse": 5,
        "lasso": FAST_LASSO}))
    out = tmp_path / "curve"
    assert run("curve", "--config", str(cfg), "--out", str(out)) == 0
    for f in ("curve_deepcodec.csv", "curve_deepinverse.csv",
              "curve_meta.json", "run_manifest.json"):
        assert (out / f).is_file()
    for sub in ("deepcodec", "deepinverse"):
        assert (out / sub / "best.ckpt").is_file()


def test_complexity_no_measure(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"sizes_deepcodec": [64, 128],
                               "sizes_deepinverse": [64, 128],
                               "measure": False}))
    out = tmp_path / "cx"
    assert run("complexity", "--config", str(cfg), "--out", str(out)) == 0
    text = (out / "complexity.csv").read_text()
    assert ",TOTAL," in text
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert "measured_exponents" not in manifest


def test_complexity_measured_exponents_in_manifest(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"sizes_deepcodec": [64, 128],
                               "sizes_deepinverse": [64, 128],
                               "batch": 2, "repeats": 1}))
    out = tmp_path / "cx"
    assert run("complexity", "--config", str(cfg), "--out", str(out)) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert set(manifest["measured_exponents"]) == {"deepcodec", "deepinverse"}
    assert set(manifest["measured_seconds"]["deepcodec"]) == {"64", "128"}


def test_describe_prints_table(tmp_path, capsys):
    assert run("describe", "--arch", "deepcodec", "--n", "64", "--r", "8") == 0
    out = capsys.readouterr().out
    assert "rearrange" in out
    assert "subpixel" in out
    assert "measure" in out

    assert run("describe", "--arch", "deepinverse", "--n", "32",
               "--m", "8", "--filter-len", "5") == 0
    out = capsys.readouterr().out
    assert "backproject" in out
    assert "bn1" in out
