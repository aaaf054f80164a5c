import json
import os
import subprocess
import sys

import numpy as np
import pytest

from skewgrad.cli import ConfigError, ExperimentConfig, load_config, main
from skewgrad.csvio import CONFLICT_SCHEMA, SKEWNESS_SCHEMA, SWEEP_SCHEMA, read_csv
from skewgrad.data import load_manifest
from skewgrad.diagnostics import correlation
from skewgrad.trainer import evaluate, params_from_checkpoint, read_checkpoint

TINY = ["--n-per-class-source", "3", "--n-per-class-target", "3", "--n-points", "32", "--batch-size", "4",
        "--steps-stage1", "4", "--steps-stage2", "2", "--hidden", "8", "--feature-dim", "8"]


def run(args, tmp_path, name="run"):
    out = tmp_path / name
    return main(list(args[:1]) + TINY + list(args[1:]) + ["--output-dir", str(out)]), out


def test_gen_data_counts_labels_and_idempotence(tmp_path):
    code, out = run(["gen-data"], tmp_path)
    assert code == 0
    src = load_manifest(out / "data/source/manifest.json")
    tgt = load_manifest(out / "data/target/manifest.json")
    assert len(src) == 12 and len(tgt) == 12
    assert len(list((out / "data/source").glob("*.xyz"))) == 12
    # source labels recorded, target labels withheld
    assert sorted(pc.label for pc in src) == sorted(list(range(4)) * 3)
    assert all(pc.hidden for pc in tgt)
    first = {p.name: p.read_bytes() for p in (out / "data").rglob("*") if p.is_file()}
    assert main(["gen-data"] + TINY + ["--output-dir", str(out)]) == 0
    assert first == {p.name: p.read_bytes() for p in (out / "data").rglob("*") if p.is_file()}


def test_gen_data_manifest_matches_generation(tmp_path):
    code, out = run(["gen-data", "--seed", "9"], tmp_path)
    cfg = load_config(None, {"seed": "9", "n_per_class_source": "3", "n_per_class_target": "3", "n_points": "32",
                             "batch_size": "4"}, env={})
    source, _ = cfg.benchmark().build(9)
    loaded = {pc.id: pc for pc in load_manifest(out / "data/source/manifest.json")}
    for pc in source:
        assert loaded[pc.id].label == pc.label
        np.testing.assert_allclose(loaded[pc.id].points, pc.points, atol=1e-11)


def test_train_writes_summary_matching_checkpoint(tmp_path, capsys):
    code, out = run(["train", "--selection-mode", "sm-dsb", "--beta", "0.7"], tmp_path)
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert {"source_accuracy", "target_accuracy", "confusion"} <= set(summary)
    cfg = ExperimentConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in summary["config"].items()})
    source, target = cfg.benchmark().build(cfg.seed)
    params = params_from_checkpoint(read_checkpoint(out / "final.ckpt.json"))
    assert evaluate(params, target).accuracy == summary["target_accuracy"]
    log = [json.loads(line) for line in (out / "log.jsonl").read_text().splitlines()]
    assert len(log) == 6
    assert {"step", "L_total", "L_c_s", "L_ssl_s", "L_ssl_t", "retained_count", "tau"} <= set(log[0])
    assert "target accuracy" in capsys.readouterr().out


def test_source_only_baseline_flags(tmp_path):
    code, out = run(["train", "--selection-mode", "none", "--ssl-weight", "0"], tmp_path)
    assert code == 0
    log = [json.loads(line) for line in (out / "log.jsonl").read_text().splitlines()]
    assert all(r["L_ssl_s"] == 0 and r["L_ssl_t"] == 0 for r in log)
    assert json.loads((out / "summary.json").read_text())["config"]["loss_weights"] == [1.0, 0.0, 0.0]


def test_train_is_deterministic(tmp_path):
    run(["train"], tmp_path, "a")
    run(["train"], tmp_path, "b")
    for name in ("final.ckpt.json", "log.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("args", [["train", "--beta", "1.5"], ["train", "--bogus", "1"],
                                  ["train", "--batch-size", "two"], ["sweep"], ["train", "--n-classes", "9"]])
def test_config_errors_exit_2(args, tmp_path, capsys):
    code, _ = run(args, tmp_path)
    assert code == 2
    err = capsys.readouterr().err
    assert "config error" in err


def test_config_error_names_field(tmp_path, capsys):
    run(["train", "--beta", "1.5"], tmp_path)
    assert "beta" in capsys.readouterr().err


def test_divergence_exits_3(tmp_path, capsys):
    with np.errstate(all="ignore"):
        code, _ = run(["train", "--learning-rate", "1e200", "--selection-mode", "all"], tmp_path)
    assert code == 3
    assert "stage 1" in capsys.readouterr().err


def test_diagnose_outputs_and_offline_recomputation(tmp_path):
    code, out = run(["diagnose", "--diagnostics-stride", "1"], tmp_path)
    assert code == 0
    rows = read_csv(out / "conflicts.csv", CONFLICT_SCHEMA)
    assert len(rows) == 6
    assert all(-1 <= r[k] <= 1 for r in rows for k in ("sim_sum_oracle", "sim_ssl_cls", "sim_ssl_oracle"))
    summary = json.loads((out / "diagnose_summary.json").read_text())
    again = correlation([r["mean_skewness"] for r in rows], [r["sim_ssl_oracle"] for r in rows])
    assert summary["skewness_vs_sim_ssl_oracle"] == pytest.approx(again, abs=1e-12)
    assert len(read_csv(out / "skewness.csv", SKEWNESS_SCHEMA)) > 0


def test_diagnose_reproducible(tmp_path):
    run(["diagnose", "--diagnostics-stride", "2"], tmp_path, "a")
    run(["diagnose", "--diagnostics-stride", "2"], tmp_path, "b")
    assert (tmp_path / "a/conflicts.csv").read_bytes() == (tmp_path / "b/conflicts.csv").read_bytes()


def test_diagnose_stride_beyond_run_gives_header_only(tmp_path, capsys):
    code, out = run(["diagnose", "--diagnostics-stride", "50"], tmp_path)  # the run has 6 steps
    assert code == 0
    assert (out / "conflicts.csv").read_text() == "step,sim_sum_oracle,sim_ssl_cls,sim_ssl_oracle,mean_skewness\n"
    assert "notice" in capsys.readouterr().out


def test_sweep_rows_and_summary(tmp_path):
    code, out = run(["sweep", "--sweep-beta", "0.5,0.9", "--seeds", "0,1"], tmp_path)
    assert code == 0
    rows = read_csv(out / "sweep.csv", SWEEP_SCHEMA)
    assert len(rows) == 2 * 2 * 2  # values x seeds x (end of stage 1, end of stage 2)
    summary = json.loads((out / "sweep_summary.json").read_text())
    for value in (0.5, 0.9):
        finals = [r["target_accuracy"] for r in rows if r["value"] == value and r["stage"] == 2]
        assert summary["beta"][str(value)] == pytest.approx(np.mean(finals))


def test_report_bundle(tmp_path):
    run(["diagnose", "--diagnostics-stride", "1"], tmp_path)
    out = tmp_path / "run"
    run(["train"], tmp_path)
    assert main(["report", str(out)]) == 0
    for name in ("loss_curves.csv", "confusion.csv", "conflict_curves.csv", "summary.txt"):
        assert (out / "report" / name).exists()


def test_report_missing_files_are_listed(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty")]) == 2
    err = capsys.readouterr().err
    assert "log.jsonl" in err and "summary.json" in err


def test_config_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 5, "beta": 0.4, "alpha": 2.0}))
    assert load_config(str(path), {}, env={}).seed == 5
    cfg = load_config(str(path), {"beta": "0.6"}, env={"SKEWGRAD_SEED": "8"})
    assert (cfg.seed, cfg.beta, cfg.alpha) == (8, 0.6, 2.0)
    assert load_config(str(path), {"seed": "3"}, env={"SKEWGRAD_SEED": "8"}).seed == 3
    assert load_config(None, {}, env={}) == ExperimentConfig()


def test_bad_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="config"):
        load_config(str(path), {}, env={})


def test_env_seed_through_subprocess(tmp_path):
    out = tmp_path / "env"
    env = dict(os.environ, SKEWGRAD_SEED="7")
    subprocess.run([sys.executable, "-m", "skewgrad.cli", "train", *TINY, "--output-dir", str(out)],
                   check=True, env=env, capture_output=True)
    assert json.loads((out / "summary.json").read_text())["config"]["seed"] == 7
