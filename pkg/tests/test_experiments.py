from dataclasses import replace

import numpy as np
import pytest

from skewgrad.csvio import CONFLICT_SCHEMA, PILOT_SCHEMA, SWEEP_SCHEMA, read_csv
from skewgrad.data import ShiftConfig
from skewgrad.experiments import (
    BenchmarkConfig,
    aggregate_pilot,
    conflict_report,
    conflict_summary,
    final_sweep_means,
    pilot_random_freeze,
    replay_record,
    run_many,
    sweep,
)
from skewgrad.trainer import TrainConfig

BENCH = BenchmarkConfig(n_per_class_source=3, n_per_class_target=3, n_points=32,
                        shift=ShiftConfig(0.02, 0.2, None, 1.0))
CFG = TrainConfig(batch_size=4, steps_stage1=4, steps_stage2=3, hidden=8, feature_dim=8, seed=2)


def test_conflict_report_stride_one_counts_every_step(tmp_path):
    cfg = replace(CFG, diagnostics_stride=1)
    records, _ = conflict_report(cfg, BENCH, tmp_path / "c.csv")
    assert [r.step for r in records] == list(range(7))
    rows = read_csv(tmp_path / "c.csv", CONFLICT_SCHEMA)
    assert len(rows) == 7
    assert all(-1 <= r[k] <= 1 for r in rows for k in ("sim_sum_oracle", "sim_ssl_cls", "sim_ssl_oracle"))


@pytest.mark.parametrize("step", [2, 5])
def test_replay_reproduces_record(step):
    cfg = replace(CFG, diagnostics_stride=1)
    records, ckpts = conflict_report(cfg, BENCH, checkpoint_steps=[step])
    replayed = replay_record(ckpts[step], BENCH)
    original = records[step]
    assert replayed.step == original.step
    for a, b in zip(replayed.row()[1:], original.row()[1:]):
        assert a == pytest.approx(b, abs=1e-9)


def test_pilot_means_match_reaggregation(tmp_path):
    table = pilot_random_freeze(CFG, BENCH, seeds=range(5), csv_path=tmp_path / "p.csv")
    rows = read_csv(tmp_path / "p.csv", PILOT_SCHEMA)
    assert len(rows) == 15
    for mode in ("all", "random-freeze", "sm-dsb"):
        accs = [r["target_accuracy"] for r in rows if r["mode"] == mode]
        assert [r["seed"] for r in rows if r["mode"] == mode] == [0, 1, 2, 3, 4]
        assert table[mode]["mean"] == pytest.approx(np.mean(accs), abs=1e-15)
        assert table[mode]["std"] == pytest.approx(np.std(accs), abs=1e-15)
    assert aggregate_pilot([[r["mode"], r["seed"], r["target_accuracy"]] for r in rows]) == table


def test_pilot_needs_five_seeds():
    with pytest.raises(ValueError, match="5 seeds"):
        pilot_random_freeze(CFG, BENCH, seeds=[0, 1])


def test_sweep_grid_three_by_three(tmp_path):
    rows = sweep(CFG, BENCH, {"beta": [0.5, 0.7, 0.9]}, seeds=[0, 1, 2], csv_path=tmp_path / "s.csv")
    finals = [r for r in rows if r[3] == 2]
    assert len({(r[1], r[2]) for r in finals}) == 9
    parsed = read_csv(tmp_path / "s.csv", SWEEP_SCHEMA)
    means = final_sweep_means([list(r.values()) for r in parsed])
    for beta in (0.5, 0.7, 0.9):
        assert means[beta] == pytest.approx(np.mean([r[5] for r in finals if r[1] == beta]))


def test_sweep_periodic_rows(tmp_path):
    rows = sweep(CFG, BENCH, {"alpha": [1.0]}, seeds=[0], eval_every=2)
    assert [r[4] for r in rows] == [2, 4, 6, 7]


def test_sweep_empty_grid():
    with pytest.raises(ValueError):
        sweep(CFG, BENCH, {}, seeds=[0])


def test_parallel_runs_match_serial():
    configs = [replace(CFG, seed=s) for s in (0, 1)]
    serial = [r.to_dict() for r in run_many(configs, BENCH, workers=1)]
    parallel = [r.to_dict() for r in run_many(configs, BENCH, workers=2)]
    assert serial == parallel


def test_conflict_summary_short_series_skips_anm():
    records, _ = conflict_report(replace(CFG, diagnostics_stride=1), BENCH)
    s = conflict_summary(records)
    assert s["n_records"] == 7 and "anm" not in s
    assert set(s["skewness_vs_sim_ssl_oracle"]) == {"pearson", "spearman"}
