"""Seeded experiment runs: conflict reports, the random-freeze pilot, and sweeps."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .csvio import write_csv
from .data import DEFAULT_SHIFT, DomainDataset, ShiftConfig, make_uda_benchmark
from .diagnostics import ConflictRecord, anm_direction_test, correlation
from .trainer import (
    TrainConfig,
    Trainer,
    evaluate,
    generate_pseudo_labels,
    run_two_stage,
)

log = logging.getLogger(__name__)

CONFLICT_HEADER = list(ConflictRecord.FIELDS)
PILOT_HEADER = ["mode", "seed", "target_accuracy"]
SWEEP_HEADER = ["param", "value", "seed", "stage", "step", "target_accuracy"]
SKEWNESS_HEADER = ["step", "sample_id", "domain", "skewness", "selected"]


@dataclass(frozen=True)
class BenchmarkConfig:
    n_classes: int = 4
    n_per_class_source: int = 40
    n_per_class_target: int = 40
    n_points: int = 256
    shift: ShiftConfig = DEFAULT_SHIFT
    variation: float = 0.25

    def build(self, seed: int) -> tuple[DomainDataset, DomainDataset]:
        return make_uda_benchmark(self.n_per_class_source, self.n_per_class_target, self.n_classes,
                                  self.shift, seed, self.n_points, self.variation)


@dataclass
class RunSummary:
    seed: int
    mode: str
    source_accuracy: float
    stage1_target_accuracy: float
    target_accuracy: float
    conflicts: list[ConflictRecord] = field(default_factory=list)
    confusion: list[list[int]] | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "mode": self.mode, "source_accuracy": self.source_accuracy,
            "stage1_target_accuracy": self.stage1_target_accuracy,
            "target_accuracy": self.target_accuracy, "confusion": self.confusion,
        }


def run_once(config: TrainConfig, bench: BenchmarkConfig) -> RunSummary:
    """Two-stage run on the benchmark generated from ``config.seed``."""
    source, target = bench.build(config.seed)
    result = run_two_stage(config, source, target)
    final = evaluate(result.params, target)
    return RunSummary(
        seed=config.seed,
        mode=config.selection_mode.value,
        source_accuracy=evaluate(result.params, source).accuracy,
        stage1_target_accuracy=evaluate(result.stage1_params, target).accuracy,
        target_accuracy=final.accuracy,
        conflicts=result.conflicts,
        confusion=final.confusion.tolist(),
    )


def _run_star(args):
    return run_once(*args)


def run_many(configs: Sequence[TrainConfig], bench: BenchmarkConfig, workers: int = 1) -> list[RunSummary]:
    """Runs are independent and internally deterministic; results keep input order."""
    jobs = [(c, bench) for c in configs]
    if workers <= 1:
        return [_run_star(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_star, jobs))


def write_conflicts(path, records: Sequence[ConflictRecord]) -> Path:
    return write_csv(path, CONFLICT_HEADER, [r.row() for r in records])


def conflict_report(config: TrainConfig, bench: BenchmarkConfig, csv_path=None,
                    checkpoint_steps: Sequence[int] = ()) -> tuple[list[ConflictRecord], dict[int, dict]]:
    """Train with diagnostics on; returns records and checkpoints taken just before
    the listed (global) audited steps so any record can be replayed."""
    if config.diagnostics_stride <= 0:
        config = replace(config, diagnostics_stride=25)
    source, target = bench.build(config.seed)
    wanted = set(checkpoint_steps)
    checkpoints: dict[int, dict] = {}

    def drive(trainer: Trainer):
        while trainer.step_index < trainer.total_steps:
            g = trainer.step_offset + trainer.step_index
            if g in wanted:
                checkpoints[g] = trainer.checkpoint()
            trainer.step()

    t1 = Trainer(config, source, target, stage=1)
    drive(t1)
    pseudo = generate_pseudo_labels(t1.params, target)
    t2 = Trainer(config, source, pseudo, t1.params.copy(), stage=2, oracle_target=target,
                 step_offset=config.steps_stage1)
    drive(t2)
    records = t1.conflicts + t2.conflicts
    if csv_path is not None:
        write_conflicts(csv_path, records)
    return records, checkpoints


def replay_record(ckpt: dict, bench: BenchmarkConfig) -> ConflictRecord:
    """Recompute the conflict record of the step right after ``ckpt``."""
    config = TrainConfig.from_dict(ckpt["config"])
    source, target = bench.build(config.seed)
    if ckpt["stage"] == 1:
        trainer = Trainer.from_checkpoint(ckpt, source, target)
    else:
        # stage-2 pseudo-labels are a pure function of the stage-1 model, which the
        # checkpoint does not carry; rebuild them by replaying stage 1
        t1 = Trainer(config, source, target, stage=1)
        t1.run()
        pseudo = generate_pseudo_labels(t1.params, target)
        trainer = Trainer.from_checkpoint(ckpt, source, pseudo, oracle_target=target)
    trainer.step()
    return trainer.conflicts[-1]


def conflict_summary(records: Sequence[ConflictRecord]) -> dict:
    """Correlation of batch skewness with SSL/oracle alignment, plus the ANM verdict."""
    usable = [r for r in records if r.mean_skewness is not None]
    out: dict = {"n_records": len(records)}
    if len(usable) >= 3:
        sk = [r.mean_skewness for r in usable]
        out["skewness_vs_sim_ssl_oracle"] = correlation(sk, [r.sim_ssl_oracle for r in usable])
        out["sim_ssl_cls_vs_sim_sum_oracle"] = correlation(
            [r.sim_ssl_cls for r in usable], [r.sim_sum_oracle for r in usable])
    if len(usable) >= 30:
        out["anm"] = anm_direction_test([r.mean_skewness for r in usable], [r.sim_ssl_oracle for r in usable])
    return out


PILOT_MODES = ("all", "random-freeze", "sm-dsb")


def pilot_random_freeze(config: TrainConfig, bench: BenchmarkConfig, seeds: Sequence[int],
                        csv_path=None, workers: int = 1) -> dict[str, dict]:
    """All vs RandomFreeze(0.5) vs SM-DSB on identical seeds; mean and std of target accuracy."""
    if len(seeds) < 5:
        raise ValueError("the pilot comparison needs at least 5 seeds")
    configs = [replace(config, selection_mode=m, seed=s, freeze_fraction=0.5)
               for m in PILOT_MODES for s in seeds]
    runs = run_many(configs, bench, workers)
    rows = [[r.mode, r.seed, r.target_accuracy] for r in runs]
    if csv_path is not None:
        write_csv(csv_path, PILOT_HEADER, rows)
    return aggregate_pilot(rows)


def aggregate_pilot(rows: Sequence[Sequence]) -> dict[str, dict]:
    table: dict[str, list[float]] = {}
    for mode, _, acc in rows:
        table.setdefault(mode, []).append(float(acc))
    return {m: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)} for m, v in table.items()}


def sweep(config: TrainConfig, bench: BenchmarkConfig, grid: dict[str, Sequence[float]],
          seeds: Sequence[int], csv_path=None, eval_every: int = 0) -> list[list]:
    """One row per (param value, seed, evaluated step); the last row of each run is final.

    ``eval_every`` > 0 adds periodic target accuracies within each stage.
    """
    if not grid or not any(grid.values()):
        raise ValueError("sweep grid is empty")
    rows = []
    for param, values in grid.items():
        for value in values:
            for seed in seeds:
                cfg = replace(config, seed=seed, **{param: value})
                rows += _sweep_run(cfg, bench, param, value, eval_every)
    if csv_path is not None:
        write_csv(csv_path, SWEEP_HEADER, rows)
    return rows


def _sweep_run(cfg: TrainConfig, bench: BenchmarkConfig, param: str, value: float, eval_every: int) -> list[list]:
    source, target = bench.build(cfg.seed)
    rows = []

    def drive(trainer: Trainer, stage: int):
        while trainer.step_index < trainer.total_steps:
            chunk = eval_every if eval_every > 0 else trainer.total_steps
            trainer.run(min(chunk, trainer.total_steps - trainer.step_index))
            rows.append([param, float(value), cfg.seed, stage, trainer.step_offset + trainer.step_index,
                         evaluate(trainer.params, target).accuracy])

    t1 = Trainer(cfg, source, target, stage=1)
    drive(t1, 1)
    pseudo = generate_pseudo_labels(t1.params, target)
    t2 = Trainer(cfg, source, pseudo, t1.params.copy(), stage=2, step_offset=cfg.steps_stage1)
    drive(t2, 2)
    return rows


def final_sweep_means(rows: Sequence[Sequence]) -> dict[float, float]:
    """Mean final target accuracy per swept value."""
    last: dict[tuple, float] = {}
    for param, value, seed, stage, step, acc in rows:
        last[(float(value), int(seed))] = float(acc)  # rows are in step order per run
    by_value: dict[float, list[float]] = {}
    for (value, _), acc in last.items():
        by_value.setdefault(value, []).append(acc)
    return {v: float(np.mean(a)) for v, a in sorted(by_value.items())}
