"""skewgrad gen-data|train|sweep|diagnose|report [--config path] [--key value ...]

Every ExperimentConfig field can come from the JSON config file or a
``--key value`` flag (dashes or underscores); flags win over the environment
variable SKEWGRAD_SEED, which wins over the file, which wins over defaults.
Exit codes: 0 success, 2 configuration error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .csvio import CONFLICT_SCHEMA, PILOT_SCHEMA, SWEEP_SCHEMA, read_csv, write_csv
from .data import ShiftConfig, save_dataset
from .experiments import (
    SKEWNESS_HEADER,
    BenchmarkConfig,
    conflict_summary,
    final_sweep_means,
    pilot_random_freeze,
    sweep,
    write_conflicts,
)
from .diagnostics import correlation
from .trainer import TrainConfig, TrainingDivergence, evaluate, run_two_stage, save_checkpoint

log = logging.getLogger("skewgrad")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # training
    alpha: float = 1.0
    beta: float = 0.7
    learning_rate: float = 0.05
    batch_size: int = 32
    steps_stage1: int = 4000
    steps_stage2: int = 2000
    seed: int = 0
    perturb_mu: float = 0.1
    perturb_sigma: float = 0.02
    selection_mode: str = "sm-dsb"
    freeze_fraction: float = 0.5
    loss_weights: tuple = (1.0, 1.0, 1.0)
    optimizer: str = "sgd"
    hidden: int = 64
    feature_dim: int = 128
    invert_selection: bool = False
    pseudo_label_threshold: float = 0.0
    diagnostics_stride: int = 25
    # benchmark
    n_classes: int = 4
    n_per_class_source: int = 40
    n_per_class_target: int = 40
    n_points: int = 256
    jitter_sigma: float = 0.03
    drop_fraction: float = 0.3
    occlusion_normal: tuple | None = (0.7071067811865476, 0.0, 0.7071067811865476)
    occlusion_offset: float = 0.5
    shift_scale: float = 1.0
    variation: float = 0.25
    # harness
    output_dir: str = "runs/default"
    seeds: tuple = (0, 1, 2, 3, 4)
    sweep_beta: tuple = ()
    sweep_alpha: tuple = ()
    eval_every: int = 0
    workers: int = 1

    def train_config(self, diagnostics: bool = False) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        d = {k: v for k, v in asdict(self).items() if k in names}
        if not diagnostics:
            d["diagnostics_stride"] = 0
        return TrainConfig(**d)

    def benchmark(self) -> BenchmarkConfig:
        occl = None
        if self.occlusion_normal is not None:
            n = np.asarray(self.occlusion_normal, dtype=np.float64)
            occl = (tuple(n / np.linalg.norm(n)), self.occlusion_offset)
        shift = ShiftConfig(self.jitter_sigma, self.drop_fraction, occl, self.shift_scale)
        return BenchmarkConfig(self.n_classes, self.n_per_class_source, self.n_per_class_target,
                               self.n_points, shift, self.variation)

    def validate(self) -> "ExperimentConfig":
        try:
            self.train_config(diagnostics=True)
            self.benchmark()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not 4 <= self.n_classes <= 6:
            raise ConfigError("n_classes: must lie in [4, 6]")
        if self.n_points < 8:
            raise ConfigError("n_points: must be >= 8")
        for name in ("n_per_class_source", "n_per_class_target"):
            if getattr(self, name) * self.n_classes < self.batch_size:
                raise ConfigError(f"{name}: dataset smaller than batch_size")
        if not self.seeds:
            raise ConfigError("seeds: must not be empty")
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, raw):
    if name not in _FIELD_TYPES:
        raise ConfigError(f"{name}: unknown configuration field")
    default = getattr(ExperimentConfig, name)
    if isinstance(raw, str):
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
    else:
        value = raw
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                value = value.lower() in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            return str(value)
        if isinstance(default, tuple) or default is None:
            if value is None:
                return None
            if isinstance(value, (int, float)):
                value = [value]
            if isinstance(value, str):
                value = [json.loads(v) for v in value.split(",") if v]
            return tuple(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot interpret {raw!r}") from None
    return value


def load_config(config_path: str | None, overrides: dict[str, str], env: dict | None = None) -> ExperimentConfig:
    """Defaults < JSON file < SKEWGRAD_SEED < command-line flags."""
    env = os.environ if env is None else env
    values: dict = {}
    if config_path:
        try:
            file_values = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {config_path} ({exc})") from None
        if not isinstance(file_values, dict):
            raise ConfigError("config: top level must be a JSON object")
        values.update({k: _coerce(k, v) for k, v in file_values.items()})
    if env.get("SKEWGRAD_SEED"):
        values["seed"] = _coerce("seed", env["SKEWGRAD_SEED"])
    for k, v in overrides.items():
        if k == "ssl_weight":
            w = _coerce("learning_rate", v)  # parsed as a float
            cls_w = values.get("loss_weights", (1.0, 1.0, 1.0))[0]
            values["loss_weights"] = (cls_w, w, w)
            continue
        values[k] = _coerce(k, v)
    return ExperimentConfig(**values).validate()


def _parse_overrides(rest: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}; expected --key value")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"{key}: missing value")
            val = rest[i + 1]
            i += 2
        out[key.replace("-", "_")] = val
    return out


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output_dir: cannot create {out} ({exc})") from None
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_gen_data(cfg: ExperimentConfig) -> dict:
    out = _out_dir(cfg) / "data"
    source, target = cfg.benchmark().build(cfg.seed)
    try:
        src_manifest = save_dataset(source, out / "source")
        tgt_manifest = save_dataset(target, out / "target")
    except OSError as exc:
        raise ConfigError(f"output_dir: cannot write data ({exc})") from None
    print(f"wrote {len(source)} source and {len(target)} target clouds under {out}")
    return {"source_manifest": str(src_manifest), "target_manifest": str(tgt_manifest),
            "n_source": len(source), "n_target": len(target)}


def cmd_train(cfg: ExperimentConfig) -> dict:
    out = _out_dir(cfg)
    tcfg = cfg.train_config(diagnostics=False)
    source, target = cfg.benchmark().build(cfg.seed)
    result = run_two_stage(tcfg, source, target)
    result.logs.to_jsonl(out / "log.jsonl")
    for name, trainer in zip(("stage1", "final"), result.trainers):
        save_checkpoint(trainer, out / f"{name}.ckpt.json")
    tgt_eval = evaluate(result.params, target)
    summary = {
        "config": asdict(cfg),
        "source_accuracy": evaluate(result.params, source).accuracy,
        "stage1_target_accuracy": evaluate(result.stage1_params, target).accuracy,
        "target_accuracy": tgt_eval.accuracy,
        "per_class_accuracy": tgt_eval.per_class.tolist(),
        "confusion": tgt_eval.confusion.tolist(),
    }
    _write_json(out / "summary.json", summary)
    print(f"source accuracy {summary['source_accuracy']:.4f}  "
          f"target accuracy {summary['stage1_target_accuracy']:.4f} -> {summary['target_accuracy']:.4f}")
    return summary


def cmd_sweep(cfg: ExperimentConfig) -> dict:
    grid = {}
    if cfg.sweep_beta:
        grid["beta"] = [float(v) for v in cfg.sweep_beta]
    if cfg.sweep_alpha:
        grid["alpha"] = [float(v) for v in cfg.sweep_alpha]
    if not grid:
        raise ConfigError("sweep_beta/sweep_alpha: the sweep grid is empty")
    out = _out_dir(cfg)
    tcfg = cfg.train_config(diagnostics=False)
    rows = sweep(tcfg, cfg.benchmark(), grid, list(cfg.seeds), out / "sweep.csv", cfg.eval_every)
    summary = {}
    for param in grid:
        means = final_sweep_means([r for r in rows if r[0] == param])
        summary[param] = {str(k): v for k, v in means.items()}
        for value, acc in means.items():
            print(f"{param}={value:g}: mean final target accuracy {acc:.4f}")
    _write_json(out / "sweep_summary.json", summary)
    return summary


def cmd_diagnose(cfg: ExperimentConfig) -> dict:
    out = _out_dir(cfg)
    tcfg = cfg.train_config(diagnostics=True)
    source, target = cfg.benchmark().build(cfg.seed)
    result = run_two_stage(tcfg, source, target)
    write_conflicts(out / "conflicts.csv", result.conflicts)
    write_csv(out / "skewness.csv", SKEWNESS_HEADER, result.sample_records)
    result.logs.to_jsonl(out / "log.jsonl")
    if not result.conflicts:
        print(f"notice: diagnostics_stride {cfg.diagnostics_stride} exceeds the run length; "
              "conflicts.csv holds only its header")
    summary = conflict_summary(result.conflicts)
    per_sample = _per_sample_correlation(result.conflicts, result.sample_records)
    if per_sample is not None:
        summary["per_sample_skewness_vs_sim_ssl_oracle"] = per_sample
    _write_json(out / "diagnose_summary.json", summary)
    _print_diagnosis(summary)
    return summary


def _per_sample_correlation(conflicts, sample_rows):
    sim = {c.step: c.sim_ssl_oracle for c in conflicts}
    pairs = [(row[3], sim[row[0]]) for row in sample_rows if row[0] in sim]
    if len(pairs) < 3:
        return None
    return correlation([p[0] for p in pairs], [p[1] for p in pairs])


def _print_diagnosis(summary: dict) -> None:
    print(f"audited steps: {summary['n_records']}")
    c = summary.get("skewness_vs_sim_ssl_oracle")
    if c:
        print(f"mean batch skewness vs sim(G_SSL, G_oracle): pearson {c['pearson']:+.4f} "
              f"spearman {c['spearman']:+.4f}")
    anm = summary.get("anm")
    if anm:
        print(f"ANM scores: skewness->conflict {anm['score_sk_to_conflict']:.4f}, "
              f"conflict->skewness {anm['score_conflict_to_sk']:.4f}; verdict {anm['verdict']}")
    else:
        print("ANM test skipped: needs at least 30 audited steps")


REPORT_REQUIRED = ("log.jsonl", "summary.json")


def cmd_report(run_dir) -> dict:
    run_dir = Path(run_dir)
    missing = [f for f in REPORT_REQUIRED if not (run_dir / f).exists()]
    if missing:
        raise FileNotFoundError(f"{run_dir}: missing run files {missing}")
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    written = []

    records = [json.loads(line) for line in (run_dir / "log.jsonl").read_text(encoding="utf-8").splitlines() if line]
    loss_rows = []
    offset = {1: 0}
    s1 = max((r["step"] for r in records if r["stage"] == 1), default=-1) + 1
    offset[2] = s1
    for r in records:
        loss_rows.append([r["stage"], offset[r["stage"]] + r["step"], r["L_total"], r["L_c_s"], r["L_ssl_s"],
                          r["L_ssl_t"], r["retained_count"], r["tau"]])
    written.append(write_csv(out / "loss_curves.csv",
                             ["stage", "step", "L_total", "L_c_s", "L_ssl_s", "L_ssl_t", "retained_count", "tau"],
                             loss_rows))

    summary = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
    conf = summary.get("confusion") or []
    written.append(write_csv(out / "confusion.csv", ["true_class", "predicted_class", "count"],
                             [[i, j, n] for i, row in enumerate(conf) for j, n in enumerate(row)]))
    text = [f"target accuracy: {summary.get('target_accuracy')}",
            f"source accuracy: {summary.get('source_accuracy')}"]

    if (run_dir / "conflicts.csv").exists():
        conflicts = read_csv(run_dir / "conflicts.csv", CONFLICT_SCHEMA)
        written.append(write_csv(out / "conflict_curves.csv", list(CONFLICT_SCHEMA),
                                 [[r[k] for k in CONFLICT_SCHEMA] for r in conflicts]))
        text.append(f"audited steps: {len(conflicts)}")
    if (run_dir / "sweep.csv").exists():
        rows = read_csv(run_dir / "sweep.csv", SWEEP_SCHEMA)
        groups: dict[tuple, list[float]] = {}
        for r in rows:
            groups.setdefault((r["param"], r["value"], r["step"]), []).append(r["target_accuracy"])
        written.append(write_csv(out / "sweep_curves.csv", ["param", "value", "step", "mean_target_accuracy",
                                                            "std_target_accuracy", "n"],
                                 [[p, v, s, float(np.mean(a)), float(np.std(a)), len(a)]
                                  for (p, v, s), a in sorted(groups.items())]))
        for param, means in _final_means(rows).items():
            text += [f"{param}={v:g}: final target accuracy {m:.4f}" for v, m in means.items()]
    if (run_dir / "pilot.csv").exists():
        rows = read_csv(run_dir / "pilot.csv", PILOT_SCHEMA)
        text += [f"pilot {r['mode']} seed {r['seed']}: {r['target_accuracy']:.4f}" for r in rows]
    (out / "summary.txt").write_text("\n".join(text) + "\n", encoding="utf-8")
    print("\n".join(text))
    return {"files": [str(p) for p in written], "summary": text}


def _final_means(rows: list[dict]) -> dict[str, dict[float, float]]:
    out = {}
    for param in sorted({r["param"] for r in rows}):
        sel = [[r["param"], r["value"], r["seed"], r["stage"], r["step"], r["target_accuracy"]]
               for r in rows if r["param"] == param]
        out[param] = final_sweep_means(sel)
    return out


def cmd_pilot(cfg: ExperimentConfig) -> dict:
    out = _out_dir(cfg)
    table = pilot_random_freeze(cfg.train_config(), cfg.benchmark(), list(cfg.seeds), out / "pilot.csv",
                                cfg.workers)
    for mode, stats in table.items():
        print(f"{mode:14s} target accuracy {stats['mean']:.4f} +/- {stats['std']:.4f} (n={stats['n']})")
    _write_json(out / "pilot_summary.json", table)
    return table


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "diagnose": cmd_diagnose,
    "pilot": cmd_pilot,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="skewgrad", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(list(COMMANDS) + ["report"]))
    parser.add_argument("run_dir", nargs="?", help="run directory (report only)")
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("-v", "--verbose", action="store_true")
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            overrides = _parse_overrides(rest)
            run_dir = args.run_dir or load_config(args.config, overrides).output_dir
            cmd_report(run_dir)
            return EXIT_OK
        if args.run_dir is not None:
            raise ConfigError(f"unexpected argument {args.run_dir!r}")
        cfg = load_config(args.config, _parse_overrides(rest))
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
