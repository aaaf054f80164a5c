"""Two-stage multi-task UDA training: joint SSL + source classification, then
pseudo-label fine-tuning, with skewness-based SSL sample selection."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import DomainDataset, PointCloud, derive_rng, reveal_labels
from .diagnostics import TaskBatch, conflict_record, task_snapshots
from .model import ModelParams, N_ROTATIONS, init_params, joint_forward, predict_proba
from .sm_dsb import measure_batch, perturb_target_scores, select

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class SelectionMode(str, Enum):
    SM_DSB = "sm-dsb"
    ALL = "all"
    RANDOM_FREEZE = "random-freeze"
    NONE = "none"


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, stage: int):
        super().__init__(f"loss became non-finite at stage {stage}, step {step}")
        self.step = step
        self.stage = stage


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.7
    learning_rate: float = 0.05
    batch_size: int = 32
    steps_stage1: int = 4000
    steps_stage2: int = 2000
    seed: int = 0
    perturb_mu: float = 0.1
    perturb_sigma: float = 0.02
    selection_mode: SelectionMode = SelectionMode.SM_DSB
    freeze_fraction: float = 0.5
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    optimizer: str = "sgd"
    hidden: int = 64
    feature_dim: int = 128
    invert_selection: bool = False
    pseudo_label_threshold: float = 0.0
    diagnostics_stride: int = 0

    def __post_init__(self):
        object.__setattr__(self, "selection_mode", SelectionMode(self.selection_mode))
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        if not 0 < self.beta <= 1:
            raise ValueError("beta: must lie in (0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate: must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size: must be >= 2")
        if self.alpha <= 0:
            raise ValueError("alpha: must be > 0")
        if not 0 <= self.freeze_fraction <= 1:
            raise ValueError("freeze_fraction: must lie in [0, 1]")
        if len(self.loss_weights) != 3:
            raise ValueError("loss_weights: expected three weights (cls, ssl_source, ssl_target)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer: must be 'sgd' or 'adam'")
        if self.steps_stage1 < 0 or self.steps_stage2 < 0:
            raise ValueError("steps_stage1/steps_stage2: must be >= 0")
        if self.diagnostics_stride < 0:
            raise ValueError("diagnostics_stride: must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selection_mode"] = self.selection_mode.value
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**d)


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float) -> ModelParams:
    new = {}
    for name, t in params.named_tensors():
        g = grads.get(name)
        if g is None:
            new[name] = t.values.copy()
            continue
        if g.shape != t.shape:
            raise ad.ShapeError(f"sgd_step: gradient for {name} has shape {g.shape}, parameter {t.shape}")
        new[name] = t.values - lr * g
    return ModelParams.from_state(new)


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> ModelParams:
        self.t += 1
        new = {}
        for name, t in params.named_tensors():
            g = grads[name]
            m = self.m[name] = self.b1 * self.m.get(name, 0.0) + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v.get(name, 0.0) + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            new[name] = t.values - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return ModelParams.from_state(new)

    def state(self) -> dict:
        return {"t": self.t,
                "m": {k: v.tolist() for k, v in self.m.items()},
                "v": {k: v.tolist() for k, v in self.v.items()}}

    def load(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}


@dataclass
class EvalResult:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "per_class": self.per_class.tolist(),
                "confusion": self.confusion.tolist()}


def evaluate(params: ModelParams, dataset: DomainDataset | Sequence[PointCloud], n_classes: int | None = None) -> EvalResult:
    """Accuracy and confusion matrix (rows true class, columns prediction)."""
    clouds = list(dataset)
    k = n_classes or params.n_classes
    with reveal_labels("evaluate"):
        truth = np.array([pc.label for pc in clouds], dtype=np.int64)
    pred = np.argmax(predict_proba(params, clouds), axis=1)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    totals = conf.sum(axis=1)
    per_class = np.divide(np.diag(conf), totals, out=np.zeros(k), where=totals > 0)
    acc = float(np.trace(conf) / conf.sum()) if conf.sum() else 0.0
    return EvalResult(acc, per_class, conf)


def generate_pseudo_labels(params: ModelParams, target: DomainDataset) -> DomainDataset:
    """Copy of ``target`` labeled with the arg-max class (lowest index on ties)."""
    proba = predict_proba(params, list(target))
    labels = np.argmax(proba, axis=1)
    samples = tuple(
        replace(pc, _label=int(y), hidden=False, pseudo=True, confidence=float(p[y]))
        for pc, y, p in zip(target, labels, proba)
    )
    return DomainDataset(samples, target.class_count, target.domain, target.seed)


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        self.records.append(rec)

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TrainingLog":
        with open(path, encoding="utf-8") as fh:
            return cls([json.loads(line) for line in fh if line.strip()])

    def __len__(self) -> int:
        return len(self.records)


class Trainer:
    """One training stage as a resumable, seeded step loop.

    Stage 1 scores only source samples and always keeps target SSL terms;
    stage 2 also scores pseudo-labeled target samples (with perturbed scores)
    and adds their cross-entropy to the classification term.
    """

    def __init__(self, config: TrainConfig, source: DomainDataset, target: DomainDataset,
                 params: ModelParams | None = None, stage: int = 1,
                 oracle_target: DomainDataset | None = None, step_offset: int = 0):
        if stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if stage == 2 and any(pc.hidden for pc in target):
            raise ValueError("stage 2 needs a pseudo-labeled target dataset")
        if min(len(source), len(target)) < config.batch_size:
            raise ValueError("datasets must hold at least batch_size samples")
        self.config = config
        self.source = source
        self.target = target
        self.oracle_target = oracle_target if oracle_target is not None else (target if stage == 1 else None)
        self.stage = stage
        self.params = params if params is not None else init_params(
            config.seed, config.hidden, config.feature_dim, source.class_count)
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, stage, 0x7EA1]))
        self.step_index = 0
        # global step of this stage's first step, used to label conflict records
        self.step_offset = step_offset
        self.adam = Adam(config.learning_rate) if config.optimizer == "adam" else None
        self.log = TrainingLog()
        self.conflicts: list = []
        # per-sample rows [step, sample_id, domain, skewness, selected] of audited steps
        self.sample_records: list[list] = []

    @property
    def total_steps(self) -> int:
        return self.config.steps_stage1 if self.stage == 1 else self.config.steps_stage2

    def _audit_now(self) -> bool:
        stride = self.config.diagnostics_stride
        # every stride-th global step, so a stride beyond the run length audits nothing
        due = (self.step_offset + self.step_index + 1) % stride == 0 if stride > 0 else False
        return due and self.oracle_target is not None

    def _ssl_mask(self, src, tgt, step_seed):
        cfg = self.config
        b_s, b_t = len(src), len(tgt)
        mode = cfg.selection_mode
        records = None
        mask = None
        if mode == SelectionMode.SM_DSB or self._audit_now():
            records = measure_batch(self.params, src, [pc.label for pc in src], cfg.alpha)
            if self.stage == 2:
                records += measure_batch(self.params, tgt, [pc.label for pc in tgt], cfg.alpha)
        if mode == SelectionMode.SM_DSB:
            if self.stage == 1:
                sel = select(records, cfg.beta, cfg.invert_selection)
                mask = np.concatenate([sel.lambdas, np.ones(b_t, dtype=np.int64)])
            else:
                scored = perturb_target_scores(records, step_seed, cfg.perturb_mu, cfg.perturb_sigma)
                sel = select(scored, cfg.beta, cfg.invert_selection)
                mask = sel.lambdas
            tau = sel.tau
        elif mode == SelectionMode.ALL:
            mask, tau = np.ones(b_s + b_t, dtype=np.int64), None
        elif mode == SelectionMode.NONE:
            mask, tau = np.zeros(b_s + b_t, dtype=np.int64), None
        else:
            frng = derive_rng(step_seed, 0xF4EE)
            parts = []
            for b in (b_s, b_t):
                m = np.ones(b, dtype=np.int64)
                m[frng.permutation(b)[:math.floor(b * cfg.freeze_fraction)]] = 0
                parts.append(m)
            mask, tau = np.concatenate(parts), None
        return mask, tau, records

    def draw_batch(self):
        b = self.config.batch_size
        src_idx = self.rng.choice(len(self.source), size=b, replace=False)
        tgt_idx = self.rng.choice(len(self.target), size=b, replace=False)
        rots = self.rng.integers(0, N_ROTATIONS, size=2 * b)
        step_seed = int(self.rng.integers(2**31))
        return src_idx, tgt_idx, rots, step_seed

    def step(self) -> dict:
        cfg = self.config
        src_idx, tgt_idx, rots, step_seed = self.draw_batch()
        src = [self.source[i] for i in src_idx]
        tgt = [self.target[i] for i in tgt_idx]
        mask, tau, records = self._ssl_mask(src, tgt, step_seed)
        tgt_labels = [pc.label for pc in tgt] if self.stage == 2 else None
        batch = TaskBatch(src, tgt, mask, rots, cfg.loss_weights, None, tgt_labels,
                          [self.oracle_target[i] for i in tgt_idx] if self.oracle_target is not None else None)

        rec = {"stage": self.stage, "step": self.step_index}
        mean_sk = float(np.mean([r.skewness for r in records])) if records else None
        if self._audit_now():
            global_step = self.step_offset + self.step_index
            snaps = task_snapshots(self.params, batch, global_step)
            conflict = conflict_record(snaps, global_step, mean_sk)
            self.conflicts.append(conflict)
            self.sample_records += [[global_step, r.sample_id, r.domain.value, r.skewness, int(m)]
                                    for r, m in zip(records, mask)]
            rec.update({k: v for k, v in zip(conflict.FIELDS[1:4], conflict.row()[1:4])})

        self.params.zero_grad()
        fwd = joint_forward(self.params, src, tgt, mask, rots, cfg.loss_weights, None, tgt_labels)
        total = fwd.total.item()
        if not math.isfinite(total):
            raise TrainingDivergence(self.step_index, self.stage)
        ad.backward(fwd.total)
        grads = self.params.grads()
        if self.adam is not None:
            self.params = self.adam.step(self.params, grads)
        else:
            self.params = sgd_step(self.params, grads, cfg.learning_rate)

        rec.update({"L_total": total, **fwd.parts.floats(),
                    "retained_count": int(mask.sum()), "tau": tau, "mean_skewness": mean_sk})
        self.log.append(rec)
        self.step_index += 1
        return rec

    def run(self, n_steps: int | None = None) -> tuple[ModelParams, TrainingLog]:
        remaining = self.total_steps - self.step_index if n_steps is None else n_steps
        for _ in range(remaining):
            self.step()
        return self.params, self.log

    def checkpoint(self) -> dict:
        layers = [{"name": n, "shape": list(t.shape), "values": t.values.ravel().tolist()}
                  for n, t in self.params.named_tensors()]
        ckpt = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "stage": self.stage,
            "step": self.step_index,
            "step_offset": self.step_offset,
            "layers": layers,
            "rng_state": self.rng.bit_generator.state,
        }
        if self.adam is not None:
            ckpt["optimizer_state"] = self.adam.state()
        return ckpt

    @classmethod
    def from_checkpoint(cls, ckpt: dict, source: DomainDataset, target: DomainDataset,
                        oracle_target: DomainDataset | None = None) -> "Trainer":
        config = TrainConfig.from_dict(ckpt["config"])
        trainer = cls(config, source, target, params_from_checkpoint(ckpt), ckpt["stage"], oracle_target)
        trainer.rng.bit_generator.state = ckpt["rng_state"]
        trainer.step_index = int(ckpt["step"])
        trainer.step_offset = int(ckpt.get("step_offset", 0))
        if trainer.adam is not None:
            trainer.adam.load(ckpt["optimizer_state"])
        return trainer


def params_from_checkpoint(ckpt: dict) -> ModelParams:
    state = {}
    for layer in ckpt["layers"]:
        values = np.array(layer["values"], dtype=np.float64)
        shape = tuple(layer["shape"])
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"layer {layer['name']}: {values.size} values for shape {shape}")
        state[layer["name"]] = values.reshape(shape)
    return ModelParams.from_state(state)


_REQUIRED = ("version", "config", "stage", "step", "layers", "rng_state")


def save_checkpoint(trainer: Trainer, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(trainer.checkpoint()), encoding="utf-8")
    tmp.replace(path)


def read_checkpoint(path) -> dict:
    """Parse and validate a checkpoint file completely before anything uses it."""
    try:
        ckpt = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if not isinstance(ckpt, dict) or any(k not in ckpt for k in _REQUIRED):
        raise CheckpointError(f"{path}: checkpoint missing fields")
    if ckpt["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {ckpt['version']}, expected {CHECKPOINT_VERSION}")
    try:
        params_from_checkpoint(ckpt)
        TrainConfig.from_dict(ckpt["config"])
        np.random.default_rng().bit_generator.state = ckpt["rng_state"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid checkpoint contents ({exc})") from None
    return ckpt


def load_checkpoint(path, source: DomainDataset, target: DomainDataset,
                    oracle_target: DomainDataset | None = None) -> Trainer:
    return Trainer.from_checkpoint(read_checkpoint(path), source, target, oracle_target)


def train_stage1(config: TrainConfig, source: DomainDataset, target: DomainDataset) -> tuple[ModelParams, TrainingLog]:
    return Trainer(config, source, target, stage=1).run()


def train_stage2(config: TrainConfig, source: DomainDataset, pseudo_target: DomainDataset,
                 params: ModelParams, oracle_target: DomainDataset | None = None) -> tuple[ModelParams, TrainingLog]:
    return Trainer(config, source, pseudo_target, params, stage=2, oracle_target=oracle_target).run()


@dataclass
class RunResult:
    params: ModelParams
    stage1_params: ModelParams
    logs: TrainingLog
    conflicts: list
    pseudo_target: DomainDataset
    sample_records: list = field(default_factory=list)
    trainers: tuple = ()


def run_two_stage(config: TrainConfig, source: DomainDataset, target: DomainDataset) -> RunResult:
    """Stage 1, pseudo-labels, stage 2. Target true labels reach only the oracle."""
    t1 = Trainer(config, source, target, stage=1)
    stage1_params, log1 = t1.run()
    pseudo = generate_pseudo_labels(stage1_params, target)
    if config.pseudo_label_threshold > 0:
        kept = tuple(pc for pc in pseudo if pc.confidence >= config.pseudo_label_threshold)
        if len(kept) < config.batch_size:
            log.warning("confidence filter keeps %d samples; using all pseudo-labels", len(kept))
        else:
            pseudo = DomainDataset(kept, pseudo.class_count, pseudo.domain, pseudo.seed)
    oracle = None
    if config.diagnostics_stride:
        by_id = {pc.id: pc for pc in target}
        oracle = DomainDataset(tuple(by_id[pc.id] for pc in pseudo), target.class_count, target.domain, target.seed)
    t2 = Trainer(config, source, pseudo, stage1_params.copy(), stage=2, oracle_target=oracle,
                 step_offset=config.steps_stage1)
    params, log2 = t2.run()
    return RunResult(params, stage1_params, TrainingLog(log1.records + log2.records),
                     t1.conflicts + t2.conflicts, pseudo, t1.sample_records + t2.sample_records,
                     (t1, t2))
