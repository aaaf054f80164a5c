"""Gradient-conflict measurements and the statistics used to analyse them."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform
from scipy.stats import rankdata

from . import autodiff as ad
from .data import PointCloud, reveal_labels
from .model import ModelParams, classify, encode_batch, joint_forward


class Task(str, Enum):
    CLS = "Cls"
    SSL_SOURCE = "SslSource"
    SSL_TARGET = "SslTarget"
    SUM = "Sum"
    ORACLE = "Oracle"


@dataclass(frozen=True)
class GradientSnapshot:
    task: Task
    vector: np.ndarray
    step: int = 0

    def __len__(self) -> int:
        return self.vector.size

    def __add__(self, other: "GradientSnapshot") -> np.ndarray:
        return self.vector + other.vector


@dataclass(frozen=True)
class ConflictRecord:
    step: int
    sim_sum_oracle: float
    sim_ssl_cls: float
    sim_ssl_oracle: float
    mean_skewness: float

    FIELDS = ("step", "sim_sum_oracle", "sim_ssl_cls", "sim_ssl_oracle", "mean_skewness")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class TaskBatch:
    """Everything needed to rebuild one training step's losses."""

    source: Sequence[PointCloud]
    target: Sequence[PointCloud]
    ssl_mask: np.ndarray
    ssl_rotations: np.ndarray
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    source_labels: Sequence[int] | None = None
    target_cls_labels: Sequence[int] | None = None
    # the hidden-label originals of ``target``, only read for the oracle
    oracle_target: Sequence[PointCloud] | None = None


def _encoder_flat(params: ModelParams) -> np.ndarray:
    return np.concatenate([
        (np.zeros_like(t.values) if t.grad is None else t.grad).ravel() for t in params.encoder_tensors()
    ])


def _fresh(params: ModelParams) -> ModelParams:
    return ModelParams.from_state(params.state())


def oracle_loss(params: ModelParams, target: Sequence[PointCloud]) -> ad.Tensor:
    """Target cross-entropy against the true (hidden) labels."""
    if not target:
        raise ValueError("oracle gradient needs a non-empty target batch")
    with reveal_labels("oracle_gradient"):
        labels = [pc.label for pc in target]
    return ad.softmax_cross_entropy(classify(params, encode_batch(params, target)), labels)


def grad_for_task(params: ModelParams, batch: TaskBatch, task: Task | str, step: int = 0) -> GradientSnapshot:
    """Shared-encoder gradient of one named loss from its own forward/backward pass."""
    task = Task(task)
    local = _fresh(params)
    if task == Task.ORACLE:
        loss = oracle_loss(local, batch.oracle_target if batch.oracle_target is not None else batch.target)
    else:
        if not batch.source:
            raise ValueError("grad_for_task: empty batch")
        fwd = joint_forward(local, batch.source, batch.target, batch.ssl_mask, batch.ssl_rotations,
                            batch.weights, batch.source_labels, batch.target_cls_labels)
        loss = fwd.total if task == Task.SUM else fwd.weighted[task.value]
    ad.backward(loss)
    return GradientSnapshot(task, _encoder_flat(local), step)


def task_snapshots(params: ModelParams, batch: TaskBatch, step: int = 0,
                   oracle: bool = True) -> dict[Task, GradientSnapshot]:
    """All snapshots of one step; the task losses share a single forward pass."""
    local = _fresh(params)
    fwd = joint_forward(local, batch.source, batch.target, batch.ssl_mask, batch.ssl_rotations,
                        batch.weights, batch.source_labels, batch.target_cls_labels)
    out = {}
    for task in (Task.CLS, Task.SSL_SOURCE, Task.SSL_TARGET, Task.SUM):
        local.zero_grad()
        loss = fwd.total if task == Task.SUM else fwd.weighted[task.value]
        ad.backward(loss, retain_graph=task != Task.SUM)
        out[task] = GradientSnapshot(task, _encoder_flat(local), step)
    if oracle:
        local.zero_grad()
        tgt = batch.oracle_target if batch.oracle_target is not None else batch.target
        ad.backward(oracle_loss(local, tgt))
        out[Task.ORACLE] = GradientSnapshot(Task.ORACLE, _encoder_flat(local), step)
    return out


def cosine_similarity(a: GradientSnapshot | np.ndarray, b: GradientSnapshot | np.ndarray) -> float:
    """a.b / (|a||b|), defined as 0 when either norm is below 1e-12."""
    va = a.vector if isinstance(a, GradientSnapshot) else np.asarray(a, dtype=np.float64)
    vb = b.vector if isinstance(b, GradientSnapshot) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ValueError(f"cosine_similarity: length mismatch {va.size} vs {vb.size}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def conflict_record(snaps: dict[Task, GradientSnapshot], step: int, mean_skewness: float) -> ConflictRecord:
    ssl = snaps[Task.SSL_SOURCE].vector + snaps[Task.SSL_TARGET].vector
    return ConflictRecord(
        step=step,
        sim_sum_oracle=cosine_similarity(snaps[Task.SUM], snaps[Task.ORACLE]),
        sim_ssl_cls=cosine_similarity(ssl, snaps[Task.CLS].vector),
        sim_ssl_oracle=cosine_similarity(ssl, snaps[Task.ORACLE].vector),
        mean_skewness=float(mean_skewness),
    )


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((dx ** 2).sum()), np.sqrt((dy ** 2).sum())
    if sx < 1e-15 * max(1.0, np.abs(x).max()) or sy < 1e-15 * max(1.0, np.abs(y).max()):
        return 0.0
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def correlation(x: Sequence[float], y: Sequence[float]) -> dict[str, float]:
    """Pearson and Spearman (average ranks for ties); 0 for a constant series."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"correlation: length mismatch {x.size} vs {y.size}")
    if x.size < 3:
        raise ValueError("correlation needs at least 3 pairs")
    return {
        "pearson": _pearson(x, y),
        "spearman": _pearson(rankdata(x, method="average"), rankdata(y, method="average")),
    }


def _standardize(v: np.ndarray) -> np.ndarray:
    sd = v.std()
    if sd < 1e-12:
        raise ValueError("series has zero variance")
    return (v - v.mean()) / sd


def _gaussian_gram(v: np.ndarray, bandwidth: float | None = None) -> np.ndarray:
    d2 = squareform(pdist(v.reshape(len(v), -1), "sqeuclidean"))
    if bandwidth is None:
        bandwidth = median_bandwidth(v)
    return np.exp(-d2 / (2.0 * bandwidth ** 2))


def median_bandwidth(v: np.ndarray) -> float:
    d = pdist(np.asarray(v, dtype=np.float64).reshape(len(v), -1))
    med = np.median(d[d > 0]) if np.any(d > 0) else 1.0
    return float(med)


def _hsic(k: np.ndarray, l: np.ndarray) -> float:
    n = k.shape[0]
    h = np.eye(n) - 1.0 / n
    return float(np.trace(k @ h @ l @ h)) / (n - 1) ** 2


def kernel_ridge_fit(x: np.ndarray, y: np.ndarray, ridge: float = 1e-3) -> np.ndarray:
    """In-sample predictions of Gaussian-kernel ridge regression, median-heuristic bandwidth."""
    k = _gaussian_gram(x)
    n = len(x)
    coef = np.linalg.solve(k + ridge * n * np.eye(n), y - y.mean())
    return k @ coef + y.mean()


def anm_fit_score(x: Sequence[float], y: Sequence[float], ridge: float = 1e-3) -> float:
    """Dependence between the putative cause ``x`` and the residual of y ~ f(x).

    Both series are standardized. The residual kernel uses the bandwidth of the
    standardized effect, so an almost perfect fit leaves nearly constant
    residual kernels and a score near 0. The HSIC is normalized by that of
    (y, y) and (x, x); lower means the x -> y direction is more plausible.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"anm_fit_score: length mismatch {x.size} vs {y.size}")
    if x.size < 30:
        raise ValueError("anm_fit_score needs at least 30 pairs")
    xs, ys = _standardize(x), _standardize(y)
    resid = ys - kernel_ridge_fit(xs, ys, ridge)
    kx = _gaussian_gram(xs)
    bw_y = median_bandwidth(ys)
    ke = _gaussian_gram(resid, bw_y)
    ky = _gaussian_gram(ys, bw_y)
    denom = np.sqrt(_hsic(kx, kx) * _hsic(ky, ky))
    return _hsic(ke, kx) / denom


def anm_direction_test(skewness_series: Sequence[float], conflict_series: Sequence[float]) -> dict:
    forward = anm_fit_score(skewness_series, conflict_series)
    reverse = anm_fit_score(conflict_series, skewness_series)
    return {
        "score_sk_to_conflict": forward,
        "score_conflict_to_sk": reverse,
        "verdict": "skewness->conflict" if forward <= reverse else "conflict->skewness",
    }
