"""Radial point saliency and the skewness of its score distribution."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import PointCloud
from .model import ModelParams, classify, encode_points

DEFAULT_ALPHA = 1.0
MIN_RADIUS = 1e-9


@dataclass(frozen=True)
class SaliencyMap:
    scores: np.ndarray
    alpha: float
    core: np.ndarray
    sample_id: int


def spherical_core(points: np.ndarray) -> np.ndarray:
    """Per-axis median; for even N the mean of the two middle values."""
    return np.median(np.asarray(points, dtype=np.float64), axis=0)


def _frozen(params: ModelParams) -> ModelParams:
    # same values, not tracked: the saliency pass must not touch training grads
    state = {name: t.values for name, t in params.named_tensors()}
    frozen = ModelParams.from_state(state)
    for _, t in frozen.named_tensors():
        t.requires_grad = False
    return frozen


def point_gradients(params: ModelParams, clouds: Sequence[np.ndarray], labels: Sequence[int]) -> list[np.ndarray]:
    """d(cross-entropy of sample b)/d(points of sample b), one backward pass for the batch."""
    frozen = _frozen(params)
    lengths = [len(c) for c in clouds]
    pts = ad.Tensor(np.concatenate(clouds, axis=0), requires_grad=True)
    logits = classify(frozen, encode_points(frozen, pts, lengths))
    # sum, not mean: keeps each sample's gradient equal to that of its own loss
    ad.backward(ad.sum_all(ad.softmax_cross_entropy_per_sample(logits, labels)))
    grad = np.zeros_like(pts.values) if pts.grad is None else pts.grad
    bounds = np.cumsum([0] + lengths)
    return [grad[bounds[i]:bounds[i + 1]] for i in range(len(clouds))]


def radial_scores(points: np.ndarray, grad: np.ndarray, alpha: float, core: np.ndarray | None = None) -> np.ndarray:
    """s_i = -(dL/dr_i) * r_i^(1+alpha) with dL/dr_i = g_i . (p_i - c) / r_i."""
    if core is None:
        core = spherical_core(points)
    offset = points - core
    r = np.sqrt((offset ** 2).sum(axis=1))
    safe = np.where(r < MIN_RADIUS, 1.0, r)
    dl_dr = (grad * offset).sum(axis=1) / safe
    scores = -dl_dr * safe ** (1.0 + alpha)
    scores[r < MIN_RADIUS] = 0.0
    return scores


def saliency_maps(params: ModelParams, clouds: Sequence[PointCloud], labels: Sequence[int],
                  alpha: float = DEFAULT_ALPHA) -> list[SaliencyMap]:
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if len(clouds) != len(labels):
        raise ValueError(f"{len(clouds)} clouds but {len(labels)} labels")
    grads = point_gradients(params, [c.points for c in clouds], labels)
    out = []
    for pc, g in zip(clouds, grads):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite saliency gradient for sample {pc.id}")
        core = spherical_core(pc.points)
        out.append(SaliencyMap(radial_scores(pc.points, g, alpha, core), float(alpha), core, pc.id))
    return out


def saliency_map(params: ModelParams, pc: PointCloud, label: int, alpha: float = DEFAULT_ALPHA) -> SaliencyMap:
    return saliency_maps(params, [pc], [label], alpha)[0]


def skewness(scores) -> float:
    """Population skewness sum((S - mean)^3) / (n * sigma^3); 0 when sigma < 1e-12."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    n = s.size
    if n < 3:
        raise ValueError("skewness needs at least 3 scores")
    dev = s - s.mean()
    sigma = np.sqrt((dev ** 2).mean())
    if sigma < 1e-12:
        return 0.0
    return float((dev ** 3).sum() / (n * sigma ** 3))
