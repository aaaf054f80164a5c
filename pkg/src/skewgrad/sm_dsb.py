"""Skewness-based selection of samples allowed to contribute SSL gradients.

The measurer scores each sample by the skewness of its saliency map; the
selector thresholds those scores at an adaptive, batch-relative cut and drops
samples at or above it from the self-supervised loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import Domain, PointCloud, derive_rng
from .model import ModelParams, masked_mean
from .saliency import DEFAULT_ALPHA, saliency_maps, skewness

DEFAULT_BETA = 0.7
DEFAULT_PERTURB_MU = 0.1
DEFAULT_PERTURB_SIGMA = 0.02


@dataclass(frozen=True)
class SkewnessRecord:
    sample_id: int
    skewness: float
    domain: Domain
    perturbed: bool = False

    def __post_init__(self):
        if not math.isfinite(self.skewness):
            raise ValueError(f"skewness of sample {self.sample_id} is not finite")


@dataclass(frozen=True)
class SelectionMask:
    lambdas: np.ndarray
    tau: float
    beta: float
    records: tuple[SkewnessRecord, ...]

    @property
    def retained(self) -> int:
        return int(self.lambdas.sum())

    def __len__(self) -> int:
        return len(self.lambdas)


def measure_batch(params: ModelParams, batch: Sequence[PointCloud], labels: Sequence[int],
                  alpha: float = DEFAULT_ALPHA) -> list[SkewnessRecord]:
    maps = saliency_maps(params, batch, labels, alpha)
    return [SkewnessRecord(pc.id, skewness(m.scores), pc.domain) for pc, m in zip(batch, maps)]


def threshold_index(batch_size: int, beta: float) -> int:
    """1-indexed rank of the threshold: round-half-up of B*beta, clamped to [1, B]."""
    # the small epsilon absorbs representation error such as 10 * 0.35 = 3.4999999999999996
    k = math.floor(batch_size * beta + 0.5 + 1e-9)
    return min(max(k, 1), batch_size)


def select(records: Sequence[SkewnessRecord], beta: float = DEFAULT_BETA,
           invert_selection: bool = False) -> SelectionMask:
    """lambda_b = 0 where sk_b >= tau, tau the round(B*beta)-th smallest score.

    ``invert_selection`` keeps only samples at or above tau instead; it exists
    for experiments with the opposite reading of the selection rule.
    """
    b = len(records)
    if b < 2:
        raise ValueError(f"select needs a batch of at least 2 scores, got {b}")
    if not 0 < beta <= 1:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    scores = np.array([r.skewness for r in records], dtype=np.float64)
    tau = float(np.sort(scores)[threshold_index(b, beta) - 1])
    keep = scores >= tau if invert_selection else scores < tau
    return SelectionMask(keep.astype(np.int64), tau, float(beta), tuple(records))


def perturb_target_scores(records: Sequence[SkewnessRecord], seed: int, mu: float = DEFAULT_PERTURB_MU,
                          sigma: float = DEFAULT_PERTURB_SIGMA) -> list[SkewnessRecord]:
    """Shift target-domain scores by Normal(mu, sigma) keyed on (seed, sample id)."""
    out = []
    for r in records:
        if r.domain != Domain.TARGET:
            out.append(r)
            continue
        noise = derive_rng(seed, r.sample_id, 0x9E27).normal() * sigma if sigma > 0 else 0.0
        out.append(replace(r, skewness=r.skewness + mu + noise, perturbed=True))
    return out


def masked_ssl_loss(per_sample_ssl_losses: ad.Tensor, mask: SelectionMask | Sequence[int]) -> ad.Tensor:
    """Mean of the selected per-sample SSL losses (B x 1 column); exact zero if none."""
    lambdas = mask.lambdas if isinstance(mask, SelectionMask) else np.asarray(mask)
    if per_sample_ssl_losses.shape[0] != len(lambdas):
        raise ad.ShapeError(
            f"masked_ssl_loss: {per_sample_ssl_losses.shape[0]} losses vs {len(lambdas)} mask entries"
        )
    return masked_mean(per_sample_ssl_losses, lambdas)
