"""Shared point encoder with classification and rotation-prediction heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .data import PointCloud, derive_rng

N_ROTATIONS = 4


@dataclass
class Layer:
    weight: ad.Tensor
    bias: ad.Tensor


@dataclass
class ModelParams:
    encoder: list[Layer]
    cls_head: list[Layer]
    ssl_head: list[Layer]

    @property
    def feature_dim(self) -> int:
        return self.encoder[-1].weight.shape[1]

    @property
    def n_classes(self) -> int:
        return self.cls_head[-1].weight.shape[1]

    @property
    def n_rotations(self) -> int:
        return self.ssl_head[-1].weight.shape[1]

    def named_tensors(self) -> Iterator[tuple[str, ad.Tensor]]:
        """Canonical parameter order: encoder, cls_head, ssl_head; weight before bias."""
        for group in ("encoder", "cls_head", "ssl_head"):
            for i, layer in enumerate(getattr(self, group)):
                yield f"{group}.{i}.weight", layer.weight
                yield f"{group}.{i}.bias", layer.bias

    def encoder_tensors(self) -> list[ad.Tensor]:
        return [t for name, t in self.named_tensors() if name.startswith("encoder.")]

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {name: (np.zeros_like(t.values) if t.grad is None else t.grad.copy())
                for name, t in self.named_tensors()}

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.named_tensors()}

    def copy(self) -> "ModelParams":
        return ModelParams.from_state(self.state())

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "ModelParams":
        groups: dict[str, dict[int, dict[str, np.ndarray]]] = {"encoder": {}, "cls_head": {}, "ssl_head": {}}
        for name, values in state.items():
            group, idx, kind = name.split(".")
            groups[group].setdefault(int(idx), {})[kind] = np.array(values, dtype=np.float64)
        layers = {
            g: [Layer(ad.Tensor(d[i]["weight"], requires_grad=True), ad.Tensor(d[i]["bias"], requires_grad=True))
                for i in sorted(d)]
            for g, d in groups.items()
        }
        params = cls(layers["encoder"], layers["cls_head"], layers["ssl_head"])
        params.check()
        return params

    def check(self) -> None:
        d = self.feature_dim
        if self.cls_head[0].weight.shape[0] != d or self.ssl_head[0].weight.shape[0] != d:
            raise ad.ShapeError(f"head input width must equal encoder output width {d}")
        for name, t in self.named_tensors():
            if not np.all(np.isfinite(t.values)):
                raise FloatingPointError(f"parameter {name} has non-finite values")


def _init_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> Layer:
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
    return Layer(ad.Tensor(w, requires_grad=True), ad.Tensor(np.zeros((1, fan_out)), requires_grad=True))


def init_params(seed: int, hidden: int = 64, feature_dim: int = 128, n_classes: int = 4,
                n_rotations: int = N_ROTATIONS) -> ModelParams:
    rng = derive_rng(seed, 0x1417)
    enc_sizes = [3, hidden, hidden, feature_dim]
    encoder = [_init_layer(rng, a, b) for a, b in zip(enc_sizes[:-1], enc_sizes[1:])]
    cls_head = [_init_layer(rng, feature_dim, hidden), _init_layer(rng, hidden, n_classes)]
    ssl_head = [_init_layer(rng, feature_dim, hidden), _init_layer(rng, hidden, n_rotations)]
    return ModelParams(encoder, cls_head, ssl_head)


def _mlp(x: ad.Tensor, layers: Sequence[Layer], final_relu: bool) -> ad.Tensor:
    for i, layer in enumerate(layers):
        x = ad.add_rowwise(ad.matmul(x, layer.weight), layer.bias)
        if final_relu or i < len(layers) - 1:
            x = ad.relu(x)
    return x


def encode_points(params: ModelParams, points: ad.Tensor, lengths: Sequence[int] | None = None) -> ad.Tensor:
    """Per-point MLP then max-pool; one feature row per segment of ``lengths``."""
    h = _mlp(points, params.encoder, final_relu=True)
    if lengths is None or len(lengths) == 1:
        return ad.max_over_rows(h)
    return ad.segment_max(h, lengths)


def encode(params: ModelParams, pc: PointCloud | ad.Tensor) -> ad.Tensor:
    pts = pc if isinstance(pc, ad.Tensor) else ad.Tensor(pc.points)
    return encode_points(params, pts)


def encode_batch(params: ModelParams, clouds: Sequence[PointCloud | np.ndarray]) -> ad.Tensor:
    arrays = [c.points if isinstance(c, PointCloud) else np.asarray(c) for c in clouds]
    return encode_points(params, ad.Tensor(np.concatenate(arrays, axis=0)), [len(a) for a in arrays])


def classify(params: ModelParams, feature: ad.Tensor) -> ad.Tensor:
    return _mlp(feature, params.cls_head, final_relu=False)


def ssl_predict(params: ModelParams, feature: ad.Tensor) -> ad.Tensor:
    return _mlp(feature, params.ssl_head, final_relu=False)


@dataclass(frozen=True)
class SslSample:
    rotated_points: np.ndarray
    rotation_label: int

    def __post_init__(self):
        if not 0 <= self.rotation_label < N_ROTATIONS:
            raise ValueError(f"rotation_label must lie in [0, {N_ROTATIONS})")


def rotation_z(k: int) -> np.ndarray:
    """Exact rotation by k*90 degrees about z."""
    c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][k % 4]
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def rotate_points(points: np.ndarray, k: int) -> np.ndarray:
    return points @ rotation_z(k).T


def make_ssl_sample(pc: PointCloud, seed: int | None = None, k: int | None = None) -> SslSample:
    """Rotate about z by k*90 degrees; k is drawn from ``seed`` unless given."""
    if k is None:
        k = int(derive_rng(seed, pc.id, 0x2077).integers(N_ROTATIONS))
    return SslSample(rotate_points(pc.points, k), int(k))


class SslTask(Protocol):
    """A label-free auxiliary task producing inputs and targets for the SSL head."""

    n_classes: int

    def make(self, pc: PointCloud, rng: np.random.Generator) -> SslSample: ...


class RotationTask:
    n_classes = N_ROTATIONS

    def make(self, pc: PointCloud, rng: np.random.Generator) -> SslSample:
        return make_ssl_sample(pc, k=int(rng.integers(N_ROTATIONS)))


@dataclass
class LossParts:
    L_c_s: ad.Tensor
    L_ssl_s: ad.Tensor
    L_ssl_t: ad.Tensor
    L_c_t: ad.Tensor | None = None

    def floats(self) -> dict[str, float]:
        out = {"L_c_s": self.L_c_s.item(), "L_ssl_s": self.L_ssl_s.item(), "L_ssl_t": self.L_ssl_t.item()}
        if self.L_c_t is not None:
            out["L_c_t"] = self.L_c_t.item()
        return out


def masked_mean(per_sample: ad.Tensor, lambdas: Sequence[int] | np.ndarray) -> ad.Tensor:
    """Mean of the per-sample column over entries with lambda = 1; exact 0 if none."""
    lam = np.asarray(lambdas, dtype=np.float64).reshape(-1, 1)
    if per_sample.shape != lam.shape:
        raise ad.ShapeError(f"masked mean: losses {per_sample.shape} vs mask {lam.shape}")
    count = lam.sum()
    if count == 0:
        # keeps the graph connected so backward yields exact zeros
        return ad.scale(ad.sum_all(per_sample), 0.0)
    return ad.scale(ad.sum_all(ad.mul_elementwise(per_sample, ad.Tensor(lam))), 1.0 / count)


@dataclass
class BatchForward:
    """Intermediates of one joint forward pass, kept for per-task backward passes."""

    total: ad.Tensor
    parts: LossParts
    weighted: dict[str, ad.Tensor]


def combined_loss(
    params: ModelParams,
    source_batch: Sequence[PointCloud],
    target_batch: Sequence[PointCloud],
    ssl_mask: Sequence[int] | np.ndarray,
    ssl_rotations: Sequence[int] | np.ndarray,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
    source_labels: Sequence[int] | None = None,
    target_cls_labels: Sequence[int] | None = None,
) -> tuple[ad.Tensor, LossParts]:
    fwd = joint_forward(params, source_batch, target_batch, ssl_mask, ssl_rotations, weights,
                        source_labels, target_cls_labels)
    return fwd.total, fwd.parts


def joint_forward(
    params: ModelParams,
    source_batch: Sequence[PointCloud],
    target_batch: Sequence[PointCloud],
    ssl_mask: Sequence[int] | np.ndarray,
    ssl_rotations: Sequence[int] | np.ndarray,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
    source_labels: Sequence[int] | None = None,
    target_cls_labels: Sequence[int] | None = None,
) -> BatchForward:
    """Weighted sum L_c + L_ssl^s + L_ssl^t over one shared forward pass.

    ``ssl_mask`` and ``ssl_rotations`` index the SSL participants in the order
    source batch then target batch. When ``target_cls_labels`` (pseudo-labels)
    are given, their cross-entropy joins the classification term.
    """
    bs, bt = len(source_batch), len(target_batch)
    if bs == 0:
        raise ValueError("combined_loss: empty source batch")
    mask = np.asarray(ssl_mask)
    rots = np.asarray(ssl_rotations, dtype=np.int64)
    if mask.shape != (bs + bt,) or rots.shape != (bs + bt,):
        raise ad.ShapeError(f"ssl mask/rotations must have length {bs + bt}, got {mask.shape} and {rots.shape}")
    if source_labels is None:
        source_labels = [pc.label for pc in source_batch]

    cls_clouds = list(source_batch) + (list(target_batch) if target_cls_labels is not None else [])
    ssl_clouds = [rotate_points(pc.points, k) for pc, k in zip(list(source_batch) + list(target_batch), rots)]
    feats = encode_batch(params, [c.points for c in cls_clouds] + ssl_clouds)
    n_cls = len(cls_clouds)

    cls_logits = classify(params, ad.slice_rows(feats, 0, n_cls))
    L_c_s = ad.softmax_cross_entropy(ad.slice_rows(cls_logits, 0, bs), source_labels)
    L_c_t = None
    if target_cls_labels is not None:
        L_c_t = ad.softmax_cross_entropy(ad.slice_rows(cls_logits, bs, n_cls), target_cls_labels)

    ssl_logits = ssl_predict(params, ad.slice_rows(feats, n_cls, n_cls + bs + bt))
    per_sample = ad.softmax_cross_entropy_per_sample(ssl_logits, rots)
    L_ssl_s = masked_mean(ad.slice_rows(per_sample, 0, bs), mask[:bs])
    if bt:
        L_ssl_t = masked_mean(ad.slice_rows(per_sample, bs, bs + bt), mask[bs:])
    else:
        L_ssl_t = ad.scale(ad.sum_all(per_sample), 0.0)

    w_c, w_s, w_t = weights
    cls_term = L_c_s if L_c_t is None else ad.add(L_c_s, L_c_t)
    weighted = {
        "Cls": ad.scale(cls_term, w_c),
        "SslSource": ad.scale(L_ssl_s, w_s),
        "SslTarget": ad.scale(L_ssl_t, w_t),
    }
    total = ad.add(ad.add(weighted["Cls"], weighted["SslSource"]), weighted["SslTarget"])
    return BatchForward(total, LossParts(L_c_s, L_ssl_s, L_ssl_t, L_c_t), weighted)


def predict_proba(params: ModelParams, clouds: Sequence[PointCloud], chunk: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(clouds), chunk):
        with ad.no_grad():
            logits = classify(params, encode_batch(params, clouds[i:i + chunk])).values
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        out.append(p / p.sum(axis=1, keepdims=True))
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.n_classes))
