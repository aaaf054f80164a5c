"""Synthetic source/target point clouds, domain shift, and XYZ persistence."""

from __future__ import annotations

import contextlib
import json
import threading
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MIN_POINTS = 8

PRIMITIVES = ("sphere", "cube", "cylinder", "cone", "torus", "plane")


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


class HiddenLabelError(PermissionError):
    """Raised when a hidden target label is read outside an audited scope."""


class DataFormatError(ValueError):
    pass


_reveal = threading.local()
# every successful read of a hidden label lands here as (reason, sample id)
HIDDEN_LABEL_READS: list[tuple[str, int]] = []


@contextlib.contextmanager
def reveal_labels(reason: str) -> Iterator[None]:
    """Allow hidden target labels to be read inside this block (current thread)."""
    stack = getattr(_reveal, "stack", None)
    if stack is None:
        stack = _reveal.stack = []
    stack.append(reason)
    try:
        yield
    finally:
        stack.pop()


def _reveal_reason() -> str | None:
    stack = getattr(_reveal, "stack", None)
    return stack[-1] if stack else None


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    _label: int
    domain: Domain = Domain.SOURCE
    id: int = 0
    hidden: bool = False
    pseudo: bool = False
    confidence: float | None = None

    @property
    def label(self) -> int:
        if self.hidden:
            reason = _reveal_reason()
            if reason is None:
                raise HiddenLabelError(
                    f"label of target sample {self.id} is hidden; "
                    "only oracle-gradient and evaluation paths may read it"
                )
            HIDDEN_LABEL_READS.append((reason, self.id))
        return self._label

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def validate(self) -> "PointCloud":
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DataFormatError(f"sample {self.id}: points must be N x 3, got {self.points.shape}")
        if self.n_points < MIN_POINTS:
            raise DataFormatError(f"sample {self.id}: needs at least {MIN_POINTS} points, has {self.n_points}")
        if not np.all(np.isfinite(self.points)):
            raise DataFormatError(f"sample {self.id}: non-finite coordinates")
        return self

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return replace(self, points=points)


def make_cloud(points, label: int, domain: Domain = Domain.SOURCE, id: int = 0, hidden: bool = False) -> PointCloud:
    return PointCloud(np.asarray(points, dtype=np.float64), int(label), Domain(domain), int(id), hidden)


@dataclass(frozen=True)
class DomainDataset:
    samples: tuple[PointCloud, ...]
    class_count: int
    domain: Domain
    seed: int

    def __post_init__(self):
        if any(s.domain != self.domain for s in self.samples):
            raise ValueError("all samples must share the dataset domain tag")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique within a dataset")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> PointCloud:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels_hidden(self) -> bool:
        return any(s.hidden for s in self.samples)


@dataclass(frozen=True)
class ShiftConfig:
    jitter_sigma: float = 0.0
    drop_fraction: float = 0.0
    occlusion_halfspace: tuple[tuple[float, float, float], float] | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        if not 0 <= self.drop_fraction < 1:
            raise ValueError("drop_fraction must lie in [0, 1)")
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        if self.occlusion_halfspace is not None:
            normal, _ = self.occlusion_halfspace
            if abs(np.linalg.norm(normal) - 1.0) > 1e-9:
                raise ValueError("occlusion normal must be a unit vector")

    @property
    def is_identity(self) -> bool:
        return (self.jitter_sigma == 0 and self.drop_fraction == 0
                and self.occlusion_halfspace is None and self.scale == 1.0)


IDENTITY_SHIFT = ShiftConfig()

# partial scans seen from one side plus sensor noise
DEFAULT_SHIFT = ShiftConfig(
    jitter_sigma=0.03,
    drop_fraction=0.3,
    occlusion_halfspace=((1 / np.sqrt(2), 0.0, 1 / np.sqrt(2)), 0.5),
    scale=1.0,
)


def derive_rng(*keys: int) -> np.random.Generator:
    """Generator keyed by integers, independent of generation order."""
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


def normalize_unit_sphere(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    radius = np.sqrt((centered ** 2).sum(axis=1)).max()
    if radius == 0:
        raise DataFormatError("cannot normalize a cloud whose points all coincide")
    out = centered / radius
    # a second centering pass removes the residual rounding in the mean
    return np.ascontiguousarray(out - out.mean(axis=0))


def _sample_sphere(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_cube(rng, n):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    pts = np.empty((n, 3))
    for a in range(3):
        others = [b for b in range(3) if b != a]
        sel = axis == a
        pts[sel, a] = sign[sel]
        pts[np.ix_(sel, others)] = uv[sel]
    return pts


def _sample_cylinder(rng, n):
    # radius 1, height 2: lateral area 4*pi, each cap pi
    part = rng.choice(3, size=n, p=[4 / 6, 1 / 6, 1 / 6])
    theta = rng.uniform(0, 2 * np.pi, size=n)
    rad = np.where(part == 0, 1.0, np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(part == 0, rng.uniform(-1, 1, size=n), np.where(part == 1, -1.0, 1.0))
    return np.column_stack([rad * np.cos(theta), rad * np.sin(theta), z])


def _sample_cone(rng, n):
    # base radius 1 at z=-1, apex at z=1; lateral area pi*sqrt(5), base pi
    lateral = np.sqrt(5.0)
    on_side = rng.uniform(0, 1, size=n) < lateral / (lateral + 1.0)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    t = np.sqrt(rng.uniform(0, 1, size=n))  # fraction of the way from apex
    rad = t
    z = np.where(on_side, 1.0 - 2.0 * t, -1.0)
    return np.column_stack([rad * np.cos(theta), rad * np.sin(theta), z])


def _sample_torus(rng, n, major=1.0, minor=0.35):
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 8
        u = rng.uniform(0, 2 * np.pi, size=m)
        v = rng.uniform(0, 2 * np.pi, size=m)
        # area element is proportional to (major + minor*cos v)
        keep = rng.uniform(0, major + minor, size=m) < major + minor * np.cos(v)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out = np.vstack([out, np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])])
    return out[:n]


def _sample_plane(rng, n):
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    return np.column_stack([uv, np.zeros(n)])


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
    "plane": _sample_plane,
}


def generate_shape(class_id: int, n_points: int, seed: int, variation: float = 0.25,
                   id: int = 0, domain: Domain = Domain.SOURCE) -> PointCloud:
    """Uniform surface sample of primitive ``class_id``, normalized to the unit sphere.

    ``variation`` stretches each axis by an independent factor in
    ``[1 - variation, 1 + variation]`` so instances of a class differ.
    """
    if not 0 <= class_id < len(PRIMITIVES):
        raise ValueError(f"unknown class_id {class_id}; expected 0..{len(PRIMITIVES) - 1} {PRIMITIVES}")
    if n_points < MIN_POINTS:
        raise ValueError(f"n_points must be >= {MIN_POINTS}")
    rng = derive_rng(seed, class_id, 0x5A3E)
    # cyclic axis permutation lays the symmetry axis along x, so quarter turns
    # about z change the shape's appearance
    pts = _SAMPLERS[PRIMITIVES[class_id]](rng, n_points)[:, [2, 0, 1]]
    if variation:
        pts = pts * rng.uniform(1 - variation, 1 + variation, size=3)
    return PointCloud(normalize_unit_sphere(pts), int(class_id), Domain(domain), int(id)).validate()


def apply_domain_shift(pc: PointCloud, cfg: ShiftConfig, seed: int) -> PointCloud:
    """Scale, occlude, drop, jitter, renormalize. Label and id are kept."""
    if cfg.is_identity:
        return pc
    rng = derive_rng(seed, pc.id, 0xD0F7)
    pts = pc.points * cfg.scale
    if cfg.occlusion_halfspace is not None:
        normal, offset = cfg.occlusion_halfspace
        pts = pts[pts @ np.asarray(normal, dtype=np.float64) <= offset]
    if cfg.drop_fraction > 0:
        n_drop = int(round(len(pts) * cfg.drop_fraction))
        keep = np.sort(rng.permutation(len(pts))[n_drop:])
        pts = pts[keep]
    if len(pts) < MIN_POINTS:
        raise DataFormatError(
            f"domain shift left {len(pts)} points in sample {pc.id} (need {MIN_POINTS}); "
            "use a smaller drop_fraction or a larger occlusion offset"
        )
    if cfg.jitter_sigma > 0:
        pts = pts + rng.normal(0.0, cfg.jitter_sigma, size=pts.shape)
    return pc.with_points(normalize_unit_sphere(pts)).validate()


def _build_domain(n_per_class, k, n_points, seed, domain, cfg, id_offset, variation):
    samples = []
    for c in range(k):
        for j in range(n_per_class):
            sid = id_offset + c * n_per_class + j
            pc = generate_shape(c, n_points, seed=int(derive_rng(seed, sid).integers(2**31)),
                                variation=variation, id=sid, domain=domain)
            if cfg is not None:
                pc = apply_domain_shift(pc, cfg, seed)
            samples.append(replace(pc, hidden=domain == Domain.TARGET))
    return DomainDataset(tuple(samples), k, domain, seed)


def make_uda_benchmark(n_per_class_source: int, n_per_class_target: int, K: int = 4,
                       cfg: ShiftConfig = DEFAULT_SHIFT, seed: int = 0, n_points: int = 256,
                       variation: float = 0.25) -> tuple[DomainDataset, DomainDataset]:
    """Clean labeled source and shifted target with hidden labels."""
    if not 4 <= K <= len(PRIMITIVES):
        raise ValueError(f"K must lie in [4, {len(PRIMITIVES)}]")
    source = _build_domain(n_per_class_source, K, n_points, seed, Domain.SOURCE, None, 0, variation)
    target = _build_domain(n_per_class_target, K, n_points, seed + 1, Domain.TARGET, cfg,
                           K * n_per_class_source, variation)
    return source, target


def save_xyz(pc: PointCloud, path) -> None:
    lines = [f"# id={pc.id}"]
    lines += [f"{x:.12f} {y:.12f} {z:.12f}" for x, y, z in pc.points]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_xyz_points(path) -> np.ndarray:
    rows = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(" ")
        try:
            if len(parts) != 3:
                raise ValueError
            rows.append([float(p) for p in parts])
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: expected three space-separated reals, got {line!r}") from None
    if not rows:
        raise DataFormatError(f"{path}: no points")
    pts = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise DataFormatError(f"{path}: non-finite coordinate")
    return pts


def load_xyz(path, label: int = 0, domain: Domain = Domain.SOURCE, id: int = 0) -> PointCloud:
    """Read one XYZ file. Label and domain come from the caller (or a manifest)."""
    return make_cloud(read_xyz_points(path), label, domain, id)


def save_dataset(ds: DomainDataset, directory, reveal: bool = False) -> Path:
    """Write one XYZ file per sample plus ``manifest.json``; returns the manifest path.

    Hidden labels are written as null unless ``reveal`` is set.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for pc in ds:
        fname = f"{ds.domain.value}_{pc.id:06d}.xyz"
        save_xyz(pc, directory / fname)
        if pc.hidden and not reveal:
            label = None
        elif pc.hidden:
            with reveal_labels("export"):
                label = pc.label
        else:
            label = pc.label
        entries.append({"id": pc.id, "file": fname, "label": label, "domain": pc.domain.value})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=1) + "\n", encoding="utf-8")
    return manifest


def load_manifest(path) -> list[PointCloud]:
    path = Path(path)
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid manifest JSON ({exc})") from None
    clouds = []
    for e in entries:
        missing = {"id", "file", "label", "domain"} - set(e)
        if missing:
            raise DataFormatError(f"{path}: manifest entry missing {sorted(missing)}")
        domain = Domain(e["domain"])
        hidden = e["label"] is None
        clouds.append(PointCloud(read_xyz_points(path.parent / e["file"]),
                                 -1 if hidden else int(e["label"]), domain, int(e["id"]), hidden))
    return clouds


def stack_points(clouds: Sequence[PointCloud]) -> tuple[np.ndarray, list[int]]:
    return np.concatenate([c.points for c in clouds], axis=0), [c.n_points for c in clouds]
