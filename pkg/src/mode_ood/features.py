"""Feature-map data model, the .fmb binary interchange format, global
pooling, and the synthetic dataset generator used by desk-scale runs.

A feature map is an H x W grid of E-dimensional local vectors plus an
integer class label (-1 means unlabeled / OOD test data). Payloads are
stored as little-endian f32 on disk; all in-memory arithmetic is f64.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, CorruptionError, FormatError, ValidationError

FMB_MAGIC = b"MODEFMB1"
FMB_VERSION = 1

# Number of shared, class-independent clutter prototypes in the synthetic
# generator. Kept small so the clutter subspace is low-dimensional.
_N_CLUTTER_PROTOS = 3


def _philox(seed: int) -> np.random.Generator:
    """Seedable, splittable, counter-based PRNG used everywhere."""
    return np.random.Generator(np.random.Philox(seed))


class FeatureMap:
    """One example's (H, W, E) grid of local vectors with a class label."""

    __slots__ = ("values", "label")

    def __init__(self, values, label: int = -1):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if arr.ndim != 3:
            raise ContractError(f"feature map must be 3-d (H, W, E), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ContractError(f"H, W, E must all be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("feature map contains non-finite values")
        arr.setflags(write=False)
        self.values = arr
        self.label = int(label)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def positions(self) -> np.ndarray:
        """The (H*W, E) row-major view: position-major, channel fastest."""
        return self.values.reshape(-1, self.values.shape[2])

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        h, w, e = self.shape
        return f"FeatureMap({h}x{w}x{e}, label={self.label})"


class FeatureDataset:
    """An ordered collection of equally shaped feature maps.

    ``shape`` must be given explicitly for empty datasets; otherwise it is
    inferred from the first map. Labels >= 0 must lie in [0, class_count).
    """

    __slots__ = ("maps", "class_count", "shape", "metadata")

    def __init__(self, maps, class_count: int, shape=None, metadata=None):
        maps = list(maps)
        if shape is None:
            if not maps:
                raise ContractError("empty dataset needs an explicit shape")
            shape = maps[0].shape
        shape = tuple(int(s) for s in shape)
        for i, m in enumerate(maps):
            if m.shape != shape:
                raise ValidationError(f"map {i} has shape {m.shape}, expected {shape}")
            if m.label >= class_count:
                raise ValidationError(f"map {i} label {m.label} outside [0, {class_count})")
        self.maps = maps
        self.class_count = int(class_count)
        self.shape = shape
        self.metadata = dict(metadata or {})

    def __len__(self) -> int:
        return len(self.maps)

    def __iter__(self):
        return iter(self.maps)

    def __getitem__(self, i) -> FeatureMap:
        return self.maps[i]

    def labels(self) -> np.ndarray:
        return np.array([m.label for m in self.maps], dtype=np.int64)

    def stacked(self) -> np.ndarray:
        """All maps as one (n, H, W, E) array (copy)."""
        if not self.maps:
            return np.empty((0,) + self.shape)
        return np.stack([m.values for m in self.maps])

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureDataset):
            return NotImplemented
        return (
            self.class_count == other.class_count
            and self.shape == other.shape
            and self.metadata == other.metadata
            and self.maps == other.maps
        )


def global_pool(fmap: FeatureMap) -> np.ndarray:
    """Channel-wise arithmetic mean over all H*W positions."""
    return fmap.values.mean(axis=(0, 1))


def save_features(dataset: FeatureDataset, path) -> None:
    """Write a dataset to ``path`` in the .fmb format (byte-deterministic)."""
    h, w, e = dataset.shape
    parts = [FMB_MAGIC, struct.pack("<5I", FMB_VERSION, len(dataset), h, w, e)]
    parts.append(struct.pack("<I", dataset.class_count))
    for m in dataset.maps:
        parts.append(struct.pack("<i", m.label))
        parts.append(m.values.astype("<f4").tobytes())
    parts.append(struct.pack("<I", len(dataset.metadata)))
    for key, value in dataset.metadata.items():
        kb, vb = key.encode("utf-8"), str(value).encode("utf-8")
        parts.append(struct.pack("<I", len(kb)) + kb + struct.pack("<I", len(vb)) + vb)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CorruptionError(f"{self.path}: truncated at byte {self.off} (need {n} more)")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i32(self) -> int:
        return struct.unpack("<i", self.take(4))[0]


def load_features(path) -> FeatureDataset:
    """Read a .fmb file, validating magic, version, shape and finiteness."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(8) != FMB_MAGIC:
        raise FormatError(f"{path}: bad magic, not a .fmb file")
    version = r.u32()
    if version != FMB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    count, h, w, e = (r.u32() for _ in range(4))
    if min(h, w, e) < 1:
        raise FormatError(f"{path}: invalid shape ({h}, {w}, {e})")
    class_count = r.u32()
    maps = []
    for _ in range(count):
        label = r.i32()
        raw = np.frombuffer(r.take(4 * h * w * e), dtype="<f4").astype(np.float64)
        if not np.isfinite(raw).all():
            raise ValidationError(f"{path}: non-finite payload values")
        maps.append(FeatureMap(raw.reshape(h, w, e), label))
    meta = {}
    for _ in range(r.u32()):
        key = r.take(r.u32()).decode("utf-8")
        meta[key] = r.take(r.u32()).decode("utf-8")
    return FeatureDataset(maps, class_count, shape=(h, w, e), metadata=meta)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic quadrant-signal generator.

    Each ID example carries its class signal only inside one randomly
    designated 2x2 quadrant; every other position holds shared cross-class
    clutter. OOD examples use held-out signal directions, so the global
    mean is clutter-dominated while one local region stays discriminative.
    """

    classes: int = 4
    per_class: int = 50
    height: int = 4
    width: int = 4
    channels: int = 8
    signal_quadrant_strength: float = 1.0
    clutter_strength: float = 1.0
    ood_classes: int = 1
    seed: int = 7


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def gen_synthetic(spec: SynthSpec) -> tuple[FeatureDataset, FeatureDataset, FeatureDataset]:
    """Deterministically generate (train, id_test, ood_test) datasets."""
    h, w, e = spec.height, spec.width, spec.channels
    if h % 2 or w % 2:
        raise ContractError(f"H and W must be even, got {h}x{w}")
    if spec.classes < 2:
        raise ContractError("need at least 2 ID classes")
    if spec.ood_classes < 1:
        raise ContractError("need at least 1 held-out OOD class")
    rng = _philox(spec.seed)
    dirs = _unit_rows(rng.standard_normal((spec.classes + spec.ood_classes, e)))
    protos = _unit_rows(rng.standard_normal((_N_CLUTTER_PROTOS, e)))
    n_quad_rows, n_quad_cols = h // 2, w // 2

    def make_map(direction: np.ndarray, label: int) -> FeatureMap:
        proto_idx = rng.integers(0, _N_CLUTTER_PROTOS, size=(h, w))
        noise = rng.standard_normal((h, w, e))
        vals = spec.clutter_strength * (protos[proto_idx] + 0.5 * noise)
        quad = int(rng.integers(0, n_quad_rows * n_quad_cols))
        r0 = (quad // n_quad_cols) * 2
        c0 = (quad % n_quad_cols) * 2
        qnoise = rng.standard_normal((2, 2, e))
        vals[r0 : r0 + 2, c0 : c0 + 2] = spec.signal_quadrant_strength * (
            direction + 0.25 * qnoise
        )
        return FeatureMap(vals, label)

    meta = {"source": "synthetic", "seed": str(spec.seed)}
    train_maps, id_maps = [], []
    for c in range(spec.classes):
        train_maps.extend(make_map(dirs[c], c) for _ in range(spec.per_class))
    for c in range(spec.classes):
        id_maps.extend(make_map(dirs[c], c) for _ in range(spec.per_class))
    ood_total = spec.classes * spec.per_class
    base, extra = divmod(ood_total, spec.ood_classes)
    ood_maps = []
    for j in range(spec.ood_classes):
        count = base + (1 if j < extra else 0)
        ood_maps.extend(make_map(dirs[spec.classes + j], -1) for _ in range(count))
    return (
        FeatureDataset(train_maps, spec.classes, metadata=dict(meta, split="train")),
        FeatureDataset(id_maps, spec.classes, metadata=dict(meta, split="id_test")),
        FeatureDataset(ood_maps, spec.classes, metadata=dict(meta, split="ood_test")),
    )
