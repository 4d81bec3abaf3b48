"""Flat exact-L2 nearest-neighbor index over unit-normalized vectors.

The bank stores normalized rows contiguously with per-row provenance
(source example id, scale tag). Queries return the exact k smallest
Euclidean distances with ties broken by ascending row id; distances are
computed in f64 via ||a - b||^2 = 2 - 2 a.b for unit vectors, with tiny
negatives clamped before the square root.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from math import ceil

import numpy as np

from .errors import ContractError, CorruptionError, FormatError, NormalizationError
from .features import _philox

BNK_MAGIC = b"MODEBNK1"
BNK_VERSION = 1

SCALE_GLOBAL = "global"
SCALE_LOCAL = "local"
SCALE_LOCALPP = "local++"
_TAG_CODES = {SCALE_GLOBAL: 0, SCALE_LOCAL: 1, SCALE_LOCALPP: 2}
_TAG_NAMES = {v: k for k, v in _TAG_CODES.items()}


@dataclass
class RepresentationBank:
    """n x E unit-row matrix plus per-row (example_id, scale_tag)."""

    vectors: np.ndarray
    example_ids: np.ndarray
    scale_tags: np.ndarray  # uint8 codes, see _TAG_CODES

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.example_ids = np.asarray(self.example_ids, dtype=np.int64)
        self.scale_tags = np.asarray(self.scale_tags, dtype=np.uint8)
        if self.vectors.ndim != 2:
            raise ContractError("bank vectors must be a 2-d matrix")
        n = self.vectors.shape[0]
        if len(self.example_ids) != n or len(self.scale_tags) != n:
            raise ContractError("provenance length must equal row count")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def tag_name(self, row: int) -> str:
        return _TAG_NAMES[int(self.scale_tags[row])]


@dataclass
class NeighborResult:
    r_k: float
    neighbor_ids: np.ndarray
    distances: np.ndarray


def _normalize(vec: np.ndarray, what: str) -> np.ndarray:
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise NormalizationError(f"zero vector: {what}")
    return vec / norm


def build_bank(vectors, provenance) -> RepresentationBank:
    """Normalize rows and store them; insertion order becomes the row id.

    ``provenance`` is a sequence of (example_id, scale_tag) pairs, one per
    vector; scale tags are the strings "global", "local", "local++".
    """
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    provenance = list(provenance)
    if len(provenance) != len(vectors):
        raise ContractError("provenance length must equal vector count")
    rows = np.empty((len(vectors), vectors[0].shape[0] if vectors else 0))
    for i, v in enumerate(vectors):
        rows[i] = _normalize(v, f"input vector {i}")
    ex_ids = np.array([int(p[0]) for p in provenance], dtype=np.int64)
    tags = np.array([_TAG_CODES[p[1]] if isinstance(p[1], str) else int(p[1])
                     for p in provenance], dtype=np.uint8)
    return RepresentationBank(rows, ex_ids, tags)


def rk_query(bank: RepresentationBank, query: np.ndarray, k: int) -> NeighborResult:
    """Distance to the k-th nearest bank row (query normalized internally)."""
    n = len(bank)
    if not 1 <= k <= n:
        raise ContractError(f"k must lie in [1, {n}], got {k}")
    q = _normalize(np.asarray(query, dtype=np.float64), "query")
    d2 = 2.0 - 2.0 * (bank.vectors @ q)
    np.clip(d2, 0.0, None, out=d2)
    dist = np.sqrt(d2)
    order = np.lexsort((np.arange(n), dist))[:k]
    return NeighborResult(float(dist[order[-1]]), order, dist[order])


def rk_query_many(bank: RepresentationBank, queries: np.ndarray, k: int) -> np.ndarray:
    """Blocked multi-query r_k; contractually identical to one-at-a-time."""
    queries = np.asarray(queries, dtype=np.float64)
    return np.array([rk_query(bank, q, k).r_k for q in queries])


def subsample_bank(bank: RepresentationBank, alpha: float, seed: int,
                   example_labels=None) -> RepresentationBank:
    """Keep ceil(alpha%) of source examples (all their rows together).

    ``example_labels`` maps example id -> class id; sampling is per class
    when given, over all examples otherwise. Deterministic per seed.
    """
    if alpha <= 0 or alpha > 100:
        raise ContractError(f"alpha must lie in (0, 100], got {alpha}")
    if alpha == 100:
        return bank
    rng = _philox(seed)
    unique_ids = np.unique(bank.example_ids)
    if example_labels is not None:
        groups: dict = {}
        for ex in unique_ids:
            groups.setdefault(example_labels[int(ex)], []).append(int(ex))
        groups = {c: np.array(v) for c, v in sorted(groups.items())}
    else:
        groups = {0: unique_ids}
    kept = []
    for _, members in groups.items():
        n_keep = ceil(alpha / 100.0 * len(members))
        if n_keep < 1:
            raise ContractError("subsampling would leave a class empty")
        kept.extend(rng.choice(members, size=n_keep, replace=False).tolist())
    mask = np.isin(bank.example_ids, np.array(sorted(kept)))
    return RepresentationBank(bank.vectors[mask], bank.example_ids[mask],
                              bank.scale_tags[mask])


def save_bank(bank: RepresentationBank, path) -> None:
    with open(path, "wb") as fh:
        fh.write(BNK_MAGIC)
        fh.write(struct.pack("<3I", BNK_VERSION, len(bank), bank.dim))
        fh.write(np.ascontiguousarray(bank.vectors, dtype="<f4").tobytes())
        for ex, tag in zip(bank.example_ids, bank.scale_tags):
            fh.write(struct.pack("<IB", int(ex), int(tag)))


def load_bank(path) -> RepresentationBank:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != BNK_MAGIC:
        raise FormatError(f"{path}: bad magic, not a .bnk file")
    version, n, dim = struct.unpack_from("<3I", data, 8)
    if version != BNK_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 20
    need = 4 * n * dim + 5 * n
    if off + need > len(data):
        raise CorruptionError(f"{path}: truncated bank payload")
    vectors = np.frombuffer(data, dtype="<f4", count=n * dim, offset=off)
    vectors = vectors.astype(np.float64).reshape(n, dim)
    off += 4 * n * dim
    ex_ids = np.empty(n, dtype=np.int64)
    tags = np.empty(n, dtype=np.uint8)
    for i in range(n):
        ex, tag = struct.unpack_from("<IB", data, off)
        ex_ids[i], tags[i] = ex, tag
        off += 5
    return RepresentationBank(vectors, ex_ids, tags)
