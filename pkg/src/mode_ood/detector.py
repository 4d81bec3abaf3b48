"""Multi-scale extraction, bank fitting, scoring, and threshold decisions.

An example is scored by the minimum k-th-nearest-neighbor distance over
its extracted scale vectors against the training bank; it is accepted as
ID iff its score is strictly below the threshold.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ContractError
from .features import FeatureDataset, FeatureMap
from .knn import (
    SCALE_GLOBAL,
    SCALE_LOCAL,
    SCALE_LOCALPP,
    RepresentationBank,
    build_bank,
    rk_query,
    subsample_bank,
)
from .trainer import TrainedModel


class ScaleMode(Enum):
    GLOBAL_ONLY = "global"
    LOCAL_ONLY = "local"
    LOCAL_PP = "local++"
    GLOBAL_PLUS_LOCAL_PP = "global+local++"

    @classmethod
    def parse(cls, name: str) -> "ScaleMode":
        for m in cls:
            if m.value == name:
                return m
        raise ContractError(f"unknown scale mode {name!r}")


DEFAULT_SCALE_MODE = ScaleMode.GLOBAL_PLUS_LOCAL_PP
DEFAULT_K = 50


@dataclass
class MultiScaleSet:
    """Ordered scale-tagged vectors extracted from one feature map."""

    vectors: list          # of (E,) arrays
    tags: list             # of scale-tag strings, parallel to vectors
    source_shape: tuple


@dataclass
class Scored:
    example_id: int
    score: float
    per_scale_rk: list     # of (scale tag, r_k), in extraction order
    winner: int            # index of the minimizing vector


@dataclass
class Decision:
    verdict: str           # "ID" or "OOD"
    epsilon: float


def _localpp_vectors(values: np.ndarray) -> list[np.ndarray]:
    """Stride-2 2x2 block means plus one full-map mean (the '+1')."""
    h, w, e = values.shape
    pooled = values.reshape(h // 2, 2, w // 2, 2, e).mean(axis=(1, 3))
    out = [pooled[r, c] for r in range(h // 2) for c in range(w // 2)]
    out.append(values.mean(axis=(0, 1)))
    return out


def extract_multiscale(values, mode: ScaleMode) -> MultiScaleSet:
    """Extract scale vectors from (H, W, E) values (or a FeatureMap).

    Cardinalities: global 1, local H*W, local++ H*W/4 + 1, combined
    H*W/4 + 2. No normalization here; the bank and queries normalize.
    """
    if isinstance(values, FeatureMap):
        values = values.values
    values = np.asarray(values, dtype=np.float64)
    h, w, e = values.shape
    needs_pp = mode in (ScaleMode.LOCAL_PP, ScaleMode.GLOBAL_PLUS_LOCAL_PP)
    if needs_pp and (h % 2 or w % 2):
        raise ContractError(f"local++ modes need even H and W, got {h}x{w}")
    vectors: list = []
    tags: list = []
    if mode in (ScaleMode.GLOBAL_ONLY, ScaleMode.GLOBAL_PLUS_LOCAL_PP):
        vectors.append(values.mean(axis=(0, 1)))
        tags.append(SCALE_GLOBAL)
    if mode is ScaleMode.LOCAL_ONLY:
        vectors.extend(values.reshape(-1, e))
        tags.extend([SCALE_LOCAL] * (h * w))
    if needs_pp:
        pp = _localpp_vectors(values)
        vectors.extend(pp)
        tags.extend([SCALE_LOCALPP] * len(pp))
    return MultiScaleSet(vectors, tags, (h, w, e))


def fit_bank(train: FeatureDataset, model: TrainedModel, mode: ScaleMode,
             alpha: float = 100.0, seed: int = 0) -> RepresentationBank:
    """One pooled bank over all scales of the (alpha%-sampled) training set."""
    if any(m.label < 0 for m in train):
        raise ContractError("training dataset must be fully labeled")
    vectors, provenance = [], []
    for ex_id, fmap in enumerate(train):
        ms = extract_multiscale(model.encode(fmap), mode)
        vectors.extend(ms.vectors)
        provenance.extend((ex_id, tag) for tag in ms.tags)
    bank = build_bank(vectors, provenance)
    if alpha < 100:
        labels = {i: int(m.label) for i, m in enumerate(train)}
        bank = subsample_bank(bank, alpha, seed, example_labels=labels)
    return bank


def csd_score(test_map: FeatureMap, model: TrainedModel, bank: RepresentationBank,
              k: int = DEFAULT_K, mode: ScaleMode = DEFAULT_SCALE_MODE,
              example_id: int = -1) -> Scored:
    """Minimum r_k over the example's scale vectors against the bank."""
    ms = extract_multiscale(model.encode(test_map), mode)
    per_scale = [(tag, rk_query(bank, vec, k).r_k)
                 for tag, vec in zip(ms.tags, ms.vectors)]
    rks = [r for _, r in per_scale]
    winner = int(np.argmin(rks))
    return Scored(example_id, float(rks[winner]), per_scale, winner)


def knn_score_global(test_map: FeatureMap, model: TrainedModel,
                     bank_global_only: RepresentationBank, k: int = DEFAULT_K,
                     example_id: int = -1) -> Scored:
    """Baseline: r_k of the global vector alone."""
    return csd_score(test_map, model, bank_global_only, k,
                     ScaleMode.GLOBAL_ONLY, example_id)


def score_dataset(dataset: FeatureDataset, model: TrainedModel,
                  bank: RepresentationBank, k: int = DEFAULT_K,
                  mode: ScaleMode = DEFAULT_SCALE_MODE) -> list[Scored]:
    return [csd_score(m, model, bank, k, mode, example_id=i)
            for i, m in enumerate(dataset)]


def select_threshold(id_scores, tpr_target: float = 0.95) -> float:
    """Smallest threshold admitting at least ceil(tpr_target * n) ID scores.

    The decision rule is strict (ID iff score < epsilon), so the minimal
    representable threshold is nextafter(cut), one ulp above the order
    statistic at the target rank.
    """
    scores = np.sort(np.asarray(id_scores, dtype=np.float64))
    if scores.size == 0:
        raise ContractError("id_scores must be nonempty")
    if not 0 < tpr_target < 1:
        raise ContractError("tpr_target must lie in (0, 1)")
    rank = int(np.ceil(tpr_target * scores.size))
    cut = scores[rank - 1]
    return float(np.nextafter(cut, np.inf))


def decide(scored, epsilon: float) -> Decision:
    """ID iff score < epsilon (strict: score == epsilon is OOD)."""
    score = scored.score if isinstance(scored, Scored) else float(scored)
    return Decision("ID" if score < epsilon else "OOD", epsilon)


def write_scores_csv(path, rows) -> None:
    """rows: iterables of (example_id, dataset_tag, Scored, verdict)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["example_id", "dataset_tag", "score", "winner_scale", "verdict"])
        for example_id, tag, scored, verdict in rows:
            writer.writerow([example_id, tag, repr(scored.score),
                             scored.per_scale_rk[scored.winner][0], verdict])
