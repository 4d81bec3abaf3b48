"""Evaluation metrics: FPR at a TPR target, AUROC, ID accuracy.

Scores are distances throughout: ID examples should score low. AUROC is
the Mann-Whitney statistic P(ood > id) + 0.5 P(tie), computed from
average ranks (exact, ties half-weighted).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .detector import select_threshold
from .errors import ContractError
from .features import FeatureDataset
from .trainer import TrainedModel


@dataclass
class EvalReport:
    fpr95: float
    auroc: float
    epsilon: float
    n_id: int
    n_ood: int
    id_acc: float | None = None
    tpr_target: float = 0.95

    def to_text(self) -> str:
        lines = [
            f"n_id = {self.n_id}",
            f"n_ood = {self.n_ood}",
            f"tpr_target = {self.tpr_target}",
            f"epsilon = {self.epsilon!r}",
            f"fpr = {self.fpr95!r}",
            f"auroc = {self.auroc!r}",
        ]
        if self.id_acc is not None:
            lines.append(f"id_acc = {self.id_acc!r}")
        return "\n".join(lines) + "\n"

    CSV_HEADER = ["n_id", "n_ood", "tpr_target", "epsilon", "fpr", "auroc", "id_acc"]

    def to_csv_row(self) -> list:
        return [self.n_id, self.n_ood, self.tpr_target, repr(self.epsilon),
                repr(self.fpr95), repr(self.auroc),
                "" if self.id_acc is None else repr(self.id_acc)]


def _check_nonempty(id_scores, ood_scores):
    id_scores = np.asarray(id_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    if id_scores.size == 0 or ood_scores.size == 0:
        raise ContractError("score lists must be nonempty")
    return id_scores, ood_scores


def rankdata(values: np.ndarray) -> np.ndarray:
    """1-based average ranks (ties share the mean of their rank span)."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95) -> float:
    """Fraction of OOD scores below the threshold admitting tpr_target ID."""
    id_scores, ood_scores = _check_nonempty(id_scores, ood_scores)
    eps = select_threshold(id_scores, tpr_target)
    return float((ood_scores < eps).mean())


def auroc(id_scores, ood_scores) -> float:
    """P(ood_score > id_score) + 0.5 P(tie) over all pairs, via ranks."""
    id_scores, ood_scores = _check_nonempty(id_scores, ood_scores)
    n_id, n_ood = id_scores.size, ood_scores.size
    ranks = rankdata(np.concatenate([id_scores, ood_scores]))
    rank_sum_ood = ranks[n_id:].sum()
    u = rank_sum_ood - n_ood * (n_ood + 1) / 2.0
    return float(u / (n_id * n_ood))


def evaluate(id_scores, ood_scores, tpr_target: float = 0.95,
             id_acc: float | None = None) -> EvalReport:
    id_arr, ood_arr = _check_nonempty(id_scores, ood_scores)
    eps = select_threshold(id_arr, tpr_target)
    return EvalReport(
        fpr95=float((ood_arr < eps).mean()),
        auroc=auroc(id_arr, ood_arr),
        epsilon=eps,
        n_id=id_arr.size,
        n_ood=ood_arr.size,
        id_acc=id_acc,
        tpr_target=tpr_target,
    )


def id_accuracy(test: FeatureDataset, train: FeatureDataset, model: TrainedModel) -> float:
    """Nearest class-centroid accuracy on normalized encoded globals.

    Centroids are per-class means of the normalized training globals; test
    labels go to the closest centroid, ties to the lowest class id.
    """
    if any(m.label < 0 for m in train) or any(m.label < 0 for m in test):
        raise ContractError("both datasets must be fully labeled")

    def norm_global(fmap):
        g = model.encode(fmap).mean(axis=(0, 1))
        n = np.linalg.norm(g)
        if n == 0.0:
            raise ContractError("zero-norm global vector")
        return g / n

    train_globals = np.stack([norm_global(m) for m in train])
    train_labels = train.labels()
    classes = np.unique(train_labels)
    if set(np.unique(test.labels())) - set(classes.tolist()):
        raise ContractError("test contains a class absent from train")
    centroids = np.stack([train_globals[train_labels == c].mean(axis=0) for c in classes])
    correct = 0
    for m in test:
        d = np.linalg.norm(centroids - norm_global(m), axis=1)
        pred = classes[int(np.argmin(d))]  # argmin takes the first (lowest id) on ties
        correct += int(pred == m.label)
    return correct / len(test)


def write_report_csv(path, reports_with_tags) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tag"] + EvalReport.CSV_HEADER)
        for tag, report in reports_with_tags:
            writer.writerow([tag] + report.to_csv_row())
