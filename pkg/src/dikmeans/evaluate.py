"""Clustering accuracy by optimal cluster-label matching, plus run selection.

Accuracy is the matched fraction under the best one-to-one mapping between
cluster indices and ground-truth labels, found on the K x K contingency
matrix. Cross-validation is label-free: among candidate runs, pick the one
with the lowest final distortion, which tracks accuracy well enough to
select hyperparameters without ground truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EmptyInput, LabelOutOfRange


@dataclass
class EvalReport:
    accuracy: float
    mapping: np.ndarray            # mapping[k] = label matched to cluster k
    distortion: float
    per_cluster_sizes: np.ndarray  # (K,) assignment counts


def clustering_accuracy(labels, assignments, k: int, distortion: float = float("nan")) -> EvalReport:
    """Best-bijection matched fraction between assignments and labels.

    Builds the K x K contingency matrix and solves the maximum-weight
    perfect matching (Hungarian method, O(K^3) via scipy).
    """
    labels = np.asarray(labels, dtype=np.int64)
    assignments = np.asarray(assignments, dtype=np.int64)
    if labels.shape != assignments.shape or labels.ndim != 1:
        raise LabelOutOfRange("labels and assignments must be equal-length 1-D arrays")
    if labels.size == 0:
        raise EmptyInput("no samples to score")
    for name, arr in (("labels", labels), ("assignments", assignments)):
        if arr.min() < 0 or arr.max() >= k:
            raise LabelOutOfRange(f"{name} outside [0, {k})")
    contingency = np.zeros((k, k), dtype=np.int64)
    np.add.at(contingency, (assignments, labels), 1)
    rows, cols = linear_sum_assignment(contingency, maximize=True)
    mapping = np.empty(k, dtype=np.int64)
    mapping[rows] = cols
    matched = int(contingency[rows, cols].sum())
    return EvalReport(
        accuracy=matched / labels.size,
        mapping=mapping,
        distortion=distortion,
        per_cluster_sizes=np.bincount(assignments, minlength=k),
    )


def distortion(state, images=None) -> float:
    """Sum of each sample's cached distance to its assigned centroid."""
    idx = np.arange(state.assignments.shape[0])
    return float(state.distances[idx, state.assignments].sum())


def crossval_select(runs):
    """Label-free model selection: the run with minimum final distortion.

    runs is a sequence of (hyperparams, distortion) or
    (hyperparams, distortion, accuracy) tuples; ties keep the earliest.
    """
    runs = list(runs)
    if not runs:
        raise EmptyInput("no runs to select from")
    best = min(runs, key=lambda r: r[1])
    return best[0]


def write_runs_csv(path, rows) -> None:
    """Machine-readable sweep/eval results: run_id, hyperparams, distortion, accuracy."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "hyperparams", "distortion", "accuracy"])
        for run_id, hyper, dist, acc in rows:
            writer.writerow([run_id, hyper, repr(float(dist)), "" if acc is None else repr(float(acc))])


def format_report(report: EvalReport) -> str:
    """Plain-text table of one evaluation."""
    lines = [
        f"accuracy    {report.accuracy:.4f}",
        f"distortion  {report.distortion:.6g}",
        "cluster  label  size",
    ]
    for c, (label, size) in enumerate(zip(report.mapping, report.per_cluster_sizes)):
        lines.append(f"{c:7d}  {label:5d}  {size:4d}")
    return "\n".join(lines) + "\n"
