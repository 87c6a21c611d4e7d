"""Feature-space quality and robustness metrics.

Four collapse diagnostics summarize how close last-layer features are to
the ideal frame geometry:

  nc1  within-class scatter over between-class scatter (0 = full collapse)
  nc2  worst entry-wise gap between the normalized centered class-mean Gram
       and the ideal equiangular Gram (1 diagonal, -1/(K-1) off)
  nc3  worst-class cosine between a classifier column and its centered
       class mean (1 = perfect self-duality)
  nc4  fraction of samples whose frame prediction agrees with the
       nearest-centroid prediction

The silhouette coefficient s(i) = (b(i) - a(i)) / max(a(i), b(i)), averaged
over samples, measures cluster compactness versus separation with plain
Euclidean distances.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class NCReport:
    nc1: float
    nc2: float
    nc3: float
    nc4: float
    degenerate: bool = False


@dataclass
class MetricsReport:
    clean_acc: float | None = None
    attack_acc: dict[str, float] = field(default_factory=dict)
    sc: float | None = None
    nc: NCReport | None = None
    sample_counts: dict[str, int] = field(default_factory=dict)

    @property
    def avg_robust_acc(self) -> float | None:
        if not self.attack_acc:
            return None
        return float(np.mean(list(self.attack_acc.values())))


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ValidationError(
            f"predictions/labels mismatch: {predictions.shape} vs {labels.shape}")
    return float(np.mean(predictions == labels))


def _pairwise_distances(x: np.ndarray) -> np.ndarray:
    # direct differences, not the Gram identity: the cancellation-free form
    # agrees with a naive per-pair norm to full precision; chunked so the
    # temporary stays small
    n = x.shape[0]
    out = np.empty((n, n))
    step = max(1, (1 << 22) // max(x.size, 1))
    for lo in range(0, n, step):
        hi = min(lo + step, n)
        out[lo:hi] = np.linalg.norm(x[lo:hi, None, :] - x[None, :, :], axis=2)
    return out


def silhouette(features: np.ndarray, labels) -> float:
    """Mean silhouette over all samples; singleton-class samples count as 0."""
    x = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValidationError("silhouette needs at least 2 classes")
    dist = _pairwise_distances(x)
    n = x.shape[0]
    masks = {c: labels == c for c in classes}
    counts = {c: int(m.sum()) for c, m in masks.items()}
    scores = np.zeros(n)
    for i in range(n):
        own = labels[i]
        if counts[own] > 1:
            a = dist[i, masks[own]].sum() / (counts[own] - 1)
        else:
            continue  # s(i) = 0 by convention
        b = min(dist[i, masks[c]].mean() for c in classes if c != own)
        top = max(a, b)
        scores[i] = 0.0 if top == 0.0 else (b - a) / top
    return float(scores.mean())


def nc_report(features: np.ndarray, labels, head) -> NCReport:
    """Collapse diagnostics of a feature set against a classifier head.

    ``head`` needs a class count ``K``, a ``weights`` matrix (d, K), and
    ``logits(features)``; both frame heads and plain linear heads qualify.
    Raises on an absent class; a zero centered class mean flags the report
    degenerate with nc2/nc3 undefined.
    """
    x = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    K = head.K
    means = np.empty((K, x.shape[1]))
    within = np.empty(K)
    for k in range(K):
        m = labels == k
        if not m.any():
            raise ValidationError(f"class {k} has no samples")
        cls = x[m]
        means[k] = cls.mean(axis=0)
        within[k] = np.mean(np.sum((cls - means[k]) ** 2, axis=1))
    global_mean = x.mean(axis=0)
    centered = means - global_mean
    between = np.mean(np.sum(centered ** 2, axis=1))
    nc1 = float(within.mean() / between) if between > 0 else float("inf")

    cnorms = np.linalg.norm(centered, axis=1)
    degenerate = bool(np.any(cnorms == 0.0)) or between == 0.0
    if degenerate:
        nc2 = nc3 = float("nan")
    else:
        tilde = centered / cnorms[:, None]
        gram = tilde @ tilde.T
        ideal = np.full((K, K), -1.0 / (K - 1))
        np.fill_diagonal(ideal, 1.0)
        nc2 = float(np.max(np.abs(gram - ideal)))
        w = head.weights
        wnorms = np.linalg.norm(w, axis=0)
        cos = np.sum(w.T * centered, axis=1) / (wnorms * cnorms)
        nc3 = float(cos.min())

    logit_pred = np.argmax(head.logits(x), axis=1)
    d2 = np.sum((x[:, None, :] - means[None, :, :]) ** 2, axis=2)
    center_pred = np.argmin(d2, axis=1)
    nc4 = float(np.mean(logit_pred == center_pred))
    return NCReport(nc1=nc1, nc2=nc2, nc3=nc3, nc4=nc4, degenerate=degenerate)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _flat_items(report: MetricsReport) -> list[tuple[str, object]]:
    items: list[tuple[str, object]] = []
    if report.clean_acc is not None:
        items.append(("clean_acc", report.clean_acc))
    for name in sorted(report.attack_acc):
        items.append((f"attack_acc_{name}", report.attack_acc[name]))
    if report.attack_acc:
        items.append(("avg_robust_acc", report.avg_robust_acc))
    if report.sc is not None:
        items.append(("sc", report.sc))
    if report.nc is not None:
        items += [("nc1", report.nc.nc1), ("nc2", report.nc.nc2),
                  ("nc3", report.nc.nc3), ("nc4", report.nc.nc4),
                  ("nc_degenerate", int(report.nc.degenerate))]
    for name in sorted(report.sample_counts):
        items.append((f"n_{name}", report.sample_counts[name]))
    return items


def metrics_to_text(report: MetricsReport) -> str:
    lines = []
    for key, val in _flat_items(report):
        lines.append(f"{key} {val!r}" if isinstance(val, float) else f"{key} {val}")
    return "\n".join(lines) + "\n"


def append_metrics_row(report: MetricsReport, path) -> None:
    """Append one machine-readable row; writes the header on first use."""
    items = _flat_items(report)
    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if new:
            writer.writerow([k for k, _ in items])
        writer.writerow([repr(v) if isinstance(v, float) else v
                         for _, v in items])


def export_features(features: np.ndarray, labels, path) -> None:
    """One row per sample: label then the d feature values (for external
    plotting)."""
    x = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["label"] + [f"f{i}" for i in range(x.shape[1])])
        for lab, row in zip(labels, x):
            writer.writerow([int(lab)] + ["%.17g" % v for v in row])
