"""Denoising, classification and clustering evaluation.

Clustering accuracy uses optimal cluster-to-class matching: exhaustive over
assignments up to 6 clusters, the rectangular Hungarian solver beyond. NMI
uses the geometric entropy mean; AMI is chance-corrected with the standard
hypergeometric expected mutual information and an arithmetic mean.
"""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import SpectraDataset, normalize_dataset
from .model import ConfigError, SmaeModel, classify_batch, encode_batch
from .patching import empty_plan


class UndefinedSignalError(ValueError):
    """SNR is undefined because the reference carries no signal."""


class GroupingError(ValueError):
    """A class id is not covered by the provided grouping."""


# ---------------------------------------------------------------------------
# denoising metrics
# ---------------------------------------------------------------------------

def mse(estimate, reference) -> float:
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"shapes differ: {est.shape} vs {ref.shape}")
    return float(np.mean((est - ref) ** 2))


def snr(estimate, reference) -> float:
    """Amplitude ratio sqrt(var(reference) / MSE); +inf on a zero residual."""
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"shapes differ: {est.shape} vs {ref.shape}")
    variance = float(ref.var())
    if variance == 0.0:
        raise UndefinedSignalError("reference is constant; SNR undefined")
    residual = mse(est, ref)
    if residual == 0.0:
        return math.inf
    return math.sqrt(variance / residual)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Metrics bundle for one evaluation task."""

    task: str
    metrics: dict[str, float] = field(default_factory=dict)
    confusion: np.ndarray | None = None
    per_class_accuracy: list[float | None] | None = None
    group_confusion: np.ndarray | None = None

    def __post_init__(self):
        for key, value in self.metrics.items():
            if not math.isfinite(value):
                raise ValueError(f"metric {key} is not finite: {value}")

    def to_json(self, path=None) -> str:
        payload = {"task": self.task, "metrics": self.metrics}
        if self.confusion is not None:
            payload["confusion"] = self.confusion.astype(int).tolist()
        if self.per_class_accuracy is not None:
            payload["per_class_accuracy"] = self.per_class_accuracy
        if self.group_confusion is not None:
            payload["group_confusion"] = self.group_confusion.astype(int).tolist()
        text = json.dumps(payload, sort_keys=True, indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text

    def confusion_csv(self, path) -> None:
        if self.confusion is None:
            raise ValueError("report has no confusion matrix")
        np.savetxt(path, self.confusion.astype(int), fmt="%d", delimiter=",")


@dataclass(frozen=True)
class ClusterAssignment:
    """Predicted cluster id per sample."""

    labels: np.ndarray
    k: int

    def __post_init__(self):
        arr = np.asarray(self.labels, dtype=np.intp)
        object.__setattr__(self, "labels", arr)
        if arr.size and (arr.min() < 0 or arr.max() >= self.k):
            raise ValueError(f"cluster ids must be in [0, {self.k})")


# ---------------------------------------------------------------------------
# classification evaluation
# ---------------------------------------------------------------------------

def predict_labels(model: SmaeModel, matrix: np.ndarray, batch_size: int = 64) -> np.ndarray:
    preds = []
    for start in range(0, matrix.shape[0], batch_size):
        scores = classify_batch(model, matrix[start : start + batch_size])
        preds.append(np.argmax(scores.data, axis=1))
    return np.concatenate(preds)


def evaluate_classifier(
    model: SmaeModel,
    dataset: SpectraDataset,
    grouping: dict[int, int] | None = None,
    batch_size: int = 64,
    normalize: bool = True,
) -> EvalReport:
    """Top-1 accuracy with a k x k confusion matrix (rows = truth).

    With a grouping map, predictions and truth are both mapped through it
    for additional group-level accuracy and confusion.
    """
    if not dataset.has_labels:
        raise ValueError("evaluation dataset must be fully labeled")
    data = normalize_dataset(dataset) if normalize else dataset
    truth = data.labels_array()
    k = model.config.n_classes
    if truth.max() >= k:
        raise ValueError(f"dataset label {truth.max()} out of range for {k}-class model")
    pred = predict_labels(model, data.intensity_matrix(), batch_size)

    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    accuracy = float(np.trace(confusion) / len(truth))
    row_sums = confusion.sum(axis=1)
    per_class = [
        float(confusion[i, i] / row_sums[i]) if row_sums[i] > 0 else None for i in range(k)
    ]
    metrics = {"accuracy": accuracy}
    group_confusion = None
    if grouping is not None:
        missing = [c for c in range(k) if c not in grouping]
        if missing:
            raise GroupingError(f"grouping missing class ids {missing}")
        n_groups = max(grouping.values()) + 1
        g_truth = np.array([grouping[int(c)] for c in truth])
        g_pred = np.array([grouping[int(c)] for c in pred])
        group_confusion = np.zeros((n_groups, n_groups), dtype=np.int64)
        np.add.at(group_confusion, (g_truth, g_pred), 1)
        metrics["group_accuracy"] = float(np.trace(group_confusion) / len(truth))
    return EvalReport(
        task="classify",
        metrics=metrics,
        confusion=confusion,
        per_class_accuracy=per_class,
        group_confusion=group_confusion,
    )


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

POOLING_MODES = ("mean_tokens", "class_token")


def extract_embeddings(
    model: SmaeModel,
    dataset: SpectraDataset,
    pooling: str = "mean_tokens",
    batch_size: int = 64,
    normalize: bool = True,
    threads: int = 1,
) -> np.ndarray:
    """Unmasked encoder latents pooled to one row per spectrum.

    ``mean_tokens`` averages the patch-token latents; ``class_token`` takes
    the class-token latent. Extraction is read-only over the model, so
    chunks may run on a thread pool; results keep dataset order.
    """
    if pooling not in POOLING_MODES:
        raise ValueError(f"unknown pooling {pooling!r}; expected one of {POOLING_MODES}")
    data = normalize_dataset(dataset) if normalize else dataset
    matrix = data.intensity_matrix()
    if matrix.shape[1] != model.config.length:
        raise ConfigError(f"dataset length {matrix.shape[1]} does not match model {model.config.length}")
    plan = empty_plan(model.config.n_patches)

    def run_chunk(start: int) -> np.ndarray:
        chunk = matrix[start : start + batch_size]
        latents = encode_batch(model, chunk, [plan] * chunk.shape[0]).data
        if pooling == "class_token":
            return latents[:, 0, :]
        return latents[:, 1:, :].mean(axis=1)

    starts = list(range(0, matrix.shape[0], batch_size))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(run_chunk, starts))
    else:
        blocks = [run_chunk(s) for s in starts]
    return np.concatenate(blocks, axis=0)


# ---------------------------------------------------------------------------
# PCA and k-means
# ---------------------------------------------------------------------------

def pca(matrix: np.ndarray, dims: int) -> np.ndarray:
    """Project onto the top principal axes of the column-centered data.

    Sign convention: each axis's largest-magnitude component is positive, so
    projections are reproducible across eigensolvers.
    """
    x = np.asarray(matrix, dtype=np.float64)
    n, d = x.shape
    if dims < 1 or dims > min(n, d):
        raise ValueError(f"dims={dims} must be in [1, min(n={n}, d={d})]")
    centered = x - x.mean(axis=0)
    denom = max(n - 1, 1)
    cov = centered.T @ centered / denom
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1][:dims]
    axes = eigenvectors[:, order]
    for j in range(axes.shape[1]):
        i = np.argmax(np.abs(axes[:, j]))
        if axes[i, j] < 0:
            axes[:, j] = -axes[:, j]
    return centered @ axes


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            probs = d2 / total
            idx = rng.choice(n, p=probs)
        else:
            idx = rng.integers(n)
        centroids[j] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans(
    matrix: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    n_init: int = 10,
):
    """Seeded k-means++ with Lloyd iterations to an assignment fixpoint.

    Runs ``n_init`` restarts and keeps the lowest inertia (ties keep the
    earlier restart). Empty clusters steal the point currently farthest from
    its assigned centroid.
    """
    from .seeding import substream

    x = np.asarray(matrix, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be in [1, n={n}]")
    rng = substream(seed, "kmeans")
    best = None
    for restart in range(n_init):
        centroids = _kmeans_pp_init(x, k, rng)
        assign = np.full(n, -1, dtype=np.intp)
        for _ in range(max_iter):
            d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            new_assign = np.argmin(d2, axis=1)
            for empty in range(k):
                if not (new_assign == empty).any():
                    # steal the point farthest from its centroid, never
                    # draining a singleton cluster
                    own = d2[np.arange(n), new_assign]
                    counts = np.bincount(new_assign, minlength=k)
                    candidates = np.where(counts[new_assign] > 1)[0]
                    farthest = candidates[np.argmax(own[candidates])]
                    new_assign[farthest] = empty
            if (new_assign == assign).all():
                break
            assign = new_assign
            for j in range(k):
                centroids[j] = x[assign == j].mean(axis=0)
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        inertia = float(d2[np.arange(n), assign].sum())
        if best is None or inertia < best[0]:
            best = (inertia, assign.copy(), centroids.copy())
    inertia, assign, centroids = best
    return ClusterAssignment(assign, k), centroids, inertia


# ---------------------------------------------------------------------------
# partition agreement scores
# ---------------------------------------------------------------------------

def _contingency(pred, truth) -> np.ndarray:
    p = np.asarray(pred.labels if isinstance(pred, ClusterAssignment) else pred, dtype=np.intp)
    t = np.asarray(truth.labels if isinstance(truth, ClusterAssignment) else truth, dtype=np.intp)
    if p.shape != t.shape:
        raise ValueError(f"partitions differ in length: {p.shape} vs {t.shape}")
    _, pi = np.unique(p, return_inverse=True)
    _, ti = np.unique(t, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    return table


def _best_match_exhaustive(table: np.ndarray) -> int:
    rows, cols = table.shape
    if rows > cols:
        return _best_match_exhaustive(table.T)
    best = 0
    for perm in itertools.permutations(range(cols), rows):
        best = max(best, int(sum(table[i, perm[i]] for i in range(rows))))
    return best


def _best_match_hungarian(table: np.ndarray) -> int:
    row, col = linear_sum_assignment(table, maximize=True)
    return int(table[row, col].sum())


def clustering_accuracy(pred, truth, method: str = "auto") -> float:
    """Best matched fraction under an optimal cluster-to-class assignment."""
    table = _contingency(pred, truth)
    n = int(table.sum())
    if method == "auto":
        method = "exhaustive" if max(table.shape) <= 6 else "hungarian"
    if method == "exhaustive":
        matched = _best_match_exhaustive(table)
    elif method == "hungarian":
        matched = _best_match_hungarian(table)
    else:
        raise ValueError(f"unknown method {method!r}")
    return matched / n


def _entropy(counts: np.ndarray, n: int) -> float:
    probs = counts[counts > 0] / n
    return float(-(probs * np.log(probs)).sum())


def _mutual_information(table: np.ndarray, n: int) -> float:
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    mi = 0.0
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            nij = table[i, j]
            if nij > 0:
                mi += (nij / n) * math.log(n * nij / (a[i] * b[j]))
    return mi


def expected_mutual_information(a: np.ndarray, b: np.ndarray, n: int) -> float:
    """E[MI] over random tables with fixed margins (hypergeometric model)."""
    lg = math.lgamma
    emi = 0.0
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            for nij in range(lo, hi + 1):
                log_p = (
                    lg(ai + 1) + lg(bj + 1) + lg(n - ai + 1) + lg(n - bj + 1)
                    - lg(n + 1) - lg(nij + 1) - lg(ai - nij + 1)
                    - lg(bj - nij + 1) - lg(n - ai - bj + nij + 1)
                )
                emi += (nij / n) * math.log(n * nij / (ai * bj)) * math.exp(log_p)
    return emi


def nmi(pred, truth) -> float:
    """Normalized mutual information, geometric mean normalization.

    Convention for degenerate inputs: two single-cluster partitions are
    identical, score 1.0; if exactly one side is a single cluster the score
    is 0.0.
    """
    table = _contingency(pred, truth)
    n = int(table.sum())
    hu = _entropy(table.sum(axis=1), n)
    hv = _entropy(table.sum(axis=0), n)
    if hu == 0.0 and hv == 0.0:
        return 1.0
    if hu == 0.0 or hv == 0.0:
        return 0.0
    return _mutual_information(table, n) / math.sqrt(hu * hv)


def ami(pred, truth) -> float:
    """Adjusted mutual information (chance-corrected, arithmetic mean).

    Same degenerate conventions as :func:`nmi`.
    """
    table = _contingency(pred, truth)
    n = int(table.sum())
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    hu = _entropy(a, n)
    hv = _entropy(b, n)
    if hu == 0.0 and hv == 0.0:
        return 1.0
    mi = _mutual_information(table, n)
    emi = expected_mutual_information(a, b, n)
    denom = 0.5 * (hu + hv) - emi
    if abs(denom) < 1e-15:
        return 0.0
    return (mi - emi) / denom
