"""mIoU from confusion matrices and embedding-structure statistics."""
from dataclasses import dataclass

import numpy as np

from .core import IGNORE


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions; IGNORE pixels are skipped."""

    def __init__(self, num_classes):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, labels, predictions):
        labels = np.asarray(labels).ravel()
        predictions = np.asarray(predictions).ravel()
        if labels.shape != predictions.shape:
            raise ValueError("labels and predictions differ in size")
        keep = labels != IGNORE
        c = self.num_classes
        idx = labels[keep].astype(np.int64) * c + predictions[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=c * c).reshape(c, c)
        return self

    @property
    def total(self):
        return int(self.counts.sum())


def miou(cm):
    """Mean IoU over classes with a nonzero union, plus the per-class IoUs (NaN if excluded)."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    tp = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    iou = np.full(tp.shape, np.nan)
    seen = union > 0
    iou[seen] = tp[seen] / union[seen]
    mean = float(iou[seen].mean()) if seen.any() else float("nan")
    return mean, iou


@dataclass
class EmbeddingStructure:
    intra: float
    inter: float
    per_class_intra: np.ndarray


def _pair_mean(emb, idx_a, idx_b, rng, max_pairs, same):
    """Mean cosine over pairs (a, b); ``same`` means unordered pairs a < b of one set."""
    na = idx_a.size
    nb = na if same else idx_b.size
    n_pairs = na * (na - 1) // 2 if same else na * nb
    if n_pairs == 0:
        return float("nan")
    if n_pairs <= max_pairs:
        if same:
            ia, ib = np.triu_indices(na, 1)
            a, b = idx_a[ia], idx_a[ib]
        else:
            a = np.repeat(idx_a, nb)
            b = np.tile(idx_b, na)
    else:
        if same:
            i = rng.integers(0, na, size=max_pairs)
            j = (i + rng.integers(1, na, size=max_pairs)) % na
            a, b = idx_a[i], idx_a[j]
        else:
            a = idx_a[rng.integers(0, na, size=max_pairs)]
            b = idx_b[rng.integers(0, nb, size=max_pairs)]
    return float(np.einsum("ij,ij->i", emb[a], emb[b]).mean())


def embedding_structure(embeddings, labels, max_pairs, rng):
    """Mean same-class and cross-class cosine similarity of unit embeddings.

    Enumerates every pair when a bucket has at most ``max_pairs`` pairs,
    otherwise draws ``max_pairs`` random pairs.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    emb = emb.reshape(-1, emb.shape[-1])
    lab = np.asarray(labels).ravel()
    keep = np.flatnonzero(lab != IGNORE)
    classes = np.unique(lab[keep])
    per_class = np.array([_pair_mean(emb, keep[lab[keep] == c], None, rng, max_pairs, True) for c in classes])
    # intra pools all same-class pairs, weighted by how many pairs each class has
    counts = np.array([(lab[keep] == c).sum() for c in classes], dtype=np.float64)
    w = counts * (counts - 1) / 2
    ok = w > 0
    intra = float((per_class[ok] * w[ok]).sum() / w[ok].sum()) if ok.any() else float("nan")
    inter_means, inter_w = [], []
    for i, ci in enumerate(classes):
        for cj in classes[i + 1:]:
            a = keep[lab[keep] == ci]
            b = keep[lab[keep] == cj]
            inter_means.append(_pair_mean(emb, a, b, rng, max_pairs, False))
            inter_w.append(a.size * b.size)
    inter = float(np.average(inter_means, weights=inter_w)) if inter_means else float("nan")
    return EmbeddingStructure(intra, inter, per_class)
