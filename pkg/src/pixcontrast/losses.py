"""Losses and their analytic gradients.

Scalar functions (``cross_entropy``, ``info_nce``, ``pixel_contrast``,
``pixel_contrast_grad``) work on one pixel / one anchor and are the reference
implementations. ``contrast_terms`` evaluates many anchors at once and is what
the trainer calls.
"""
from dataclasses import dataclass

import numpy as np

from .core import IGNORE, EmptyCeTerms, EmptyPositives, IgnoredPixel, log_softmax, softmax

GRAD_MODES = ("exact", "eq5")


@dataclass(frozen=True)
class ContrastBatch:
    """One anchor with its positive and negative sets (rows are unit vectors)."""

    anchor: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    tau: float = 0.1

    def __post_init__(self):
        anchor = np.asarray(self.anchor, dtype=np.float64)
        d = anchor.shape[0]
        pos = np.asarray(self.positives, dtype=np.float64).reshape(-1, d)
        neg = np.asarray(self.negatives, dtype=np.float64).reshape(-1, d)
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        for name, rows in (("anchor", anchor[None]), ("positives", pos), ("negatives", neg)):
            if rows.size and np.max(np.abs(np.linalg.norm(rows, axis=1) - 1.0)) > 1e-9:
                raise ValueError(f"{name} must be unit vectors")
        object.__setattr__(self, "anchor", anchor)
        object.__setattr__(self, "positives", pos)
        object.__setattr__(self, "negatives", neg)


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


def _logsumexp(x):
    if x.size == 0:
        return -np.inf
    m = x.max()
    return m + np.log(np.exp(x - m).sum())


def cross_entropy(logits, truth):
    """Softmax cross-entropy for a single pixel. Returns ``(loss, dloss/dlogits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    if truth == IGNORE:
        raise IgnoredPixel("cross_entropy called on an IGNORE pixel")
    if not 0 <= truth < logits.shape[0]:
        raise IndexError(f"class {truth} out of range for {logits.shape[0]} logits")
    loss = -log_softmax(logits)[truth]
    grad = softmax(logits)
    grad[truth] -= 1.0
    return float(loss), grad


def cross_entropy_pixels(logits, labels):
    """Mean CE over all non-IGNORE pixels.

    ``logits`` is (P, C), ``labels`` is (P,). Returns the mean loss, the
    gradient of the mean w.r.t. logits (zero rows at IGNORE pixels) and the
    number of contributing pixels.
    """
    labels = np.asarray(labels).ravel()
    valid = labels != IGNORE
    count = int(valid.sum())
    if count == 0:
        raise EmptyCeTerms("no labeled pixels in batch")
    idx = np.nonzero(valid)[0]
    lsm = log_softmax(logits[idx])
    truth = labels[idx].astype(np.intp)
    loss = -lsm[np.arange(idx.size), truth].sum() / count
    grad = np.zeros_like(logits)
    g = np.exp(lsm)
    g[np.arange(idx.size), truth] -= 1.0
    grad[idx] = g / count
    return float(loss), grad, count


def info_nce(anchor, positive, negatives, tau):
    """Image-level InfoNCE with one positive, via log-sum-exp."""
    anchor = np.asarray(anchor, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, anchor.shape[0])
    s_pos = float(np.asarray(positive, dtype=np.float64) @ anchor) / tau
    s_neg = np.sort(negatives @ anchor / tau)
    if s_neg.size == 0:
        return 0.0
    return float(np.logaddexp(0.0, _logsumexp(s_neg) - s_pos))


def pixel_contrast(batch):
    """Supervised pixel contrast for one anchor.

    Each positive gets its own denominator (itself plus every negative);
    the terms are averaged over positives.
    """
    if batch.positives.shape[0] == 0:
        raise EmptyPositives("anchor has no positives")
    if batch.negatives.shape[0] == 0:
        return 0.0
    s_pos = batch.positives @ batch.anchor / batch.tau
    lse_neg = _logsumexp(np.sort(batch.negatives @ batch.anchor / batch.tau))
    terms = np.sort(np.logaddexp(0.0, lse_neg - s_pos))
    return float(terms.sum() / terms.size)


def pixel_contrast_grad(batch, mode="exact"):
    """Gradient of the pixel contrast w.r.t. the anchor.

    ``exact`` differentiates the per-positive-denominator loss. ``eq5`` uses
    matching probabilities normalized over the pooled positives and
    negatives; the two agree when there is a single positive.
    """
    if mode not in GRAD_MODES:
        raise ValueError(f"unknown grad mode {mode!r}")
    pos, neg, tau = batch.positives, batch.negatives, batch.tau
    n_pos = pos.shape[0]
    if n_pos == 0:
        raise EmptyPositives("anchor has no positives")
    s_pos = pos @ batch.anchor / tau
    s_neg = neg @ batch.anchor / tau
    if mode == "exact":
        if neg.shape[0] == 0:
            return np.zeros_like(batch.anchor)
        lse_neg = _logsumexp(s_neg)
        neg_mean = softmax(s_neg) @ neg
        # 1 - q_p, where q_p is the positive's share of its own denominator
        w = np.exp(-np.logaddexp(0.0, s_pos - lse_neg))
        return (w.sum() * neg_mean - w @ pos) / (tau * n_pos)
    log_z = _logsumexp(np.concatenate([s_pos, s_neg]))
    p_pos = np.exp(s_pos - log_z)
    p_neg = np.exp(s_neg - log_z)
    inner = (1.0 - p_pos) @ pos - n_pos * (p_neg @ neg)
    return -inner / (tau * n_pos)


def joint_loss(ce_terms, nce_terms, weights=LossWeights()):
    ce_terms = list(ce_terms)
    nce_terms = list(nce_terms)
    if not ce_terms:
        raise EmptyCeTerms("joint loss needs at least one CE term")
    total = float(np.mean(ce_terms))
    if nce_terms:
        total += weights.lam * float(np.mean(nce_terms))
    return total


def _masked_logsumexp(s, mask):
    """Row-wise log-sum-exp over the entries of ``s`` where ``mask`` holds.

    Returns (lse, e, total) with ``e`` the shifted exponentials (zero off the
    mask) and ``total`` their row sums; empty rows give lse = -inf.
    """
    m = np.where(mask, s, -np.inf).max(axis=1, initial=-np.inf)
    shift = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(np.where(mask, s - shift[:, None], -np.inf))
    total = e.sum(axis=1)
    with np.errstate(divide="ignore"):
        lse = shift + np.log(total)
    return lse, e, total


def _selected_dots(anchors, cand, sel, dots):
    if dots is None:
        return np.matmul(cand[sel.idx], anchors[:, :, None])[..., 0]
    return np.take_along_axis(dots, sel.idx, axis=1)


def _weighted_sum(weights, sel, cand):
    """Row-wise sum of candidate vectors weighted by per-selection weights."""
    dense = np.zeros((weights.shape[0], cand.shape[0]))
    # columns within a row are distinct, so the scatter never collides
    np.put_along_axis(dense, sel.idx, weights, axis=1)
    return dense @ cand


def contrast_terms(anchors, cand_pos, cand_neg, pos, neg, tau, mode="exact", dots=None):
    """Pixel contrast and anchor gradients for many anchors at once.

    anchors: (A, D); cand_pos: (P, D); cand_neg: (N, D). ``pos`` and ``neg``
    are Selections (see ``sampling``) naming each anchor's positives and
    negatives; every anchor needs at least one positive. ``dots`` optionally
    supplies the full (A, P) and (A, N) dot products. Returns
    ``(losses (A,), grads (A, D))``.
    """
    if mode not in GRAD_MODES:
        raise ValueError(f"unknown grad mode {mode!r}")
    n_pos = np.count_nonzero(pos.valid, axis=1)
    if np.any(n_pos == 0):
        raise EmptyPositives("every anchor needs at least one positive")
    d_pos, d_neg = (None, None) if dots is None else dots
    s_pos = _selected_dots(anchors, cand_pos, pos, d_pos) / tau
    s_neg = _selected_dots(anchors, cand_neg, neg, d_neg) / tau
    lse_neg, e_neg, sum_neg = _masked_logsumexp(s_neg, neg.valid)
    # x = log(sum_n e^{s_n}) - s_p; each positive contributes log(1 + e^x)
    x = np.where(pos.valid, lse_neg[:, None] - s_pos, -np.inf)
    losses = np.logaddexp(0.0, x).sum(axis=1) / n_pos

    if mode == "exact":
        # 1 - q_p: weight of negatives in positive p's own denominator
        w = np.exp(-np.logaddexp(0.0, -x))
        w_pos = -w
        w_neg = e_neg * (w.sum(axis=1) / np.where(sum_neg > 0, sum_neg, 1.0))[:, None]
    else:
        log_z = np.logaddexp(_masked_logsumexp(s_pos, pos.valid)[0], lse_neg)
        w_pos = np.where(pos.valid, np.exp(s_pos - log_z[:, None]) - 1.0, 0.0)
        w_neg = np.where(neg.valid, np.exp(s_neg - log_z[:, None]), 0.0) * n_pos[:, None]
    grads = _weighted_sum(w_pos, pos, cand_pos) + _weighted_sum(w_neg, neg, cand_neg)
    return losses, grads / (tau * n_pos)[:, None]


def matching_probabilities(batch):
    """Pooled softmax of anchor similarities over positives then negatives."""
    s = np.concatenate([batch.positives, batch.negatives]) @ batch.anchor / batch.tau
    p = softmax(s) if s.size else s
    n_pos = batch.positives.shape[0]
    return p[:n_pos], p[n_pos:]
