"""Finite-difference verification of the analytic joint-loss gradients.

The reference loss here is built from the scalar per-pixel / per-anchor
functions, so it shares no code with the batched path used for training.
"""
from dataclasses import dataclass

import numpy as np

from .core import l2_normalize, make_rng
from .losses import ContrastBatch, contrast_terms, cross_entropy, cross_entropy_pixels, pixel_contrast
from .model import PARAM_NAMES, PixelNet, backward, forward
from .sampling import Selection

KINK_MARGIN = 1e-4


@dataclass
class GradCheckCase:
    net: PixelNet
    features: np.ndarray  # (H, W, F)
    labels: np.ndarray  # (H, W)
    bank_vecs: np.ndarray  # (M, Dp) unit rows, treated as constants
    bank_classes: np.ndarray  # (M,)
    anchors: np.ndarray  # flat pixel indices
    lam: float
    tau: float


def make_case(seed, in_dim=3, hidden_dim=4, embed_dim=4, proj_dim=4, num_classes=3, size=4,
              per_class_bank=3, lam=1.0, tau=0.1):
    """Random tiny problem whose ReLU pre-activations all sit away from zero."""
    rng = make_rng(seed, 99)
    net = PixelNet(in_dim, hidden_dim, embed_dim, num_classes, proj_dim, rng=rng)
    labels = rng.integers(0, num_classes, size=(size, size)).astype(np.uint8)
    for _ in range(1000):
        features = rng.standard_normal((size, size, in_dim))
        cache = forward(net, features)
        if min(np.abs(cache.h_pre).min(), np.abs(cache.p_pre).min()) > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not find a kink-free input")
    bank = [l2_normalize(v) for v in rng.standard_normal((num_classes * per_class_bank, proj_dim))]
    bank_classes = np.repeat(np.arange(num_classes), per_class_bank)
    anchors = rng.choice(labels.size, size=max(1, labels.size // 2), replace=False)
    return GradCheckCase(net, features, labels, np.array(bank), bank_classes, np.sort(anchors), lam, tau)


def reference_loss(case, params=None):
    """Joint loss from scalar building blocks: mean CE + lam * mean pixel contrast."""
    net = case.net
    if params is not None:
        net = net.copy()
        net.params = params
    cache = forward(net, case.features)
    labels = case.labels.ravel()
    ce = [cross_entropy(cache.logits[i], int(labels[i]))[0] for i in range(labels.size)]
    nce = []
    for a in case.anchors:
        c = labels[a]
        batch = ContrastBatch(cache.projections[a], case.bank_vecs[case.bank_classes == c],
                              case.bank_vecs[case.bank_classes != c], case.tau)
        nce.append(pixel_contrast(batch))
    return float(np.mean(ce) + case.lam * np.mean(nce))


def analytic_gradients(case, mode="exact"):
    cache = forward(case.net, case.features)
    labels = case.labels.ravel()
    _, d_logits, _ = cross_entropy_pixels(cache.logits, labels)
    d_proj = np.zeros_like(cache.projections)
    for c in np.unique(labels[case.anchors]):
        a_idx = case.anchors[labels[case.anchors] == c]
        pos = case.bank_vecs[case.bank_classes == c]
        neg = case.bank_vecs[case.bank_classes != c]
        _, grads = contrast_terms(cache.projections[a_idx], pos, neg,
                                  Selection.full(a_idx.size, len(pos)), Selection.full(a_idx.size, len(neg)),
                                  case.tau, mode)
        d_proj[a_idx] += grads * (case.lam / case.anchors.size)
    return backward(case.net, cache, d_logits, d_proj)


def numeric_gradients(case, step=1e-6):
    grads = {}
    for name in PARAM_NAMES:
        g = np.zeros_like(case.net.params[name])
        for idx in np.ndindex(g.shape):
            params = {k: v.copy() for k, v in case.net.params.items()}
            params[name][idx] += step
            up = reference_loss(case, params)
            params[name][idx] -= 2 * step
            down = reference_loss(case, params)
            g[idx] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def relative_error(a, b):
    """||a - b|| / max(||a||, ||b||), with a tiny floor for all-zero tensors."""
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def check_seed(seed, **kwargs):
    """Per-parameter relative errors for one random case."""
    case = make_case(seed, **kwargs)
    ana = analytic_gradients(case)
    num = numeric_gradients(case)
    return {name: relative_error(ana[name], num[name]) for name in PARAM_NAMES}


def run(seeds=20, **kwargs):
    """Max relative error over ``seeds`` random cases and all parameters."""
    worst = 0.0
    per_seed = []
    for seed in range(seeds):
        errs = check_seed(seed, **kwargs)
        per_seed.append(errs)
        worst = max(worst, max(errs.values()))
    return worst, per_seed
