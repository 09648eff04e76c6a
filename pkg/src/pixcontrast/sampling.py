"""Anchor sampling and positive/negative example mining."""
import math
from dataclasses import dataclass

import numpy as np

from .core import IGNORE, ShapeMismatch

STRATEGIES = ("random", "hardest", "semi_hard")
ANCHOR_MODES = ("random", "seg_aware")


@dataclass
class SamplingConfig:
    strategy: str = "semi_hard"
    k_pos: int = 1024
    k_neg: int = 2048
    anchors_per_class: int = 50
    semi_hard_fraction: float = 0.10
    anchor_mode: str = "seg_aware"

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"sampling.strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.anchor_mode not in ANCHOR_MODES:
            raise ValueError(f"sampling.anchor_mode must be one of {ANCHOR_MODES}, got {self.anchor_mode!r}")
        if self.k_pos < 1 or self.k_neg < 1 or self.anchors_per_class < 1:
            raise ValueError("k_pos, k_neg and anchors_per_class must be >= 1")
        if not 0 < self.semi_hard_fraction <= 1:
            raise ValueError("semi_hard_fraction must lie in (0, 1]")


@dataclass
class AnchorSet:
    """Sampled anchors as flat indices into the label array they came from."""

    index: np.ndarray
    classes: np.ndarray
    is_hard: np.ndarray

    def __len__(self):
        return self.index.size

    def coords(self, shape):
        return np.unravel_index(self.index, shape)


def sample_anchors(labels, predictions, per_class, mode, rng):
    """Up to ``per_class`` anchors for every class present in ``labels``.

    In ``seg_aware`` mode ceil(per_class / 2) anchors come from the class's
    misclassified pixels and the rest uniformly from the class's remaining
    pixels; a short hard pool is topped up from the random pool.
    """
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape:
        raise ShapeMismatch(f"labels {labels.shape} vs predictions {predictions.shape}")
    if mode not in ANCHOR_MODES:
        raise ValueError(f"unknown anchor mode {mode!r}")
    lab = labels.ravel()
    pred = predictions.ravel()
    index, classes, hard = [], [], []
    for c in np.unique(lab[lab != IGNORE]):
        pixels = np.flatnonzero(lab == c)
        chosen_hard = np.zeros(0, dtype=np.intp)
        if mode == "seg_aware":
            pool = pixels[pred[pixels] != c]
            n_hard = min(math.ceil(per_class / 2), pool.size)
            chosen_hard = rng.choice(pool, size=n_hard, replace=False) if n_hard else chosen_hard
        rest = np.setdiff1d(pixels, chosen_hard, assume_unique=True)
        n_rand = min(per_class - chosen_hard.size, rest.size)
        chosen_rand = rng.choice(rest, size=n_rand, replace=False) if n_rand else rest[:0]
        index += [chosen_hard, chosen_rand]
        classes.append(np.full(chosen_hard.size + chosen_rand.size, c, dtype=np.intp))
        hard += [np.ones(chosen_hard.size, bool), np.zeros(chosen_rand.size, bool)]
    if not index:
        return AnchorSet(np.zeros(0, np.intp), np.zeros(0, np.intp), np.zeros(0, bool))
    return AnchorSet(np.concatenate(index).astype(np.intp), np.concatenate(classes), np.concatenate(hard))


def semi_hard_pool_size(count, fraction):
    """ceil(fraction * count), at least 1 when there are candidates."""
    count = np.asarray(count)
    # the epsilon keeps 0.1 * 30 == 3.0000000000000004 from rounding up to 4
    size = np.maximum(1, np.ceil(fraction * count - 1e-9)).astype(np.intp)
    size = np.where(count > 0, size, 0)
    return int(size) if size.ndim == 0 else size


@dataclass
class Selection:
    """Per-anchor chosen candidate columns in padded form.

    ``idx`` (A, K) holds distinct column indices per row; only entries with
    ``valid`` set are selected, so rows may choose fewer than K candidates.
    """

    idx: np.ndarray
    valid: np.ndarray

    @classmethod
    def full(cls, rows, n):
        return cls(np.tile(np.arange(n, dtype=np.intp), (rows, 1)), np.ones((rows, n), dtype=bool))

    @classmethod
    def from_mask(cls, mask):
        mask = np.asarray(mask, dtype=bool)
        k = int(np.count_nonzero(mask, axis=1).max(initial=0))
        # selected columns first, in column order, then unselected ones as padding
        idx = np.argsort(~mask, axis=1, kind="stable")[:, :k]
        return cls(idx.astype(np.intp), np.take_along_axis(mask, idx, axis=1))

    def counts(self):
        return np.count_nonzero(self.valid, axis=1)

    def mask(self, n):
        out = np.zeros((self.idx.shape[0], n), dtype=bool)
        np.put_along_axis(out, self.idx, self.valid, axis=1)
        return out

    def rows(self, keep):
        return Selection(self.idx[keep], self.valid[keep])

    def columns(self, row):
        return self.idx[row][self.valid[row]]


def take_smallest(keys, k, avail=None):
    """The ``k[row]`` smallest available keys in each row, as a Selection.

    ``k`` is clamped to the number of available entries in its row. Within a
    row the selected columns come out in ascending key order; ties at the
    cut are resolved deterministically. Keys must be finite.
    """
    keys = np.asarray(keys, dtype=np.float64)
    rows, n = keys.shape
    count = np.full(rows, n) if avail is None else np.count_nonzero(avail, axis=1)
    k = np.minimum(np.broadcast_to(np.asarray(k, dtype=np.intp), (rows,)), count)
    kmax = int(k.max(initial=0))
    if kmax == 0:
        return Selection(np.zeros((rows, 0), np.intp), np.zeros((rows, 0), bool))
    if avail is not None:
        keys = np.where(avail, keys, np.inf)
    if kmax < n:
        idx = np.argpartition(keys, kmax - 1, axis=1)[:, :kmax]
    else:
        idx = np.tile(np.arange(n, dtype=np.intp), (rows, 1))
    if np.all(k == kmax):
        return Selection(idx, np.ones(idx.shape, dtype=bool))
    order = np.lexsort((idx, np.take_along_axis(keys, idx, axis=1)), axis=1)
    idx = np.take_along_axis(idx, order, axis=1)
    return Selection(idx, np.arange(kmax) < k[:, None])


def _all_available(rows, n, avail):
    return Selection.full(rows, n) if avail is None else Selection.from_mask(avail)


def _select(dots, avail, k, hardness_sign, cfg, rng):
    """Selection for one side (positives or negatives).

    ``hardness_sign`` is +1 when a larger dot is harder (negatives) and -1
    when a smaller dot is harder (positives).
    """
    rows, n = dots.shape
    count = np.full(rows, n) if avail is None else np.count_nonzero(avail, axis=1)
    if cfg.strategy == "hardest":
        return take_smallest(-hardness_sign * dots, k, avail)
    if cfg.strategy == "semi_hard":
        pool = take_smallest(-hardness_sign * dots, semi_hard_pool_size(count, cfg.semi_hard_fraction), avail)
        if np.all(pool.counts() <= k):
            return pool
        sub = take_smallest(rng.random(pool.idx.shape), k, pool.valid)
        return Selection(np.take_along_axis(pool.idx, sub.idx, axis=1), sub.valid)
    if np.all(count <= k):
        return _all_available(rows, n, avail)
    return take_smallest(rng.random((rows, n)), k, avail)


def select_batch(pos_dots, neg_dots, cfg, rng, pos_avail=None, neg_avail=None):
    """Pick positives and negatives for many anchors at once.

    ``pos_dots`` (A, P) and ``neg_dots`` (A, N) hold anchor-candidate dot
    products; optional ``*_avail`` masks restrict each anchor's candidates.
    Returns a (positives, negatives) pair of Selections.
    """
    pos = _select(np.asarray(pos_dots), pos_avail, cfg.k_pos, -1, cfg, rng)
    neg = _select(np.asarray(neg_dots), neg_avail, cfg.k_neg, +1, cfg, rng)
    return pos, neg


def select_examples(anchor, candidates_pos, candidates_neg, cfg, rng):
    """Single-anchor form of ``select_batch``; returns (positives, negatives) arrays."""
    anchor = np.asarray(anchor, dtype=np.float64)
    d = anchor.shape[0]
    cand_pos = np.asarray(candidates_pos, dtype=np.float64).reshape(-1, d)
    cand_neg = np.asarray(candidates_neg, dtype=np.float64).reshape(-1, d)
    pos, neg = select_batch((cand_pos @ anchor)[None], (cand_neg @ anchor)[None], cfg, rng)
    return cand_pos[pos.columns(0)], cand_neg[neg.columns(0)]
