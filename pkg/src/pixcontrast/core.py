"""Shared numerics: errors, seeded RNG streams, label-map checks and small vector ops.

Dense tensors are plain float64 numpy arrays in row-major (C) order.
Label maps are uint8 arrays where ``IGNORE`` marks unlabeled pixels.
"""
import numpy as np

IGNORE = 255
EPS = 1e-12


class PixContrastError(Exception):
    """Base class for every error raised by this package."""


class ZeroVector(PixContrastError):
    pass


class LengthMismatch(PixContrastError):
    pass


class ShapeMismatch(PixContrastError):
    pass


class IgnoredPixel(PixContrastError):
    pass


class EmptyPositives(PixContrastError):
    pass


class EmptyCeTerms(PixContrastError):
    pass


class ScheduleExhausted(PixContrastError):
    pass


class InvalidSpec(PixContrastError):
    pass


class CorruptFile(PixContrastError):
    pass


class MissingManifest(PixContrastError):
    pass


class ConfigError(PixContrastError):
    pass


Rng = np.random.Generator


def make_rng(seed, *stream):
    """PCG64 generator for ``seed``; extra ints select an independent sub-stream.

    Streams with different ``stream`` tuples never share state, so consuming
    draws in one part of the trainer cannot shift another part's sequence.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def as_label_map(labels, num_classes=None):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeMismatch(f"label map must be 2-D, got shape {labels.shape}")
    labels = labels.astype(np.uint8, copy=False)
    if num_classes is not None:
        bad = (labels != IGNORE) & (labels >= num_classes)
        if bad.any():
            raise ValueError(f"label values must be < {num_classes} or {IGNORE}")
    return labels


def l2_normalize(v):
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(dot(v, v))
    if norm <= EPS:
        raise ZeroVector("cannot normalize a vector with norm <= 1e-12")
    return v / norm


def l2_normalize_rows(x):
    """Row-wise unit normalization; also returns the norms for backprop."""
    norms = np.sqrt(np.einsum("...i,...i->...", x, x))
    if np.any(norms <= EPS):
        raise ZeroVector("cannot normalize a vector with norm <= 1e-12")
    return x / norms[..., None], norms


def softmax(y):
    y = np.asarray(y, dtype=np.float64)
    z = np.exp(y - y.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def log_softmax(y):
    y = np.asarray(y, dtype=np.float64)
    shifted = y - y.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def dot(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise LengthMismatch(f"dot of lengths {a.size} and {b.size}")
    total = 0.0
    for x, y in zip(a.tolist(), b.tolist()):
        total += x * y
    return total
