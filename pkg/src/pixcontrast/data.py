"""Synthetic segmentation data and its manifest + raw-file disk format.

Layout of a dataset directory::

    manifest.tsv         # magic line, class count, column header, one row per image
    000000.f32           # H*W*F little-endian float32, row-major
    000000.u8            # H*W uint8 labels, row-major, 255 = ignore
"""
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from .core import IGNORE, CorruptFile, InvalidSpec, MissingManifest, make_rng

MANIFEST = "manifest.tsv"
_MAGIC_LINE = "#pixcontrast-dataset\tv1"
_COLUMNS = ("id", "split", "features", "labels", "height", "width", "channels")
LAYOUTS = ("voronoi", "blobs")


@dataclass
class SynthSpec:
    num_images: int = 64
    height: int = 32
    width: int = 32
    num_classes: int = 5
    feature_dim: int = 8
    noise_sigma: float = 1.0
    layout: str = "voronoi"
    seed: int = 0
    ignore_border: bool = False
    separation: float = 4.5  # closest prototype pair, in units of noise_sigma

    def validate(self):
        if self.num_images < 1:
            raise InvalidSpec("num_images must be >= 1")
        if self.height < 1 or self.width < 1 or self.feature_dim < 1:
            raise InvalidSpec("height, width and feature_dim must be >= 1")
        if not 1 <= self.num_classes < IGNORE:
            raise InvalidSpec(f"num_classes must lie in [1, {IGNORE})")
        if self.noise_sigma < 0 or not np.isfinite(self.noise_sigma):
            raise InvalidSpec("noise_sigma must be finite and >= 0")
        if self.separation <= 4:
            raise InvalidSpec("separation must exceed 4 (prototypes > 4 sigma apart)")
        if self.layout not in LAYOUTS:
            raise InvalidSpec(f"layout must be one of {LAYOUTS}")
        if self.ignore_border and (self.height < 3 or self.width < 3):
            raise InvalidSpec("ignore_border needs at least a 3x3 image")


@dataclass
class Dataset:
    features: list  # (H, W, F) float32 arrays
    labels: list  # (H, W) uint8 arrays
    splits: list  # "train" / "test" per image
    num_classes: int
    prototypes: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.features)

    @property
    def feature_dim(self):
        return self.features[0].shape[-1]

    def indices(self, split):
        return [i for i, s in enumerate(self.splits) if s == split]

    def equals(self, other):
        return (
            self.num_classes == other.num_classes
            and self.splits == other.splits
            and len(self) == len(other)
            and all(np.array_equal(a, b) and a.dtype == b.dtype for a, b in zip(self.features, other.features))
            and all(np.array_equal(a, b) for a, b in zip(self.labels, other.labels))
        )


def split_of(image_id):
    """Deterministic ~80/20 train/test assignment from a hash of the id."""
    return "test" if zlib.crc32(str(image_id).encode()) % 5 == 0 else "train"


def make_prototypes(num_classes, feature_dim, noise_sigma, separation, rng):
    """Gaussian class centres rescaled so the closest pair is ``separation * noise_sigma`` apart."""
    protos = rng.standard_normal((num_classes, feature_dim))
    if num_classes > 1 and noise_sigma > 0:
        diff = protos[:, None, :] - protos[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        protos *= separation * noise_sigma / dist[np.triu_indices(num_classes, 1)].min()
    return protos


def voronoi_labels(spec, rng):
    n_sites = int(rng.integers(spec.num_classes, 2 * spec.num_classes + 1))
    sites = rng.uniform(0, 1, size=(n_sites, 2)) * (spec.height, spec.width)
    site_class = rng.integers(0, spec.num_classes, size=n_sites)
    yy, xx = np.mgrid[0:spec.height, 0:spec.width] + 0.5
    d2 = (yy[..., None] - sites[:, 0]) ** 2 + (xx[..., None] - sites[:, 1]) ** 2
    return site_class[d2.argmin(axis=-1)].astype(np.uint8)


def blob_labels(spec, rng):
    labels = np.zeros((spec.height, spec.width), dtype=np.uint8)
    if spec.num_classes == 1:
        return labels
    yy, xx = np.mgrid[0:spec.height, 0:spec.width] + 0.5
    scale = min(spec.height, spec.width)
    for _ in range(int(rng.integers(2, 2 * spec.num_classes + 1))):
        cy, cx = rng.uniform(0, 1, 2) * (spec.height, spec.width)
        r = rng.uniform(0.1, 0.3) * scale
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        labels[inside] = rng.integers(1, spec.num_classes)
    return labels


def offset_field(spec, rng):
    """Smooth per-image sinusoidal offset with amplitude noise_sigma."""
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    freq = rng.uniform(0.0, 1.0, size=(2, spec.feature_dim))
    phase = rng.uniform(0.0, 2 * np.pi, size=spec.feature_dim)
    arg = 2 * np.pi * (yy[..., None] * freq[0] / spec.height + xx[..., None] * freq[1] / spec.width) + phase
    return spec.noise_sigma * np.sin(arg)


def generate(spec):
    spec.validate()
    proto_rng = make_rng(spec.seed, 0)
    prototypes = make_prototypes(spec.num_classes, spec.feature_dim, spec.noise_sigma, spec.separation, proto_rng)
    features, labels, splits = [], [], []
    for i in range(spec.num_images):
        rng = make_rng(spec.seed, 1, i)
        lab = voronoi_labels(spec, rng) if spec.layout == "voronoi" else blob_labels(spec, rng)
        feat = prototypes[lab]
        if spec.noise_sigma > 0:
            feat = feat + spec.noise_sigma * rng.standard_normal(feat.shape) + offset_field(spec, rng)
        if spec.ignore_border:
            lab[[0, -1], :] = IGNORE
            lab[:, [0, -1]] = IGNORE
        features.append(feat.astype(np.float32))
        labels.append(lab)
        splits.append(split_of(i))
    return Dataset(features, labels, splits, spec.num_classes, prototypes.astype(np.float32))


def save(dataset, directory):
    os.makedirs(directory, exist_ok=True)
    lines = [_MAGIC_LINE, f"#num_classes\t{dataset.num_classes}", "\t".join(_COLUMNS)]
    for i, (feat, lab, split) in enumerate(zip(dataset.features, dataset.labels, dataset.splits)):
        h, w, f = feat.shape
        feat_name, lab_name = f"{i:06d}.f32", f"{i:06d}.u8"
        with open(os.path.join(directory, feat_name), "wb") as fh:
            fh.write(np.ascontiguousarray(feat, dtype="<f4").tobytes())
        with open(os.path.join(directory, lab_name), "wb") as fh:
            fh.write(np.ascontiguousarray(lab, dtype=np.uint8).tobytes())
        lines.append("\t".join(map(str, (i, split, feat_name, lab_name, h, w, f))))
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_raw(path, dtype, count):
    if not os.path.exists(path):
        raise MissingManifest(f"manifest references missing file {path}")
    raw = np.fromfile(path, dtype=dtype)
    if raw.size != count or os.path.getsize(path) != count * np.dtype(dtype).itemsize:
        raise CorruptFile(f"{path}: expected {count} values, found {raw.size}")
    return raw


def load(directory):
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise MissingManifest(f"no {MANIFEST} in {directory}")
    with open(path) as fh:
        lines = fh.read().splitlines()
    if len(lines) < 3 or lines[0] != _MAGIC_LINE or tuple(lines[2].split("\t")) != _COLUMNS:
        raise CorruptFile(f"{path}: bad magic or header")
    key, value = lines[1].split("\t")
    if key != "#num_classes":
        raise CorruptFile(f"{path}: missing class count")
    features, labels, splits = [], [], []
    for row_no, line in enumerate(lines[3:]):
        cols = line.split("\t")
        if len(cols) != len(_COLUMNS):
            raise CorruptFile(f"{path}: malformed row {row_no}")
        image_id, split, feat_name, lab_name = cols[:4]
        h, w, f = map(int, cols[4:])
        if int(image_id) != row_no or split not in ("train", "test"):
            raise CorruptFile(f"{path}: bad id or split in row {row_no}")
        feat = _read_raw(os.path.join(directory, feat_name), "<f4", h * w * f)
        lab = _read_raw(os.path.join(directory, lab_name), np.uint8, h * w)
        features.append(feat.reshape(h, w, f).astype(np.float32))
        labels.append(lab.reshape(h, w))
        splits.append(split)
    if not features:
        raise CorruptFile(f"{path}: no images listed")
    return Dataset(features, labels, splits, int(value))
