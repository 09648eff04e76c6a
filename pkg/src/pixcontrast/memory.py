"""Per-class pixel queues and the (class, image) region bank."""
import struct

import numpy as np

from .core import IGNORE, CorruptFile, ShapeMismatch, l2_normalize_rows

_HEADER = struct.Struct("<4I")


class PixelQueue:
    """Fixed-capacity FIFO of D-vectors backed by a ring buffer."""

    def __init__(self, class_id, capacity, dim):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.class_id = class_id
        self.capacity = capacity
        self.buf = np.zeros((capacity, dim))
        self.size = 0
        self.cursor = 0  # next slot to overwrite

    def __len__(self):
        return self.size

    def push(self, vectors):
        vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, self.buf.shape[1])
        if vectors.shape[0] >= self.capacity:
            vectors = vectors[-self.capacity:]
        n = vectors.shape[0]
        slots = (self.cursor + np.arange(n)) % self.capacity
        self.buf[slots] = vectors
        self.cursor = (self.cursor + n) % self.capacity
        self.size = min(self.capacity, self.size + n)

    def entries(self):
        """Stored vectors, oldest first."""
        if self.size < self.capacity:
            return self.buf[: self.size].copy()
        return np.roll(self.buf, -self.cursor, axis=0)


class RegionBank:
    def __init__(self, num_classes, num_images, dim):
        self.entries = np.zeros((num_classes, num_images, dim))
        self.valid = np.zeros((num_classes, num_images), dtype=bool)


def _flatten(embeddings, labels):
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if embeddings.shape[:-1] != labels.shape:
        raise ShapeMismatch(f"embeddings {embeddings.shape} vs labels {labels.shape}")
    return embeddings.reshape(-1, embeddings.shape[-1]), labels.ravel()


class MemoryBank:
    """Pixel queues (one per class, capacity T) plus a |C| x N region grid.

    Logical size is |C| x (N + T) x D.
    """

    def __init__(self, num_classes, num_images, capacity, dim, pixels_per_class=10):
        self.num_classes = num_classes
        self.num_images = num_images
        self.capacity = capacity
        self.dim = dim
        self.pixels_per_class = pixels_per_class
        self.pixel_queues = [PixelQueue(c, capacity, dim) for c in range(num_classes)]
        self.region_bank = RegionBank(num_classes, num_images, dim)

    def push_pixels(self, image_id, embeddings, labels, rng):
        """Enqueue up to V uniformly chosen pixels of every class in the image."""
        emb, lab = _flatten(embeddings, labels)
        for c in range(self.num_classes):
            where = np.flatnonzero(lab == c)
            if where.size == 0:
                continue
            take = rng.choice(where, size=min(self.pixels_per_class, where.size), replace=False)
            self.pixel_queues[c].push(emb[take])

    def update_region(self, image_id, embeddings, labels):
        """Overwrite the region entry of each class present with its normalized mean."""
        if not 0 <= image_id < self.num_images:
            raise IndexError(f"image id {image_id} outside [0, {self.num_images})")
        emb, lab = _flatten(embeddings, labels)
        valid = lab != IGNORE
        counts = np.bincount(lab[valid], minlength=self.num_classes)[: self.num_classes]
        present = np.flatnonzero(counts)
        if present.size == 0:
            return
        sums = np.zeros((self.num_classes, self.dim))
        np.add.at(sums, lab[valid].astype(np.intp), emb[valid])
        means = sums[present] / counts[present, None]
        self.region_bank.entries[present, image_id], _ = l2_normalize_rows(means)
        self.region_bank.valid[present, image_id] = True

    def snapshot(self, use_pixels=True, use_regions=True):
        """All stored vectors with their classes, in canonical order.

        Order: pixel entries class by class (oldest first), then valid region
        entries by (class, image).
        """
        vecs, classes = [], []
        if use_pixels:
            for q in self.pixel_queues:
                if q.size:
                    vecs.append(q.entries())
                    classes.append(np.full(q.size, q.class_id, dtype=np.intp))
        if use_regions:
            cls, img = np.nonzero(self.region_bank.valid)
            if cls.size:
                vecs.append(self.region_bank.entries[cls, img])
                classes.append(cls.astype(np.intp))
        if not vecs:
            return np.zeros((0, self.dim)), np.zeros(0, dtype=np.intp)
        return np.concatenate(vecs), np.concatenate(classes)

    def fetch_candidates(self, anchor_class, use_pixels=True, use_regions=True):
        """Split the stored vectors into (positives, negatives) for ``anchor_class``."""
        vecs, classes = self.snapshot(use_pixels, use_regions)
        same = classes == anchor_class
        return vecs[same], vecs[~same]

    def total_entries(self):
        return sum(len(q) for q in self.pixel_queues) + int(self.region_bank.valid.sum())

    # Dump layout (little-endian): u32 header |C|, N, T, D; u32 queue size per
    # class; f64 queues class-major, T slots each, oldest first, zero padded;
    # f64 region grid |C| x N x D; validity bitmap packed LSB-first.
    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(self.num_classes, self.num_images, self.capacity, self.dim))
            fh.write(np.array([len(q) for q in self.pixel_queues], dtype="<u4").tobytes())
            for q in self.pixel_queues:
                slots = np.zeros((self.capacity, self.dim))
                slots[: q.size] = q.entries()
                fh.write(slots.astype("<f8").tobytes())
            fh.write(self.region_bank.entries.astype("<f8").tobytes())
            fh.write(np.packbits(self.region_bank.valid.ravel(), bitorder="little").tobytes())

    @classmethod
    def load(cls, path, pixels_per_class=10):
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < _HEADER.size:
            raise CorruptFile(f"{path}: truncated header")
        c, n, t, d = _HEADER.unpack_from(raw)
        n_bits = c * n
        expected = _HEADER.size + 4 * c + 8 * (c * t * d + c * n * d) + (n_bits + 7) // 8
        if len(raw) != expected:
            raise CorruptFile(f"{path}: expected {expected} bytes, found {len(raw)}")
        bank = cls(c, n, t, d, pixels_per_class)
        off = _HEADER.size
        sizes = np.frombuffer(raw, dtype="<u4", count=c, offset=off)
        off += 4 * c
        queues = np.frombuffer(raw, dtype="<f8", count=c * t * d, offset=off).reshape(c, t, d)
        off += 8 * c * t * d
        for q, size, slots in zip(bank.pixel_queues, sizes, queues):
            if size > t:
                raise CorruptFile(f"{path}: queue size {size} exceeds capacity {t}")
            q.push(slots[:size])
        bank.region_bank.entries[:] = np.frombuffer(raw, dtype="<f8", count=c * n * d, offset=off).reshape(c, n, d)
        off += 8 * c * n * d
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, offset=off), bitorder="little")[:n_bits]
        bank.region_bank.valid[:] = bits.reshape(c, n).astype(bool)
        return bank
