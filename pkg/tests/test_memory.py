import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import unit_rows
from pixcontrast.core import IGNORE, CorruptFile, make_rng
from pixcontrast.memory import MemoryBank, PixelQueue


def replay_ok(capacity, pushes, dim=3):
    q = PixelQueue(0, capacity, dim)
    history = []
    for block in pushes:
        q.push(block)
        history.extend(block)
        expected = np.array(history[-capacity:]).reshape(-1, dim)
        if not np.array_equal(q.entries(), expected):
            return False
    return len(q) == min(capacity, len(history))


class TestPixelQueue:
    def test_small_example(self):
        q = PixelQueue(0, 3, 1)
        for v in (1, 2, 3, 4):
            q.push([[v]])
        np.testing.assert_array_equal(q.entries().ravel(), [2, 3, 4])

    def test_oversized_push(self):
        q = PixelQueue(0, 3, 1)
        q.push(np.arange(7.0)[:, None])
        np.testing.assert_array_equal(q.entries().ravel(), [4, 5, 6])

    def test_fifo_replay_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            cap = int(rng.integers(1, 12))
            pushes = [rng.standard_normal((int(rng.integers(0, 8)), 3)) for _ in range(int(rng.integers(1, 20)))]
            assert replay_ok(cap, [list(p) for p in pushes])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 10), st.lists(st.integers(0, 15), max_size=25))
    def test_size_never_exceeds_capacity(self, cap, sizes):
        q = PixelQueue(0, cap, 2)
        for n in sizes:
            q.push(np.ones((n, 2)))
            assert len(q) <= cap


class TestMemoryBank:
    def test_push_pixels_counts(self):
        bank = MemoryBank(num_classes=2, num_images=1, capacity=50, dim=2, pixels_per_class=3)
        emb = unit_rows(np.random.default_rng(0), 10, 2)
        labels = np.array([0] * 2 + [1] * 8)
        bank.push_pixels(0, emb, labels, make_rng(0))
        assert len(bank.pixel_queues[0]) == 2 and len(bank.pixel_queues[1]) == 3
        # pushed rows are real pixels of the right class
        for row in bank.pixel_queues[1].entries():
            assert any(np.array_equal(row, e) for e in emb[labels == 1])

    def test_ignore_pixels_never_enqueued(self):
        bank = MemoryBank(2, 1, 50, 2, 10)
        emb = unit_rows(np.random.default_rng(1), 6, 2)
        bank.push_pixels(0, emb, [IGNORE] * 6, make_rng(0))
        assert bank.total_entries() == 0

    def test_region_hand_case(self):
        bank = MemoryBank(1, 1, 4, 2)
        bank.update_region(0, np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 0]))
        np.testing.assert_allclose(bank.region_bank.entries[0, 0], [0.70710678, 0.70710678], atol=1e-8)

    def test_region_matches_bruteforce_class_mean(self):
        rng = np.random.default_rng(4)
        for trial in range(20):
            bank = MemoryBank(4, 3, 10, 5)
            emb = unit_rows(rng, 64, 5).reshape(8, 8, 5)
            labels = rng.integers(0, 4, size=(8, 8))
            labels[rng.random((8, 8)) < 0.1] = IGNORE
            bank.update_region(1, emb, labels)
            for c in range(4):
                members = [emb[i, j] for i in range(8) for j in range(8) if labels[i, j] == c]
                if not members:
                    assert not bank.region_bank.valid[c, 1]
                    continue
                mean = np.sum(members, axis=0) / len(members)
                np.testing.assert_allclose(bank.region_bank.entries[c, 1], mean / np.linalg.norm(mean), atol=1e-9)
            assert not bank.region_bank.valid[:, [0, 2]].any()

    def test_region_overwrite(self):
        bank = MemoryBank(1, 1, 4, 2)
        bank.update_region(0, np.array([[1.0, 0.0]]), np.array([0]))
        bank.update_region(0, np.array([[0.0, 1.0]]), np.array([0]))
        np.testing.assert_array_equal(bank.region_bank.entries[0, 0], [0, 1])

    def test_fetch_candidates_partition(self):
        bank = MemoryBank(3, 2, 5, 2)
        rng = make_rng(3)
        for img in range(2):
            emb = unit_rows(np.random.default_rng(img), 9, 2)
            lab = np.arange(9) % 3
            bank.push_pixels(img, emb, lab, rng)
            bank.update_region(img, emb, lab)
        pos, neg = bank.fetch_candidates(1)
        assert len(pos) + len(neg) == bank.total_entries()
        vecs, classes = bank.snapshot()
        np.testing.assert_array_equal(pos, vecs[classes == 1])
        pos_p, _ = bank.fetch_candidates(1, use_regions=False)
        assert len(pos_p) == len(bank.pixel_queues[1])

    def test_save_load_roundtrip(self, tmp_path):
        bank = MemoryBank(3, 4, 6, 2, pixels_per_class=4)
        rng = make_rng(1)
        for img in range(4):
            emb = unit_rows(np.random.default_rng(img), 12, 2)
            lab = np.random.default_rng(img + 10).integers(0, 3, 12)
            bank.push_pixels(img, emb, lab, rng)
            bank.update_region(img, emb, lab)
        path = tmp_path / "memory.bin"
        bank.save(path)
        back = MemoryBank.load(path, pixels_per_class=4)
        for a, b in zip(bank.pixel_queues, back.pixel_queues):
            np.testing.assert_array_equal(a.entries(), b.entries())
        np.testing.assert_array_equal(bank.region_bank.entries, back.region_bank.entries)
        np.testing.assert_array_equal(bank.region_bank.valid, back.region_bank.valid)
        back.save(tmp_path / "again.bin")
        assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()

    def test_load_rejects_truncated(self, tmp_path):
        bank = MemoryBank(2, 2, 3, 2)
        path = tmp_path / "m.bin"
        bank.save(path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(CorruptFile):
            MemoryBank.load(path)
