"""Training loop for the joint CE + pixel-contrast objective, and ablation sweeps."""
import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .core import IGNORE, PixContrastError, make_rng
from .losses import GRAD_MODES, contrast_terms, cross_entropy_pixels
from .memory import MemoryBank
from .metrics import ConfusionMatrix, EmbeddingStructure, embedding_structure, miou
from .model import SGD, PixelNet, backward, forward, predict
from .sampling import SamplingConfig, sample_anchors, select_batch

log = logging.getLogger(__name__)

ABLATIONS = ("baseline_ce", "intra_image", "inter_image")
MEMORY_MODES = ("none", "pixel", "region", "both")

# independent RNG sub-streams per consumer
_INIT, _BATCH, _ANCHOR, _SELECT, _MEMORY, _METRIC = range(10, 16)


@dataclass
class DataConfig(data_mod.SynthSpec):
    dir: str = ""  # load from here instead of generating when set


@dataclass
class TrainConfig:
    tau: float = 0.1
    lam: float = 1.0
    v: int = 10
    t: int = 0  # 0 means 10 * number of training images
    batch_size: int = 1
    total_iter: int = 2000
    base_lr: float = 1.5e-4
    momentum: float = 0.9
    weight_decay: float = 0.0005
    power: float = 0.9
    seed: int = 0
    grad_mode: str = "exact"
    ablation: str = "inter_image"
    memory_mode: str = "both"
    eval_interval: int = 100
    max_pairs: int = 20000
    hidden_dim: int = 32
    embed_dim: int = 16
    proj_dim: int = 16
    # K scaled to the desk-size bank; SamplingConfig keeps the full-scale 1024 / 2048
    sampling: SamplingConfig = field(default_factory=lambda: SamplingConfig(k_pos=20, k_neg=40))
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        for name in ("v", "batch_size", "total_iter", "eval_interval", "max_pairs", "hidden_dim", "embed_dim", "proj_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.t < 0:
            raise ValueError("t must be >= 0 (0 selects 10 * N)")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.memory_mode not in MEMORY_MODES:
            raise ValueError(f"memory_mode must be one of {MEMORY_MODES}")
        self.sampling.validate()
        if not self.data.dir:
            self.data.validate()


class TrainingDiverged(PixContrastError):
    pass


@dataclass
class StepInfo:
    iteration: int
    batch: list
    ce_loss: float
    nce_loss: float
    ce_terms: int
    nce_terms: int
    anchors: int
    candidates: int


@dataclass
class TrainReport:
    loss_curve: list
    metric_rows: list
    final_miou: float
    final_iou: np.ndarray
    final_structure: object
    wall_clock: float
    net: PixelNet = field(repr=False, default=None)
    bank: MemoryBank = field(repr=False, default=None)

    def metrics_csv(self):
        return metrics_csv(self.metric_rows)


def load_dataset(cfg):
    if cfg.data.dir:
        return data_mod.load(cfg.data.dir)
    spec = data_mod.SynthSpec(**{k: getattr(cfg.data, k) for k in data_mod.SynthSpec.__dataclass_fields__})
    return data_mod.generate(spec)


def _fmt(x):
    return repr(float(x))


def metrics_csv(rows):
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    n_cls = len(rows[0]["iou"])
    writer.writerow(["iter", "miou"] + [f"iou_{c}" for c in range(n_cls)] + ["intra", "inter", "ce_loss", "nce_loss"])
    for r in rows:
        writer.writerow([r["iter"], _fmt(r["miou"])] + [_fmt(x) for x in r["iou"]]
                        + [_fmt(r["intra"]), _fmt(r["inter"]), _fmt(r["ce_loss"]), _fmt(r["nce_loss"])])
    return buf.getvalue()


class Trainer:
    """Holds network, optimizer and memory; ``step`` runs one iteration."""

    def __init__(self, dataset, cfg):
        cfg.validate()
        self.cfg = cfg
        self.dataset = dataset
        self.train_ids = dataset.indices("train")
        self.test_ids = dataset.indices("test")
        if not self.train_ids:
            raise ValueError("dataset has no training images")
        if not self.test_ids:
            log.warning("dataset has no test images; evaluation metrics will be NaN")
        # region-bank row of each training image
        self.bank_row = {img: n for n, img in enumerate(self.train_ids)}
        self.net = PixelNet(dataset.feature_dim, cfg.hidden_dim, cfg.embed_dim, dataset.num_classes,
                            cfg.proj_dim, rng=make_rng(cfg.seed, _INIT))
        self.opt = SGD(self.net.params, cfg.base_lr, cfg.total_iter, cfg.momentum, cfg.weight_decay, cfg.power)
        self.rng_batch = make_rng(cfg.seed, _BATCH)
        self.rng_anchor = make_rng(cfg.seed, _ANCHOR)
        self.rng_select = make_rng(cfg.seed, _SELECT)
        self.rng_memory = make_rng(cfg.seed, _MEMORY)
        self.capacity = cfg.t or 10 * len(self.train_ids)
        self.bank = None
        if self.uses_bank:
            self.bank = MemoryBank(dataset.num_classes, len(self.train_ids), self.capacity, cfg.proj_dim, cfg.v)
        self.iteration = 0

    @property
    def contrast_on(self):
        return self.cfg.ablation != "baseline_ce"

    @property
    def uses_bank(self):
        return self.cfg.ablation == "inter_image" and self.cfg.memory_mode != "none"

    def _candidates(self, cache, labels):
        """Candidate vectors, their classes and an optional per-anchor availability rule."""
        if self.uses_bank:
            mode = self.cfg.memory_mode
            vecs, classes = self.bank.snapshot(mode in ("pixel", "both"), mode in ("region", "both"))
            return vecs, classes, None
        # current mini-batch (or only the anchor's own image for intra-image)
        keep = np.flatnonzero(labels != IGNORE)
        return cache.projections[keep].copy(), labels[keep].astype(np.intp), keep

    def _contrast(self, cache, labels, preds, pixels_per_image):
        cfg = self.cfg
        anchors = sample_anchors(labels, preds, cfg.sampling.anchors_per_class, cfg.sampling.anchor_mode,
                                 self.rng_anchor)
        vecs, classes, cand_pix = self._candidates(cache, labels)
        used_idx, losses_all, grads_all = [], [], []
        for c in np.unique(anchors.classes):
            a_idx = anchors.index[anchors.classes == c]
            a_vec = cache.projections[a_idx]
            pos_cols = np.flatnonzero(classes == c)
            neg_cols = np.flatnonzero(classes != c)
            if pos_cols.size == 0:
                continue
            pos_avail = neg_avail = None
            if cand_pix is not None:
                pos_avail = cand_pix[pos_cols][None, :] != a_idx[:, None]
                neg_avail = np.ones((a_idx.size, neg_cols.size), dtype=bool)
                if cfg.ablation == "intra_image":
                    a_img = a_idx // pixels_per_image
                    pos_avail &= (cand_pix[pos_cols] // pixels_per_image)[None, :] == a_img[:, None]
                    neg_avail &= (cand_pix[neg_cols] // pixels_per_image)[None, :] == a_img[:, None]
            cand_pos, cand_neg = vecs[pos_cols], vecs[neg_cols]
            pos_dots, neg_dots = a_vec @ cand_pos.T, a_vec @ cand_neg.T
            pos_sel, neg_sel = select_batch(pos_dots, neg_dots, cfg.sampling, self.rng_select, pos_avail, neg_avail)
            ok = pos_sel.counts() > 0
            if not ok.any():
                continue
            if not ok.all():
                a_vec, pos_sel, neg_sel = a_vec[ok], pos_sel.rows(ok), neg_sel.rows(ok)
                pos_dots, neg_dots = pos_dots[ok], neg_dots[ok]
            losses, grads = contrast_terms(a_vec, cand_pos, cand_neg, pos_sel, neg_sel, cfg.tau, cfg.grad_mode,
                                           dots=(pos_dots, neg_dots))
            used_idx.append(a_idx[ok])
            losses_all.append(losses)
            grads_all.append(grads)
        if not used_idx:
            return 0.0, 0, None, len(anchors), vecs.shape[0]
        used_idx = np.concatenate(used_idx)
        losses = np.concatenate(losses_all)
        n = losses.size
        d_proj = np.zeros_like(cache.projections)
        np.add.at(d_proj, used_idx, np.concatenate(grads_all) * (cfg.lam / n))
        return float(losses.mean()), n, d_proj, len(anchors), vecs.shape[0]

    def step(self):
        cfg = self.cfg
        n_batch = min(cfg.batch_size, len(self.train_ids))
        batch = [int(i) for i in self.rng_batch.choice(self.train_ids, size=n_batch, replace=False)]
        feats = np.stack([self.dataset.features[i] for i in batch]).astype(np.float64)
        labels = np.stack([self.dataset.labels[i] for i in batch])
        pixels_per_image = labels[0].size
        flat_labels = labels.ravel()
        cache = forward(self.net, feats)
        ce, d_logits, n_ce = cross_entropy_pixels(cache.logits, flat_labels)
        nce, n_nce, d_proj, n_anchor, n_cand = 0.0, 0, None, 0, 0
        if self.contrast_on:
            preds = cache.logits.argmax(axis=1)
            nce, n_nce, d_proj, n_anchor, n_cand = self._contrast(cache, flat_labels, preds, pixels_per_image)
        if not (np.isfinite(ce) and np.isfinite(nce)):
            raise TrainingDiverged(f"non-finite loss at iteration {self.iteration}: ce={ce} nce={nce}")
        grads = backward(self.net, cache, d_logits, d_proj)
        self.opt.step(self.net.params, grads)
        if self.bank is not None:
            proj = cache.projections.reshape(n_batch, pixels_per_image, -1)
            for b, img in enumerate(batch):
                row = self.bank_row[img]
                self.bank.push_pixels(row, proj[b], labels[b].ravel(), self.rng_memory)
                self.bank.update_region(row, proj[b], labels[b].ravel())
        self.iteration += 1
        return StepInfo(self.iteration, batch, ce, nce, n_ce, n_nce, n_anchor, n_cand)

    def evaluate(self, ids=None):
        """Test-split mIoU and structure of the normalized shared embeddings."""
        ids = self.test_ids if ids is None else ids
        cm = ConfusionMatrix(self.dataset.num_classes)
        embs, labs = [], []
        for i in ids:
            pred, emb = predict(self.net, self.dataset.features[i])
            cm.update(self.dataset.labels[i], pred)
            embs.append(emb)
            labs.append(self.dataset.labels[i].ravel())
        mean, iou = miou(cm)
        if not embs:
            return mean, iou, EmbeddingStructure(float("nan"), float("nan"), np.zeros(0))
        emb = np.concatenate(embs)
        emb = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
        structure = embedding_structure(emb, np.concatenate(labs), self.cfg.max_pairs,
                                        make_rng(self.cfg.seed, _METRIC))
        return mean, iou, structure

    def dump_state(self, path):
        state = {"iteration": self.iteration, "lr": self.opt.lr() if self.opt.iter < self.opt.total_iter else 0.0,
                 "param_norms": {k: float(np.linalg.norm(v)) for k, v in self.net.params.items()},
                 "param_finite": {k: bool(np.isfinite(v).all()) for k, v in self.net.params.items()}}
        with open(path, "w") as fh:
            json.dump(state, fh, indent=2)


def train(dataset, cfg, out_dir=None, on_step=None):
    """Run ``cfg.total_iter`` iterations, evaluating every ``eval_interval`` and at the end.

    When ``out_dir`` is given, ``metrics.csv``, ``model.ckpt`` and (if a bank
    is used) ``memory.bin`` are written there.
    """
    start = time.perf_counter()
    trainer = Trainer(dataset, cfg)
    curve, rows = [], []
    ce_acc = nce_acc = 0.0
    n_acc = 0
    structure = None
    mean = float("nan")
    iou = None
    try:
        for it in range(cfg.total_iter):
            info = trainer.step()
            if on_step is not None:
                on_step(trainer, info)
            curve.append((info.ce_loss, info.nce_loss, info.ce_loss + cfg.lam * info.nce_loss))
            ce_acc += info.ce_loss
            nce_acc += info.nce_loss
            n_acc += 1
            if info.iteration % cfg.eval_interval == 0 or info.iteration == cfg.total_iter:
                mean, iou, structure = trainer.evaluate()
                rows.append({"iter": info.iteration, "miou": mean, "iou": iou, "intra": structure.intra,
                             "inter": structure.inter, "ce_loss": ce_acc / n_acc, "nce_loss": nce_acc / n_acc})
                log.info("iter %d miou %.4f ce %.4f nce %.4f", info.iteration, mean, ce_acc / n_acc, nce_acc / n_acc)
                ce_acc = nce_acc = 0.0
                n_acc = 0
    except TrainingDiverged:
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            trainer.dump_state(os.path.join(out_dir, "diverged_state.json"))
        raise
    report = TrainReport(curve, rows, mean, iou, structure, time.perf_counter() - start, trainer.net, trainer.bank)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
            fh.write(report.metrics_csv())
        trainer.net.save(os.path.join(out_dir, "model.ckpt"))
        if trainer.bank is not None:
            trainer.bank.save(os.path.join(out_dir, "memory.bin"))
    return report


PRESETS = {
    "scope": [
        ("baseline_ce", {"ablation": "baseline_ce"}),
        ("intra_image", {"ablation": "intra_image"}),
        ("inter_image", {"ablation": "inter_image"}),
    ],
    "memory": [
        ("baseline_ce", {"ablation": "baseline_ce"}),
        ("mini_batch", {"ablation": "inter_image", "memory_mode": "none"}),
        ("pixel", {"ablation": "inter_image", "memory_mode": "pixel"}),
        ("region", {"ablation": "inter_image", "memory_mode": "region"}),
        ("pixel_region", {"ablation": "inter_image", "memory_mode": "both"}),
    ],
    "sampling": [("baseline_ce", {"ablation": "baseline_ce"})] + [
        (f"{anchor}/{strategy}", {"ablation": "inter_image", "sampling.anchor_mode": anchor,
                                  "sampling.strategy": strategy})
        for anchor in ("random", "seg_aware") for strategy in ("random", "hardest", "semi_hard")
    ],
}


def _run_cell(args):
    dataset, cfg = args
    report = train(dataset, cfg)
    return report.final_miou, report.final_structure.intra, report.final_structure.inter, report.wall_clock


def ablate(dataset, base_cfg, grid, seeds=(0,), jobs=1):
    """One training run per (cell, seed). ``grid`` is a list of (name, overrides).

    Returns one row per cell with per-seed and mean final mIoU and embedding
    structure.
    """
    from .config import apply_overrides

    tasks, names = [], []
    for name, overrides in grid:
        for seed in seeds:
            cfg = apply_overrides(base_cfg, {**{k: str(v) for k, v in overrides.items()}, "seed": str(seed)})
            tasks.append((dataset, cfg))
            names.append((name, seed))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    table = []
    for name, overrides in grid:
        cell = [r for (n, _), r in zip(names, results) if n == name]
        table.append({
            "cell": name,
            "overrides": dict(overrides),
            "seeds": list(seeds),
            "miou": [r[0] for r in cell],
            "intra": [r[1] for r in cell],
            "inter": [r[2] for r in cell],
            "mean_miou": float(np.mean([r[0] for r in cell])),
            "mean_intra": float(np.mean([r[1] for r in cell])),
            "mean_inter": float(np.mean([r[2] for r in cell])),
            "wall_clock": float(sum(r[3] for r in cell)),
        })
    return table


def ablation_csv(table):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["cell", "seeds", "mean_miou", "mean_intra", "mean_inter", "miou_per_seed"])
    for row in table:
        writer.writerow([row["cell"], " ".join(map(str, row["seeds"])), _fmt(row["mean_miou"]),
                         _fmt(row["mean_intra"]), _fmt(row["mean_inter"]), " ".join(_fmt(x) for x in row["miou"])])
    return buf.getvalue()
