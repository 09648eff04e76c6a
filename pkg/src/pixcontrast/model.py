"""Per-pixel toy network (embedder, segmentation head, projection head) and SGD.

All layers are shared linear maps applied independently to every pixel,
which is what a 1x1 convolution computes.
"""
import struct
from dataclasses import dataclass

import numpy as np

from .core import CorruptFile, ScheduleExhausted, ShapeMismatch, l2_normalize_rows

PARAM_NAMES = (
    "emb_w1", "emb_b1", "emb_w2", "emb_b2",
    "seg_w", "seg_b",
    "proj_w1", "proj_b1", "proj_w2", "proj_b2",
)
_MAGIC = b"PXNT"


class PixelNet:
    def __init__(self, in_dim, hidden_dim=32, embed_dim=16, num_classes=5, proj_dim=16, rng=None):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.num_classes = num_classes
        self.proj_dim = proj_dim
        self.params = {name: np.zeros(shape) for name, shape in self.shapes().items()}
        if rng is not None:
            self.init_uniform(rng)

    def shapes(self):
        f, h, d, c, p = self.in_dim, self.hidden_dim, self.embed_dim, self.num_classes, self.proj_dim
        return {
            "emb_w1": (f, h), "emb_b1": (h,), "emb_w2": (h, d), "emb_b2": (d,),
            "seg_w": (d, c), "seg_b": (c,),
            "proj_w1": (d, p), "proj_b1": (p,), "proj_w2": (p, p), "proj_b2": (p,),
        }

    def init_uniform(self, rng):
        """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases."""
        fan_in = {"emb": self.in_dim, "emb2": self.hidden_dim, "seg": self.embed_dim,
                  "proj": self.embed_dim, "proj2": self.proj_dim}
        for name in PARAM_NAMES:
            layer = name.split("_")[0] + ("2" if name.endswith("2") else "")
            bound = 1.0 / np.sqrt(fan_in[layer])
            self.params[name] = rng.uniform(-bound, bound, size=self.params[name].shape)

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def copy(self):
        other = PixelNet(self.in_dim, self.hidden_dim, self.embed_dim, self.num_classes, self.proj_dim)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def save(self, path):
        """Little-endian dump: magic, u32 tensor count, per-tensor u32 rank and
        dims, then every tensor as f64 in ``PARAM_NAMES`` order."""
        with open(path, "wb") as fh:
            fh.write(_MAGIC + struct.pack("<I", len(PARAM_NAMES)))
            for name in PARAM_NAMES:
                shape = self.params[name].shape
                fh.write(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
            for name in PARAM_NAMES:
                fh.write(self.params[name].astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != _MAGIC:
            raise CorruptFile(f"{path}: bad magic")
        try:
            (count,) = struct.unpack_from("<I", raw, 4)
            off = 8
            shapes = []
            for _ in range(count):
                (ndim,) = struct.unpack_from("<I", raw, off)
                shapes.append(struct.unpack_from(f"<{ndim}I", raw, off + 4))
                off += 4 + 4 * ndim
        except struct.error as exc:
            raise CorruptFile(f"{path}: truncated header") from exc
        if count != len(PARAM_NAMES):
            raise CorruptFile(f"{path}: expected {len(PARAM_NAMES)} tensors, found {count}")
        total = sum(int(np.prod(s)) for s in shapes)
        if len(raw) - off != 8 * total:
            raise CorruptFile(f"{path}: expected {8 * total} data bytes, found {len(raw) - off}")
        dims = dict(zip(PARAM_NAMES, shapes))
        net = cls(dims["emb_w1"][0], dims["emb_w1"][1], dims["emb_w2"][1], dims["seg_w"][1], dims["proj_w1"][1])
        for name, shape in dims.items():
            if tuple(shape) != net.params[name].shape:
                raise CorruptFile(f"{path}: inconsistent shape for {name}")
            n = int(np.prod(shape))
            net.params[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
        return net


@dataclass
class ForwardCache:
    x: np.ndarray
    h_pre: np.ndarray
    h: np.ndarray
    embeddings: np.ndarray
    logits: np.ndarray
    p_pre: np.ndarray
    p_hid: np.ndarray
    p_out: np.ndarray
    p_norm: np.ndarray
    projections: np.ndarray


def forward(net, features):
    """Run all three branches on (..., F) features; outputs are flattened to (P, .)."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != net.in_dim:
        raise ShapeMismatch(f"feature dim {features.shape[-1]} != network input {net.in_dim}")
    p = net.params
    x = features.reshape(-1, net.in_dim)
    h_pre = x @ p["emb_w1"] + p["emb_b1"]
    h = np.maximum(h_pre, 0.0)
    emb = h @ p["emb_w2"] + p["emb_b2"]
    logits = emb @ p["seg_w"] + p["seg_b"]
    p_pre = emb @ p["proj_w1"] + p["proj_b1"]
    p_hid = np.maximum(p_pre, 0.0)
    p_out = p_hid @ p["proj_w2"] + p["proj_b2"]
    proj, p_norm = l2_normalize_rows(p_out)
    return ForwardCache(x, h_pre, h, emb, logits, p_pre, p_hid, p_out, p_norm, proj)


def predict(net, features):
    """Segmentation-head argmax only; skips the projection branch."""
    p = net.params
    x = np.asarray(features, dtype=np.float64).reshape(-1, net.in_dim)
    emb = np.maximum(x @ p["emb_w1"] + p["emb_b1"], 0.0) @ p["emb_w2"] + p["emb_b2"]
    return (emb @ p["seg_w"] + p["seg_b"]).argmax(axis=1), emb


def backward(net, cache, d_logits, d_proj=None):
    """Parameter gradients given upstream gradients at logits and at the
    unit-norm projections (``d_proj=None`` means no contrastive signal)."""
    p = net.params
    n = cache.x.shape[0]
    if d_logits.shape != (n, net.num_classes):
        raise ShapeMismatch(f"logit gradient shape {d_logits.shape}")
    g = {}
    g["seg_w"] = cache.embeddings.T @ d_logits
    g["seg_b"] = d_logits.sum(axis=0)
    d_emb = d_logits @ p["seg_w"].T
    if d_proj is None:
        for name in ("proj_w1", "proj_b1", "proj_w2", "proj_b2"):
            g[name] = np.zeros_like(p[name])
    else:
        if d_proj.shape != (n, net.proj_dim):
            raise ShapeMismatch(f"projection gradient shape {d_proj.shape}")
        z = cache.projections
        # Jacobian of u / |u| is (I - z z^T) / |u|
        d_out = (d_proj - z * np.einsum("ij,ij->i", z, d_proj)[:, None]) / cache.p_norm[:, None]
        g["proj_w2"] = cache.p_hid.T @ d_out
        g["proj_b2"] = d_out.sum(axis=0)
        d_pre = (d_out @ p["proj_w2"].T) * (cache.p_pre > 0)
        g["proj_w1"] = cache.embeddings.T @ d_pre
        g["proj_b1"] = d_pre.sum(axis=0)
        d_emb = d_emb + d_pre @ p["proj_w1"].T
    g["emb_w2"] = cache.h.T @ d_emb
    g["emb_b2"] = d_emb.sum(axis=0)
    d_h = (d_emb @ p["emb_w2"].T) * (cache.h_pre > 0)
    g["emb_w1"] = cache.x.T @ d_h
    g["emb_b1"] = d_h.sum(axis=0)
    return g


class SGD:
    """SGD with momentum and L2 weight decay under polynomial lr decay."""

    def __init__(self, params, base_lr, total_iter, momentum=0.9, weight_decay=0.0005, power=0.9):
        self.base_lr = base_lr
        self.total_iter = total_iter
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.power = power
        self.iter = 0
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def lr(self, it=None):
        it = self.iter if it is None else it
        return self.base_lr * (1.0 - it / self.total_iter) ** self.power

    def step(self, params, grads):
        if self.iter >= self.total_iter:
            raise ScheduleExhausted(f"iteration {self.iter} >= total_iter {self.total_iter}")
        lr = self.lr()
        for name in PARAM_NAMES:
            v = self.velocity[name]
            v *= self.momentum
            v += grads[name] + self.weight_decay * params[name]
            params[name] -= lr * v
        self.iter += 1
        return params
