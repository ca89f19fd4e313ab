"""A small convolutional embedding network trained with plain numpy.

Architecture: three 3x3 stride-2 convolutions (padding 1) with ReLU, widths
8 -> 16 -> 32 by default, then a fully connected layer to a 128-d embedding.
A 64x64 input therefore reaches the dense layer as 32x8x8 features.

Parameters live in a dict of float64 arrays keyed by name, which is also the
order used in checkpoints. The optional :class:`ClassHead` supplies softmax
logits during training and is discarded at evaluation.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses, mining
from .errors import ConfigurationError, DimensionError, InstabilityError, ValidationError
from .linalg import make_rng

LOSS_KINDS = ("contrastive", "tl", "rtl", "softmax", "softmax-tl", "softmax-rtl")
_ALIASES = {
    "softmax+tl": "softmax-tl", "softmax+rtl": "softmax-rtl",
    "softmax_tl": "softmax-tl", "softmax_rtl": "softmax-rtl",
    "baseline": "softmax", "cross-entropy": "softmax",
}


def canonical_loss(kind: str) -> str:
    k = str(kind).strip().lower()
    k = _ALIASES.get(k, k)
    if k not in LOSS_KINDS:
        raise ConfigurationError(f"unknown loss kind {kind!r}; valid: {', '.join(LOSS_KINDS)}")
    return k


def uses_head(kind: str) -> bool:
    return canonical_loss(kind).startswith("softmax")


def metric_base(kind: str):
    k = canonical_loss(kind)
    if k.endswith("rtl"):
        return "RTL"
    if k.endswith("tl"):
        return "TL"
    return None


# -- convolution primitives -------------------------------------------------

def _im2col(x):
    n, c, h, w = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, ho, wo))
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + 2 * ho - 1:2, kj:kj + 2 * wo - 1:2]
    return cols.reshape(n, c * 9, ho * wo), (ho, wo)


def _col2im(dcols, x_shape, out_hw):
    n, c, h, w = x_shape
    ho, wo = out_hw
    dcols = dcols.reshape(n, c, 3, 3, ho, wo)
    dxp = np.zeros((n, c, h + 2, w + 2))
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + 2 * ho - 1:2, kj:kj + 2 * wo - 1:2] += dcols[:, :, ki, kj]
    return dxp[:, :, 1:h + 1, 1:w + 1]


def conv_forward(x, weight, bias):
    cols, hw = _im2col(x)
    out = np.matmul(weight.reshape(weight.shape[0], -1), cols) + bias[None, :, None]
    return out.reshape(x.shape[0], weight.shape[0], *hw), (cols, x.shape, hw)


def conv_backward(dout, weight, cache):
    cols, x_shape, hw = cache
    n, cout = dout.shape[:2]
    dout = dout.reshape(n, cout, -1)
    dw = np.einsum("nop,nkp->ok", dout, cols).reshape(weight.shape)
    db = dout.sum(axis=(0, 2))
    dcols = np.matmul(weight.reshape(cout, -1).T, dout)
    return _col2im(dcols, x_shape, hw), dw, db


# -- network ------------------------------------------------------------------

class EmbedNet:
    def __init__(self, widths=(8, 16, 32), embed_dim: int = 128, in_size: int = 64,
                 seed: int = 0, zero: bool = False):
        self.widths = tuple(int(w) for w in widths)
        self.embed_dim = int(embed_dim)
        self.in_size = int(in_size)
        rng = make_rng(seed, 101)
        self.params: dict[str, np.ndarray] = {}
        cin, side = 1, self.in_size
        for i, cout in enumerate(self.widths):
            fan_in = cin * 9
            bound = math.sqrt(6.0 / fan_in)
            self.params[f"conv{i}.w"] = rng.uniform(-bound, bound, (cout, cin, 3, 3))
            self.params[f"conv{i}.b"] = np.zeros(cout)
            cin, side = cout, (side + 1) // 2
        self.flat_dim = cin * side * side
        bound = math.sqrt(3.0 / self.flat_dim)
        self.params["fc.w"] = rng.uniform(-bound, bound, (self.flat_dim, self.embed_dim))
        self.params["fc.b"] = np.zeros(self.embed_dim)
        if zero:
            for p in self.params.values():
                p[...] = 0.0

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def _as_batch(self, images):
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (self.in_size, self.in_size):
            raise DimensionError(
                f"expected {self.in_size}x{self.in_size} grids, got shape {x.shape[-2:]}")
        return (x - 0.5)[:, None]

    def forward_batch(self, images):
        """Embed a stack of grids. Returns ``(embeddings, cache)``."""
        h = self._as_batch(images)
        caches = []
        for i in range(len(self.widths)):
            z, c = conv_forward(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"])
            h = np.maximum(z, 0.0)
            caches.append((c, z > 0))
        flat = h.reshape(h.shape[0], -1)
        out = flat @ self.params["fc.w"] + self.params["fc.b"]
        return out, (caches, flat, h.shape)

    def backward_batch(self, d_emb, cache):
        caches, flat, h_shape = cache
        grads = {"fc.w": flat.T @ d_emb, "fc.b": d_emb.sum(axis=0)}
        dh = (d_emb @ self.params["fc.w"].T).reshape(h_shape)
        for i in reversed(range(len(self.widths))):
            c, active = caches[i]
            dz = dh * active
            dh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv_backward(
                dz, self.params[f"conv{i}.w"], c)
        return grads

    def embed(self, images, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 2:
            return self.forward_batch(x)[0][0]
        chunks = [self.forward_batch(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros((0, self.embed_dim))

    def snapshot(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def load(self, snap: dict):
        for k in self.params:
            self.params[k] = snap[k].copy()


def forward(net: EmbedNet, instance) -> np.ndarray:
    grid = getattr(instance, "grid", instance)
    return net.embed(np.asarray(grid))


class ClassHead:
    """Linear classifier on the embedding; ``classes`` lists the identity per logit."""

    def __init__(self, embed_dim: int, classes, seed: int = 0):
        self.classes = [int(c) for c in classes]
        self.index = {c: i for i, c in enumerate(self.classes)}
        rng = make_rng(seed, 202)
        bound = math.sqrt(3.0 / embed_dim)
        self.params = {"head.w": rng.uniform(-bound, bound, (embed_dim, len(self.classes))),
                       "head.b": np.zeros(len(self.classes))}

    def logits(self, emb):
        return np.asarray(emb) @ self.params["head.w"] + self.params["head.b"]

    def targets(self, labels):
        try:
            return np.array([self.index[int(l)] for l in labels])
        except KeyError as exc:
            raise ConfigurationError(f"label {exc.args[0]} is not a head class") from None

    def predict(self, emb):
        return np.array(self.classes)[np.argmax(self.logits(np.atleast_2d(emb)), axis=1)]

    def snapshot(self):
        return {k: v.copy() for k, v in self.params.items()}

    def load(self, snap):
        for k in self.params:
            self.params[k] = snap[k].copy()


# -- losses over a batch ------------------------------------------------------

def embedding_loss(emb, labels, loss_kind, cfg: losses.LossConfig, head: ClassHead | None = None):
    """Loss value, gradient w.r.t. embeddings, and head gradients for one batch."""
    kind = canonical_loss(loss_kind)
    d_emb = np.zeros_like(emb)
    head_grads = None
    value = 0.0
    if kind == "contrastive":
        value, d_emb = mining.batch_contrastive_loss(emb, labels, cfg)
    if uses_head(kind):
        if head is None:
            raise ConfigurationError(f"loss {kind!r} needs a ClassHead")
        logits = head.logits(emb)
        value, d_logits = losses.batch_softmax_ce(logits, head.targets(labels))
        d_emb = d_logits @ head.params["head.w"].T
        head_grads = {"head.w": emb.T @ d_logits, "head.b": d_logits.sum(axis=0)}
    base = metric_base(kind)
    if base is not None:
        batch = mining.TripletBatch.from_labels(emb, labels)
        m, _, _, g = mining.batch_hard_loss(batch, cfg, base, with_grad=True)
        weight = cfg.lam if uses_head(kind) else 1.0
        value = value + weight * m
        d_emb = d_emb + weight * g
    return value, d_emb, head_grads


def backward(net: EmbedNet, head, images, labels, loss_kind, cfg=losses.DEFAULT,
             *, where: str = ""):
    """Loss and gradients for every network (and head) parameter on one batch."""
    with np.errstate(over="ignore", invalid="ignore"):
        emb, cache = net.forward_batch(images)
    if not np.all(np.isfinite(emb)):
        raise InstabilityError(f"non-finite embeddings{where}")
    value, d_emb, head_grads = embedding_loss(emb, labels, loss_kind, cfg, head)
    grads = net.backward_batch(d_emb, cache)
    if head_grads:
        grads.update(head_grads)
    if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise InstabilityError(f"non-finite loss or gradient{where}")
    return value, grads


# -- optimiser ----------------------------------------------------------------

@dataclass
class SgdState:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    momentum_enabled: bool = True
    velocity: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, state: SgdState) -> dict:
    """In-place SGD update with optional momentum and L2 weight decay."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        step = g + state.weight_decay * p
        if state.momentum_enabled:
            v = state.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            v = state.momentum * v + step
            state.velocity[name] = v
            step = v
        p -= state.learning_rate * step
    return params


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 40
    P: int = 8
    K: int = 2
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    k: int = 5
    seed: int = 0
    widths: tuple = (8, 16, 32)
    embed_dim: int = 128
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)
    # per loss kind: {"learning_rate": .., "momentum": .., "lam": .., "margin": ..}
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.P < 2 or self.K < 2:
            raise ConfigurationError("batches need P >= 2 and K >= 2")
        self.widths = tuple(self.widths)
        for kind in self.overrides:
            canonical_loss(kind)

    def for_loss(self, kind) -> "TrainConfig":
        """This config with the overrides for ``kind`` applied (and no overrides left)."""
        o = dict(self.overrides.get(canonical_loss(kind), {}))
        loss_fields = {k: o.pop(k) for k in ("lam", "margin", "epsilon") if k in o}
        return dataclasses.replace(self, loss=dataclasses.replace(self.loss, **loss_fields),
                                   overrides={}, **o)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = losses.LossConfig(**d.get("loss", {}))
        d["widths"] = tuple(d.get("widths", (8, 16, 32)))
        return cls(**d)


@dataclass
class PocketState:
    best_val_accuracy: float = -1.0
    best_epoch: int = 0
    best_parameters: dict | None = None
    history: list = field(default_factory=list)

    def update(self, epoch, acc, snap_fn):
        if acc > self.best_val_accuracy:
            self.best_val_accuracy = acc
            self.best_epoch = epoch
            self.best_parameters = snap_fn()
        self.history.append(self.best_val_accuracy)


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_accuracy: float
    wall_seconds: float


def momentum_for(kind: str) -> bool:
    """Momentum destabilises the reciprocal-triplet runs, so it is off for them."""
    return metric_base(kind) != "RTL"


def train(net: EmbedNet, head, train_pool: dict, val_set, images, loss_kind,
          config: TrainConfig, *, gallery_pool: dict | None = None, log=None):
    """Train ``net`` (and ``head``) and return ``(net, head, pocket, rows)``.

    ``train_pool`` maps identity -> training instance indices into ``images``;
    ``val_set`` is a list of (instance index, identity) pairs from known classes.
    Validation accuracy is kNN against the training instances, except for the
    pure softmax baseline which is scored by its own head. Final parameters are
    the pocket (best validation) snapshot.
    """
    from .openset import Gallery, knn_classify_many

    kind = canonical_loss(loss_kind)
    if uses_head(kind) and head is None:
        raise ConfigurationError(f"loss {kind!r} needs a ClassHead")
    classes = sorted(train_pool)
    P = min(config.P, len(classes))
    K = max(config.K, (config.P * config.K) // P)
    if P < 2:
        raise ConfigurationError("training needs at least 2 known classes")
    rng = make_rng(config.seed, 303)
    state = SgdState(config.learning_rate, config.momentum, config.weight_decay,
                     momentum_enabled=momentum_for(kind))
    params = dict(net.params)
    if head is not None:
        params.update(head.params)
    n_train = sum(len(v) for v in train_pool.values())
    per_epoch = max(1, math.ceil(n_train / (P * K)))
    gallery_pool = gallery_pool or train_pool
    g_idx = np.array([i for c in sorted(gallery_pool) for i in gallery_pool[c]])
    g_lab = np.array([c for c in sorted(gallery_pool) for _ in gallery_pool[c]])
    v_idx = np.array([i for i, _ in val_set])
    v_lab = np.array([c for _, c in val_set])

    def snap():
        s = net.snapshot()
        if head is not None:
            s.update(head.snapshot())
        return s

    pocket = PocketState()
    rows = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        for b in range(per_epoch):
            ids, labels = mining.sample_batch(train_pool, P, K, rng)
            value, grads = backward(net, head, images[ids], labels, kind, config.loss,
                                    where=f" at epoch {epoch}, batch {b}")
            sgd_step(params, grads, state)
            total += value
        if kind == "softmax":
            pred = head.predict(net.embed(images[v_idx]))
        else:
            gallery = Gallery(net.embed(images[g_idx]), g_lab)
            pred = knn_classify_many(gallery, net.embed(images[v_idx]), config.k)
        acc = float(np.mean(pred == v_lab)) if len(v_lab) else 0.0
        pocket.update(epoch, acc, snap)
        rows.append(EpochRow(epoch, total / per_epoch, acc, time.perf_counter() - t0))
        if log:
            log(rows[-1])
    net.load(pocket.best_parameters)
    if head is not None:
        head.load(pocket.best_parameters)
    return net, head, pocket, rows


def write_epoch_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_accuracy", "wall_seconds"])
        for r in rows:
            w.writerow([r.epoch, f"{r.train_loss:.10g}", f"{r.val_accuracy:.6f}",
                        f"{r.wall_seconds:.3f}"])


# -- checkpoints --------------------------------------------------------------

MAGIC = b"HMW1"


def save_checkpoint(path, params: dict, meta: dict | None = None):
    """Write ``params`` as: b"HMW1", u32 LE header length, JSON header, float64 LE data."""
    names = list(params)
    header = {"format": "herdmetric-weights-v1",
              "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
              "meta": meta or {}}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValidationError(f"{path}: not a herdmetric checkpoint")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    off = 8 + hlen
    params = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off)
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        off += 8 * count
    if off != len(data):
        raise ValidationError(f"{path}: trailing bytes after parameter data")
    return params, header.get("meta", {})
