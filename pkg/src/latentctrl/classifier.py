"""Latent-to-attribute classifiers.

A classifier maps a latent code to one attribute's logits through tanh hidden
layers and a linear head (sigmoid view for binary attributes, softmax view for
multi-class ones). Its input Jacobian is computed analytically; rows of that
Jacobian are the edit directions used by :mod:`latentctrl.control`.
"""

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CoverageError, DimensionError, DivergenceError, FormatError
from .numeric import Rng

log = logging.getLogger(__name__)

MAGIC = b"GCLF"
FORMAT_VERSION = 1  # two hidden layers, the layout (d, h, d_k) + W1,b1,W2,b2,W_out,b_out
FORMAT_VERSION_DEPTH = 2  # adds a u32 hidden-layer count after d_k


@dataclass(frozen=True)
class AttributeSpec:
    id: str
    num_classes: int = 1
    class_names: tuple = ()

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        names = tuple(self.class_names) or tuple(str(i) for i in range(self.n_labels))
        if len(names) != self.n_labels:
            raise ValueError(
                f"{self.id}: expected {self.n_labels} class names, got {len(names)}")
        object.__setattr__(self, "class_names", names)

    @property
    def binary(self):
        return self.num_classes == 1

    @property
    def n_labels(self):
        return max(self.num_classes, 2)


@dataclass
class LabeledLatent:
    z: np.ndarray
    label: int


@dataclass
class TrainConfig:
    examples_per_class: int = 30
    epochs: int = 500
    learning_rate: float = 0.05
    batch_size: int = 1024
    seed: int = 0
    hidden_width: int = 32
    hidden_layers: int = 2
    optimizer: str = "gd"  # "gd" or "adam"
    weight_decay: float = 0.1  # L2 on weight matrices, not biases

    def __post_init__(self):
        for name in ("examples_per_class", "epochs", "batch_size", "hidden_width",
                     "hidden_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class AttributeClassifier:
    """MLP ``z -> tanh(W1 z + b1) -> tanh(W2 . + b2) -> W_out . + b_out``.

    ``hidden`` holds the (W, b) pairs; the default depth is two.
    """

    attr: AttributeSpec
    hidden: list
    W_out: np.ndarray
    b_out: np.ndarray
    train_accuracy: float = field(default=float("nan"), compare=False)

    def __post_init__(self):
        fan_in = None
        for W, b in self.hidden:
            if fan_in is not None and W.shape[1] != fan_in:
                raise DimensionError("inconsistent hidden layer shapes")
            if b.shape != (W.shape[0],):
                raise DimensionError("hidden bias does not match layer width")
            fan_in = W.shape[0]
        if self.W_out.shape != (self.attr.num_classes, fan_in):
            raise DimensionError(f"head shape {self.W_out.shape} does not match "
                                 f"({self.attr.num_classes}, {fan_in})")
        if self.b_out.shape != (self.attr.num_classes,):
            raise DimensionError("head bias does not match num_classes")

    @property
    def input_dim(self):
        return self.hidden[0][0].shape[1]

    @property
    def hidden_width(self):
        return self.hidden[0][0].shape[0]

    @property
    def W1(self):
        return self.hidden[0][0]

    @property
    def b1(self):
        return self.hidden[0][1]

    @property
    def W2(self):
        return self.hidden[1][0]

    @property
    def b2(self):
        return self.hidden[1][1]

    def params(self):
        out = []
        for W, b in self.hidden:
            out += [W, b]
        return out + [self.W_out, self.b_out]


def init_classifier(attr, input_dim, cfg, rng):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
    hidden = []
    fan_in = input_dim
    for _ in range(cfg.hidden_layers):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, (cfg.hidden_width, fan_in))
        b = rng.uniform(-bound, bound, cfg.hidden_width)
        hidden.append((W, b))
        fan_in = cfg.hidden_width
    bound = 1.0 / np.sqrt(fan_in)
    W_out = rng.uniform(-bound, bound, (attr.num_classes, fan_in))
    b_out = rng.uniform(-bound, bound, attr.num_classes)
    return AttributeClassifier(attr, hidden, W_out, b_out)


def _check_z(clf, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != clf.input_dim:
        raise DimensionError(f"{clf.attr.id}: expected latent of length {clf.input_dim}, "
                             f"got {z.shape[-1]}")
    return z


def _activations(clf, Z):
    acts = [Z]
    h = Z
    for W, b in clf.hidden:
        h = np.tanh(h @ W.T + b)
        acts.append(h)
    return acts


def forward(clf, z):
    """Pre-head logits. Accepts a single latent (d,) or a batch (n, d)."""
    z = _check_z(clf, z)
    return _activations(clf, z)[-1] @ clf.W_out.T + clf.b_out


def probabilities(clf, z):
    logits = forward(clf, z)
    if clf.attr.binary:
        return 1.0 / (1.0 + np.exp(-logits))
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict(clf, z):
    """Integer labels: logit > 0 for binary, argmax otherwise."""
    logits = forward(clf, z)
    if clf.attr.binary:
        return (logits[..., 0] > 0).astype(np.int64)
    return np.argmax(logits, axis=-1)


def input_jacobian(clf, z):
    """(d_k, d) matrix of d logit_j / d z by the chain rule through tanh layers."""
    z = _check_z(clf, z)
    if z.ndim != 1:
        raise DimensionError("input_jacobian takes a single latent")
    acts = _activations(clf, z)
    J = clf.W_out
    for (W, _), h in zip(reversed(clf.hidden), reversed(acts[1:])):
        J = (J * (1.0 - h * h)) @ W
    return J


def gradient_row(clf, z, class_j=0):
    if not 0 <= class_j < clf.attr.num_classes:
        raise IndexError(f"{clf.attr.id}: class {class_j} out of range "
                         f"[0, {clf.attr.num_classes})")
    return input_jacobian(clf, z)[class_j]


def accuracy(clf, data):
    Z = np.stack([d.z for d in data])
    y = np.array([d.label for d in data])
    return float(np.mean(predict(clf, Z) == y))


def _loss_and_grads(clf, Z, y):
    n = Z.shape[0]
    acts = _activations(clf, Z)
    logits = acts[-1] @ clf.W_out.T + clf.b_out
    if clf.attr.binary:
        s = logits[:, 0]
        t = y.astype(np.float64)
        # stable BCE-with-logits
        loss = np.mean(np.maximum(s, 0) - s * t + np.log1p(np.exp(-np.abs(s))))
        delta = ((1.0 / (1.0 + np.exp(-s)) - t) / n)[:, None]
    else:
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = -np.mean(logp[np.arange(n), y])
        delta = np.exp(logp)
        delta[np.arange(n), y] -= 1.0
        delta /= n
    grads = [None] * (2 * len(clf.hidden) + 2)
    grads[-2] = delta.T @ acts[-1]
    grads[-1] = delta.sum(axis=0)
    back = delta @ clf.W_out
    for layer in range(len(clf.hidden) - 1, -1, -1):
        h = acts[layer + 1]
        back = back * (1.0 - h * h)
        grads[2 * layer] = back.T @ acts[layer]
        grads[2 * layer + 1] = back.sum(axis=0)
        back = back @ clf.hidden[layer][0]
    return loss, grads


def train(data, attr, cfg):
    """Fit a classifier on labelled latents. Deterministic given ``cfg.seed``."""
    if not data:
        raise CoverageError(f"{attr.id}: empty training set")
    Z = np.stack([np.asarray(d.z, dtype=np.float64) for d in data])
    y = np.array([int(d.label) for d in data], dtype=np.int64)
    if np.any((y < 0) | (y >= attr.n_labels)):
        raise ValueError(f"{attr.id}: label out of range [0, {attr.n_labels})")
    missing = sorted(set(range(attr.n_labels)) - set(y.tolist()))
    if missing:
        raise CoverageError(f"{attr.id}: no training examples for classes {missing}")

    rng = Rng(cfg.seed)
    clf = init_classifier(attr, Z.shape[1], cfg, rng.spawn("init"))
    shuffle = rng.spawn("shuffle")
    params = clf.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    t = 0
    n = Z.shape[0]
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(n) if cfg.batch_size < n else np.arange(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = _loss_and_grads(clf, Z[idx], y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            t += 1
            if cfg.weight_decay:
                loss += 0.5 * cfg.weight_decay * sum(float(np.sum(p * p)) for p in params[::2])
                for p, g in zip(params[::2], grads[::2]):
                    g += cfg.weight_decay * p
            for p, g, mi, vi in zip(params, grads, m, v):
                if cfg.optimizer == "adam":
                    mi *= 0.9
                    mi += 0.1 * g
                    vi *= 0.999
                    vi += 0.001 * g * g
                    step = (mi / (1 - 0.9**t)) / (np.sqrt(vi / (1 - 0.999**t)) + 1e-8)
                    p -= cfg.learning_rate * step
                else:
                    p -= cfg.learning_rate * g
    for p in params:
        if not np.all(np.isfinite(p)):
            raise DivergenceError(cfg.epochs - 1, float("nan"))
    clf.train_accuracy = accuracy(clf, data)
    log.info("%s: trained on %d examples, train accuracy %.3f",
             attr.id, n, clf.train_accuracy)
    return clf


def save(clf):
    depth = len(clf.hidden)
    widths = {W.shape[0] for W, _ in clf.hidden}
    if len(widths) != 1:
        raise ValueError("serialization requires equal hidden widths")
    version = FORMAT_VERSION if depth == 2 else FORMAT_VERSION_DEPTH
    name = clf.attr.id.encode("utf-8")
    parts = [MAGIC, struct.pack("<H", version),
             struct.pack("<III", clf.input_dim, clf.hidden_width, clf.attr.num_classes)]
    if version == FORMAT_VERSION_DEPTH:
        parts.append(struct.pack("<I", depth))
    parts.append(struct.pack("<H", len(name)))
    parts.append(name)
    for p in clf.params():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(parts)


def load(blob, class_names=()):
    blob = bytes(blob)

    def take(offset, size, what):
        if offset + size > len(blob):
            raise FormatError(f"truncated classifier blob reading {what}", offset)
        return blob[offset:offset + size], offset + size

    raw, off = take(0, 4, "magic")
    if raw != MAGIC:
        raise FormatError(f"bad magic {raw!r}, expected {MAGIC!r}", 0)
    raw, off = take(off, 2, "version")
    (version,) = struct.unpack("<H", raw)
    if version not in (FORMAT_VERSION, FORMAT_VERSION_DEPTH):
        raise FormatError(f"unsupported classifier format version {version}", off - 2)
    raw, off = take(off, 12, "dims")
    d, h, dk = struct.unpack("<III", raw)
    depth = 2
    if version == FORMAT_VERSION_DEPTH:
        raw, off = take(off, 4, "depth")
        (depth,) = struct.unpack("<I", raw)
    if min(d, h, dk, depth) < 1:
        raise FormatError(f"invalid dims d={d} h={h} d_k={dk} depth={depth}", off)
    raw, off = take(off, 2, "id length")
    (n_name,) = struct.unpack("<H", raw)
    raw, off = take(off, n_name, "attribute id")
    try:
        attr_id = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("attribute id is not valid UTF-8", off - n_name) from exc

    shapes = []
    fan_in = d
    for _ in range(depth):
        shapes += [(h, fan_in), (h,)]
        fan_in = h
    shapes += [(dk, h), (dk,)]
    expected = 8 * sum(int(np.prod(s)) for s in shapes)
    if len(blob) - off != expected:
        raise FormatError(f"parameter section is {len(blob) - off} bytes but dims "
                          f"({d}, {h}, {dk}) declare {expected}", off)
    arrays = []
    for shape in shapes:
        size = 8 * int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=off)
        if not np.all(np.isfinite(arr)):
            raise FormatError("non-finite parameter", off)
        arrays.append(arr.astype(np.float64).reshape(shape))
        off += size
    attr = AttributeSpec(attr_id, dk, tuple(class_names))
    hidden = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(depth)]
    return AttributeClassifier(attr, hidden, arrays[-2], arrays[-1])
