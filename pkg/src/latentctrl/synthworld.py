"""Synthetic latent world with known attribute functions.

Latents are Gaussian with a block factor structure: every channel in block
``b`` is ``lam * u_b + noise * eps`` where the block factors ``u`` are drawn
with a configurable correlation matrix and ``lam = sqrt(1 - noise**2)``, so
each channel is marginally standard normal. Correlated blocks are how the
default world plants spurious attribute correlations into training data.

Attribute scores are analytic functions of the channels:

    score_j(z) = w_j . z[support] + b_j
                 + sum_t weight_t * mean(z[confound_support_t])
                 + gain * tanh(v . z[support] + offset)      (optional squash)
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import AttributeSpec, LabeledLatent
from .errors import CoverageError, DimensionError, FormatError, LookupFailure
from .numeric import Rng

BANK_MAGIC = b"GCLB"
BANK_VERSION = 1
SHARD_SIZE = 8192


@dataclass(frozen=True)
class Block:
    name: str
    start: int
    stop: int

    @property
    def channels(self):
        return list(range(self.start, self.stop))


@dataclass
class OracleAttribute:
    id: str
    num_classes: int
    support: list
    weights: np.ndarray  # (num_classes, len(support))
    bias: np.ndarray  # (num_classes,)
    class_names: tuple = ()
    confound_terms: list = field(default_factory=list)  # [(channels, weight)]
    squash: dict = None  # {"gain", "weights" aligned with support, "offset"}

    def __post_init__(self):
        self.support = [int(i) for i in self.support]
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(
            self.num_classes, len(self.support))
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(self.num_classes)
        self.confound_terms = [([int(i) for i in ch], float(w)) for ch, w in self.confound_terms]
        if self.squash is not None:
            sq = dict(self.squash)
            sq["weights"] = np.asarray(sq["weights"], dtype=np.float64)
            if sq["weights"].shape != (len(self.support),):
                raise ValueError(f"{self.id}: squash weights must align with support")
            sq["gain"] = float(sq["gain"])
            sq["offset"] = float(sq.get("offset", 0.0))
            self.squash = sq
        self.spec = AttributeSpec(self.id, self.num_classes, tuple(self.class_names))
        self.class_names = self.spec.class_names

    @property
    def binary(self):
        return self.num_classes == 1

    def gradient_support(self):
        chans = set(self.support)
        for ch, w in self.confound_terms:
            if w != 0:
                chans.update(ch)
        return chans


@dataclass
class WorldSpec:
    dim: int
    attributes: list
    blocks: list
    correlation: np.ndarray  # symmetric (len(blocks), len(blocks))
    noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.correlation = np.asarray(self.correlation, dtype=np.float64)
        k = len(self.blocks)
        if self.correlation.shape != (k, k):
            raise ValueError(f"correlation must be {k}x{k}")
        if not np.allclose(self.correlation, self.correlation.T):
            raise ValueError("correlation matrix must be symmetric")
        if not 0 <= self.noise <= 1:
            raise ValueError("noise must lie in [0, 1]")
        seen = set()
        for b in self.blocks:
            if not 0 <= b.start < b.stop <= self.dim:
                raise ValueError(f"block {b.name} outside [0, {self.dim})")
            overlap = seen.intersection(b.channels)
            if overlap:
                raise ValueError(f"block {b.name} overlaps another block")
            seen.update(b.channels)
        for a in self.attributes:
            chans = set(a.support)
            for ch, _ in a.confound_terms:
                chans.update(ch)
            if chans and (min(chans) < 0 or max(chans) >= self.dim):
                raise ValueError(f"attribute {a.id} references channels outside [0, {self.dim})")
        self._by_id = {a.id: a for a in self.attributes}
        if len(self._by_id) != len(self.attributes):
            raise ValueError("duplicate attribute ids")
        self._chol = np.linalg.cholesky(self.correlation) if k else None

    def attribute(self, attr_id):
        try:
            return self._by_id[attr_id]
        except KeyError:
            raise LookupFailure(f"unknown attribute {attr_id!r}; world has "
                                f"{sorted(self._by_id)}") from None

    @property
    def attribute_ids(self):
        return [a.id for a in self.attributes]

    # JSON round trip -----------------------------------------------------

    def to_dict(self):
        attrs = []
        for a in self.attributes:
            entry = {
                "id": a.id,
                "num_classes": a.num_classes,
                "class_names": list(a.class_names),
                "support": a.support,
                "weights": a.weights.tolist(),
                "bias": a.bias.tolist(),
                "confound_terms": [{"support": ch, "weight": w} for ch, w in a.confound_terms],
                "squash": None,
            }
            if a.squash is not None:
                entry["squash"] = {"gain": a.squash["gain"],
                                   "weights": a.squash["weights"].tolist(),
                                   "offset": a.squash["offset"]}
            attrs.append(entry)
        return {
            "dim": self.dim,
            "seed": self.seed,
            "noise": self.noise,
            "blocks": [{"name": b.name, "start": b.start, "stop": b.stop} for b in self.blocks],
            "correlation": self.correlation.tolist(),
            "attributes": attrs,
        }

    @classmethod
    def from_dict(cls, doc):
        attrs = [
            OracleAttribute(
                id=a["id"], num_classes=a["num_classes"], support=a["support"],
                weights=a["weights"], bias=a["bias"],
                class_names=tuple(a.get("class_names", ())),
                confound_terms=[(t["support"], t["weight"]) for t in a.get("confound_terms", [])],
                squash=a.get("squash"))
            for a in doc["attributes"]
        ]
        blocks = [Block(b["name"], b["start"], b["stop"]) for b in doc.get("blocks", [])]
        corr = doc.get("correlation") or np.eye(len(blocks))
        return cls(dim=doc["dim"], attributes=attrs, blocks=blocks,
                   correlation=np.asarray(corr, dtype=np.float64).reshape(len(blocks), len(blocks)),
                   noise=doc.get("noise", 0.3), seed=doc.get("seed", 0))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def oracle_scores(world, attr_id, Z):
    """Scores for a batch (n, d) -> (n, num_classes)."""
    a = world.attribute(attr_id)
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[-1] != world.dim:
        raise DimensionError(f"latent length {Z.shape[-1]} != world dim {world.dim}")
    zs = Z[..., a.support]
    out = zs @ a.weights.T + a.bias
    for ch, w in a.confound_terms:
        out = out + (w * Z[..., ch].mean(axis=-1))[..., None]
    if a.squash is not None:
        sq = a.squash
        out = out + (sq["gain"] * np.tanh(zs @ sq["weights"] + sq["offset"]))[..., None]
    return out


def oracle_score(world, attr_id, z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("oracle_score takes a single latent; use oracle_scores for batches")
    return oracle_scores(world, attr_id, z)


def oracle_gradient(world, attr_id, z, class_j=0):
    """Analytic d score_j / d z."""
    a = world.attribute(attr_id)
    z = np.asarray(z, dtype=np.float64)
    g = np.zeros(world.dim)
    np.add.at(g, a.support, a.weights[class_j])
    for ch, w in a.confound_terms:
        np.add.at(g, ch, w / len(ch))
    if a.squash is not None:
        sq = a.squash
        t = np.tanh(z[a.support] @ sq["weights"] + sq["offset"])
        np.add.at(g, a.support, sq["gain"] * (1 - t * t) * sq["weights"])
    return g


def labels_from_scores(scores):
    scores = np.asarray(scores)
    if scores.shape[-1] == 1:
        return (scores[..., 0] > 0).astype(np.int64)
    return np.argmax(scores, axis=-1)


def oracle_labels(world, attr_id, Z):
    return labels_from_scores(oracle_scores(world, attr_id, Z))


def decision_margin(scores):
    """Signed distance to the decision boundary in logit units.

    Binary: the logit itself. Multi-class: top logit minus runner-up.
    """
    scores = np.asarray(scores)
    if scores.shape[-1] == 1:
        return scores[..., 0]
    top2 = np.sort(scores, axis=-1)[..., -2:]
    return top2[..., 1] - top2[..., 0]


def sample_latents(world, n, rng):
    """Draw ``n`` latents from the world prior (n, d)."""
    k = len(world.blocks)
    eps = rng.normal((n, world.dim))
    if not k:
        return eps
    lam = np.sqrt(1.0 - world.noise**2)
    u = rng.normal((n, k)) @ world._chol.T
    Z = eps
    for j, b in enumerate(world.blocks):
        Z[:, b.start:b.stop] = lam * u[:, j:j + 1] + world.noise * eps[:, b.start:b.stop]
    return Z


@dataclass
class LatentBank:
    z: np.ndarray  # (n, d)
    labels: dict  # attr id -> (n,) int array

    def __len__(self):
        return self.z.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield self.z[i], {k: int(v[i]) for k, v in self.labels.items()}

    def __getitem__(self, i):
        return self.z[i], {k: int(v[i]) for k, v in self.labels.items()}


def label_bank(world, Z):
    return {a.id: oracle_labels(world, a.id, Z) for a in world.attributes}


def sample_bank(world, n, rng):
    """``n`` prior latents with oracle labels.

    Generated in fixed-size shards, each from its own child stream, so the
    result depends only on the seed and ``n``.
    """
    if n < 1:
        raise ValueError(f"bank size must be >= 1, got {n}")
    shards = []
    for s, start in enumerate(range(0, n, SHARD_SIZE)):
        size = min(SHARD_SIZE, n - start)
        shards.append(sample_latents(world, size, rng.spawn(f"shard{s}")))
    Z = np.concatenate(shards)
    return LatentBank(Z, label_bank(world, Z))


@dataclass
class BoundarySubset:
    indices: np.ndarray
    shortfall: bool


def boundary_sample(world, bank, attr_id, margin, count):
    """First ``count`` bank rows whose decision margin lies in (-margin, margin)."""
    if not margin > 0:
        raise ValueError("margin must be positive")
    m = decision_margin(oracle_scores(world, attr_id, bank.z))
    hits = np.flatnonzero(np.abs(m) < margin)
    return BoundarySubset(hits[:count], bool(hits.size < count))


def make_training_set(world, attr_id, per_class, rng, batch=4096, max_draws=1_000_000):
    """Rejection-sample exactly ``per_class`` oracle-labelled latents per class."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    a = world.attribute(attr_id)
    n_labels = a.spec.n_labels
    picked = {c: [] for c in range(n_labels)}
    drawn = 0
    r = 0
    while any(len(v) < per_class for v in picked.values()):
        if drawn >= max_draws:
            short = [c for c, v in picked.items() if len(v) < per_class]
            raise CoverageError(f"{attr_id}: classes {short} unreachable after "
                                f"{drawn} prior draws")
        Z = sample_latents(world, batch, rng.spawn(f"draw{r}"))
        r += 1
        drawn += batch
        for z, y in zip(Z, oracle_labels(world, attr_id, Z)):
            if len(picked[int(y)]) < per_class:
                picked[int(y)].append(z)
    items = [LabeledLatent(z, c) for c in range(n_labels) for z in picked[c]]
    return items


# Default world ------------------------------------------------------------

DEFAULT_DIM = 512
DEFAULT_CORRELATION = 0.5
DEFAULT_CONFOUND_WEIGHT = 0.5
BINARY_ATTRS = ("gender", "smile", "eyeglasses", "age")
COLOR_CLASSES = ("red", "green", "blue", "black")
# Planted pairs (target, confound): the target's score also reads the
# confound's block, and the two block factors are correlated in the prior.
CONFOUND_PAIRS = (("gender", "smile"), ("age", "eyeglasses"))


def default_world(seed=0, dim=DEFAULT_DIM, correlation=DEFAULT_CORRELATION, noise=0.2,
                  confound_weight=DEFAULT_CONFOUND_WEIGHT, smile_squash=1.0):
    """Four binary attributes plus a four-class ``color`` attribute.

    Channels split as 4 x 96 binary blocks then two 64-channel color blocks
    (x, y) for ``dim=512``; other dims scale proportionally. Color classes
    sit around a circle in the (x, y) factor plane. Within-block weights are
    jittered from ``seed``. ``smile`` carries a tanh term so its oracle
    gradient field is not constant.
    """
    rng = Rng(seed).spawn("world")
    bsize = (dim * 3 // 4) // 4
    csize = (dim - 4 * bsize) // 2
    blocks = [Block(name, i * bsize, (i + 1) * bsize) for i, name in enumerate(BINARY_ATTRS)]
    off = 4 * bsize
    blocks += [Block(f"color_{axis}", off + i * csize, off + (i + 1) * csize)
               for i, axis in enumerate("xy")]
    names = [b.name for b in blocks]
    corr = np.eye(len(blocks))
    for a, b in CONFOUND_PAIRS:
        i, j = names.index(a), names.index(b)
        corr[i, j] = corr[j, i] = correlation

    def jitter(n):
        w = 1.0 + 0.3 * rng.normal(n)
        return w / w.sum()

    attrs = []
    for i, name in enumerate(BINARY_ATTRS):
        support = blocks[i].channels
        squash = None
        if name == "smile" and smile_squash:
            v = rng.normal(len(support))
            squash = {"gain": smile_squash, "weights": v / np.linalg.norm(v), "offset": 0.0}
        confounds = [(blocks[names.index(c)].channels, confound_weight)
                     for t, c in CONFOUND_PAIRS if t == name and confound_weight]
        attrs.append(OracleAttribute(name, 1, support, jitter(len(support))[None, :], [0.0],
                                     class_names=(f"not_{name}", name), squash=squash,
                                     confound_terms=confounds))
    # hue-like layout: classes score +x, +y, -x, -y over two factor blocks
    color_support = list(range(off, off + 2 * csize))
    wx, wy = jitter(csize), jitter(csize)
    W = np.zeros((4, len(color_support)))
    W[0, :csize], W[1, csize:], W[2, :csize], W[3, csize:] = wx, wy, -wx, -wy
    attrs.append(OracleAttribute("color", 4, color_support, W, np.zeros(4),
                                 class_names=COLOR_CLASSES))
    return WorldSpec(dim=dim, attributes=attrs, blocks=blocks, correlation=corr,
                     noise=noise, seed=seed)


# Bank file ----------------------------------------------------------------

def write_bank(bank, path, labels_path=None):
    path = Path(path)
    n, d = bank.z.shape
    with open(path, "wb") as f:
        f.write(BANK_MAGIC)
        f.write(struct.pack("<HII", BANK_VERSION, d, n))
        f.write(np.ascontiguousarray(bank.z, dtype="<f8").tobytes())
    labels_path = Path(labels_path) if labels_path else path.with_suffix(".labels.jsonl")
    keys = list(bank.labels)
    with open(labels_path, "w") as f:
        for i in range(n):
            f.write(json.dumps({k: int(bank.labels[k][i]) for k in keys}) + "\n")
    return labels_path


def read_bank(path, labels_path=None):
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 14:
        raise FormatError(f"{path}: truncated bank header", len(blob))
    if blob[:4] != BANK_MAGIC:
        raise FormatError(f"{path}: bad magic bytes {blob[:4]!r}, expected {BANK_MAGIC!r}", 0)
    version, d, n = struct.unpack("<HII", blob[4:14])
    if version != BANK_VERSION:
        raise FormatError(f"{path}: unsupported bank version {version}", 4)
    if len(blob) - 14 != 8 * n * d:
        raise FormatError(f"{path}: payload is {len(blob) - 14} bytes, header declares "
                          f"{n} x {d} float64", 14)
    Z = np.frombuffer(blob, dtype="<f8", offset=14).astype(np.float64).reshape(n, d)
    labels_path = Path(labels_path) if labels_path else path.with_suffix(".labels.jsonl")
    labels = {}
    if labels_path.exists():
        rows = [json.loads(line) for line in labels_path.read_text().splitlines() if line]
        if len(rows) != n:
            raise FormatError(f"{labels_path}: {len(rows)} label rows for {n} latents")
        keys = list(rows[0]) if rows else []
        labels = {k: np.array([r[k] for r in rows], dtype=np.int64) for k in keys}
    return LatentBank(Z, labels)
