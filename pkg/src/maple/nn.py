"""Feedforward classifier with an exposed embedding layer, trained by SGD on
cross-entropy plus triplet loss. Everything is float64 numpy with hand-written
backprop.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NonFiniteLossError

MODEL_MAGIC = b"MNN1"


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 60
    margin: float = 1.0
    validation_period: int = 10
    fnr_threshold: float = 0.3
    max_clusters: int = 5
    seed: int = 0
    triplet_weight: float = 1.0
    hidden_dims: tuple[int, ...] = (64, 64)
    embedding_dim: int = 16

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        for name in ("learning_rate", "momentum", "weight_decay", "margin", "triplet_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        for name in ("batch_size", "max_epochs", "validation_period", "max_clusters", "embedding_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not 0.0 <= self.fnr_threshold <= 1.0:
            raise ConfigError("fnr_threshold must lie in [0, 1]")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden widths must be positive")


def _uniform_fan_in(rng: np.random.Generator, fan_out: int, fan_in: int):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    b = rng.uniform(-bound, bound, size=fan_out)
    return w, b


class MlpClassifier:
    """ReLU MLP ``D -> hidden... -> d (embedding) -> n_c (logits)``.

    The embedding is the output of the last hidden layer (the input to the
    head). ``relu_embedding`` controls whether that layer is rectified.
    """

    def __init__(self, input_dim, hidden_dims=(64, 64), embedding_dim=16, n_classes=2, seed=0,
                 relu_embedding=False):
        self.input_dim = int(input_dim)
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        self.embedding_dim = int(embedding_dim)
        self.relu_embedding = bool(relu_embedding)
        self.seed = int(seed)
        rng = np.random.default_rng([self.seed, 0])
        dims = [self.input_dim, *self.hidden_dims, self.embedding_dim]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w, b = _uniform_fan_in(rng, fan_out, fan_in)
            self.weights.append(w)
            self.biases.append(b)
        w, b = _uniform_fan_in(rng, n_classes, self.embedding_dim)
        self.head_w = w
        self.head_b = b

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[0]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order; mutating them mutates the model."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.head_w, self.head_b]

    def copy(self) -> "MlpClassifier":
        other = object.__new__(MlpClassifier)
        other.__dict__.update(self.__dict__)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other.head_w = self.head_w.copy()
        other.head_b = self.head_b.copy()
        return other

    # ------------------------------------------------------------ forward

    def _forward(self, x: np.ndarray):
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w.T + b
            pre.append(a)
            h = a if (i == last and not self.relu_embedding) else np.maximum(a, 0.0)
            acts.append(h)
        logits = h @ self.head_w.T + self.head_b
        return h, logits, (acts, pre)

    def forward(self, x):
        """Return ``(embedding, logits)`` for one vector or a batch of rows."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        if xb.ndim != 2 or xb.shape[1] != self.input_dim:
            raise DataError(f"dimension mismatch: model expects D={self.input_dim}, got shape {x.shape}")
        emb, logits, _ = self._forward(xb)
        if single:
            return emb[0], logits[0]
        return emb, logits

    def embed(self, x) -> np.ndarray:
        return self.forward(x)[0]

    # ------------------------------------------------------------ backward

    def _backward(self, cache, d_emb_total: np.ndarray, d_logits: np.ndarray):
        acts, pre = cache
        emb = acts[-1]
        grads_head_w = d_logits.T @ emb
        grads_head_b = d_logits.sum(axis=0)
        delta = d_logits @ self.head_w + d_emb_total
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i != last or self.relu_embedding:
                delta = delta * (pre[i] > 0)
            gw[i] = delta.T @ acts[i]
            gb[i] = delta.sum(axis=0)
            if i:
                delta = delta @ self.weights[i]
        out = []
        for w, b in zip(gw, gb):
            out += [w, b]
        return out + [grads_head_w, grads_head_b]

    def loss_and_grads(self, x, labels, triplets, margin=1.0, triplet_weight=1.0):
        """Batch loss ``mean CE + triplet_weight * mean triplet`` and exact gradients.

        Returns ``(ce_loss, triplet_loss, grads)`` where ``grads`` aligns with
        :meth:`params`.
        """
        x = np.asarray(x, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        emb, logits, cache = self._forward(x)
        bsz = x.shape[0]
        logp = log_softmax(logits)
        ce = -logp[np.arange(bsz), labels].mean()
        d_logits = np.exp(logp)
        d_logits[np.arange(bsz), labels] -= 1.0
        d_logits /= bsz

        d_emb = np.zeros_like(emb)
        trip = 0.0
        if len(triplets):
            t = np.asarray(triplets, dtype=np.int64)
            losses, ga, gp, gn = _triplet_terms(emb[t[:, 0]], emb[t[:, 1]], emb[t[:, 2]], margin)
            trip = losses.mean()
            scale = triplet_weight / len(t)
            np.add.at(d_emb, t[:, 0], scale * ga)
            np.add.at(d_emb, t[:, 1], scale * gp)
            np.add.at(d_emb, t[:, 2], scale * gn)
        grads = self._backward(cache, d_emb, d_logits)
        return float(ce), float(trip), grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, label: int) -> float:
    """``-log softmax(logits)[label]`` via max-shifted log-sum-exp."""
    logits = np.asarray(logits, dtype=np.float64)
    return float(-log_softmax(logits)[label])


def _triplet_terms(a, p, n, margin):
    dap = a - p
    dan = a - n
    nap = np.linalg.norm(dap, axis=1)
    nan_ = np.linalg.norm(dan, axis=1)
    raw = nap - nan_ + margin
    active = raw > 0
    losses = np.where(active, raw, 0.0)
    # subgradient 0 where a distance is exactly zero
    uap = np.divide(dap, nap[:, None], out=np.zeros_like(dap), where=nap[:, None] > 0)
    uan = np.divide(dan, nan_[:, None], out=np.zeros_like(dan), where=nan_[:, None] > 0)
    act = active[:, None]
    ga = np.where(act, uap - uan, 0.0)
    gp = np.where(act, -uap, 0.0)
    gn = np.where(act, uan, 0.0)
    return losses, ga, gp, gn


def triplet_loss(anchor, positive, negative, margin: float = 1.0) -> float:
    """``max(||a-p|| - ||a-n|| + margin, 0)`` with Euclidean norms."""
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    n = np.asarray(negative, dtype=np.float64)
    if not (a.shape == p.shape == n.shape):
        raise DataError("triplet members must have equal dimensions")
    return float(max(np.linalg.norm(a - p) - np.linalg.norm(a - n) + margin, 0.0))


def mine_triplets(labels, seed) -> np.ndarray:
    """One random (anchor, positive, negative) triple per eligible anchor.

    An anchor is eligible when the batch holds another sample with its label
    and at least one sample with a different label. Returns an ``(T, 3)``
    int array, possibly empty.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels = np.asarray(labels, dtype=np.int64)
    out = []
    for c in np.unique(labels):
        same = np.flatnonzero(labels == c)
        other = np.flatnonzero(labels != c)
        if same.size < 2 or other.size == 0:
            continue
        # positive: uniform over same-label members excluding the anchor itself
        r = rng.integers(0, same.size - 1, size=same.size)
        r = r + (r >= np.arange(same.size))
        neg = other[rng.integers(0, other.size, size=same.size)]
        out.append(np.stack([same, same[r], neg], axis=1))
    if not out:
        return np.zeros((0, 3), dtype=np.int64)
    trip = np.concatenate(out)
    return trip[np.argsort(trip[:, 0], kind="stable")]


# ---------------------------------------------------------------- optimizer


class SGD:
    """SGD with classical momentum and L2 weight decay (decay added to the gradient)."""

    def __init__(self, model: MlpClassifier, lr=0.05, momentum=0.9, weight_decay=1e-4):
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p) for p in model.params()]

    def step(self, grads):
        for p, g, v in zip(self.model.params(), grads, self.buffers):
            if self.weight_decay:
                g = g + self.weight_decay * p
            v *= self.momentum
            v += g
            p -= self.lr * v

    def sync_head(self):
        """Zero-extend the head buffers after :func:`resize_head`."""
        params = self.model.params()
        for j in (-2, -1):
            old = self.buffers[j]
            new = np.zeros_like(params[j])
            new[: old.shape[0]] = old
            self.buffers[j] = new


def train_step(model: MlpClassifier, opt: SGD, x, labels, config: TrainConfig, rng) -> tuple[float, float]:
    """One SGD step on ``CE + triplet_weight * triplet``; returns the two loss terms."""
    if config.triplet_weight > 0:
        triplets = mine_triplets(labels, rng)
    else:
        triplets = np.zeros((0, 3), dtype=np.int64)
    ce, trip, grads = model.loss_and_grads(x, labels, triplets, config.margin, config.triplet_weight)
    if not (np.isfinite(ce) and np.isfinite(trip)):
        raise NonFiniteLossError(f"non-finite loss (ce={ce}, triplet={trip})")
    opt.step(grads)
    return ce, trip


def resize_head(model: MlpClassifier, new_k: int, seed: int) -> MlpClassifier:
    """Grow the output layer in place to ``new_k`` rows, keeping existing rows."""
    old_k = model.n_classes
    if new_k < old_k:
        raise ValueError(f"cannot shrink head from {old_k} to {new_k} classes")
    if new_k == old_k:
        return model
    rng = np.random.default_rng([int(seed), 1, old_k, new_k])
    w, b = _uniform_fan_in(rng, new_k - old_k, model.embedding_dim)
    model.head_w = np.vstack([model.head_w, w])
    model.head_b = np.concatenate([model.head_b, b])
    return model


# ---------------------------------------------------------------- checkpoint


def model_to_bytes(model: MlpClassifier) -> bytes:
    buf = io.BytesIO()
    dims = [model.input_dim, *model.hidden_dims, model.embedding_dim]
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<Q", len(dims)))
    buf.write(struct.pack(f"<{len(dims)}Q", *dims))
    buf.write(struct.pack("<QqQ", model.n_classes, model.seed, int(model.relu_embedding)))
    for p in model.params():
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(raw: bytes, offset: int = 0) -> tuple[MlpClassifier, int]:
    """Parse a model at ``offset``; return it and the offset just past it."""
    if raw[offset : offset + 4] != MODEL_MAGIC:
        raise DataError("not a model checkpoint (bad magic)")
    off = offset + 4
    (nd,) = struct.unpack_from("<Q", raw, off)
    off += 8
    dims = struct.unpack_from(f"<{nd}Q", raw, off)
    off += 8 * nd
    n_c, seed, relu_emb = struct.unpack_from("<QqQ", raw, off)
    off += 24
    model = object.__new__(MlpClassifier)
    model.input_dim = dims[0]
    model.hidden_dims = tuple(dims[1:-1])
    model.embedding_dim = dims[-1]
    model.seed = seed
    model.relu_embedding = bool(relu_emb)

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
        return arr

    model.weights, model.biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        model.weights.append(take((fan_out, fan_in)))
        model.biases.append(take((fan_out,)))
    model.head_w = take((n_c, dims[-1]))
    model.head_b = take((n_c,))
    if not all(np.all(np.isfinite(p)) for p in model.params()):
        raise DataError("model checkpoint holds non-finite parameters")
    return model, off
