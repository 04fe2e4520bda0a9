"""Self-supervised relabelling: periodic validation, false-negative triggering,
per-class X-Means splits into pseudo-classes, and the training loop that ties
them to the classifier.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cluster import xmeans
from .dataio import DatasetSplit, LabeledDataset
from .errors import DataError
from .nn import SGD, MlpClassifier, TrainConfig, model_from_bytes, model_to_bytes, resize_head, train_step

log = logging.getLogger(__name__)

STATE_MAGIC = b"MRS1"


@dataclass
class LabelMap:
    pseudo_to_original: np.ndarray
    k: int

    def __post_init__(self):
        self.pseudo_to_original = np.asarray(self.pseudo_to_original, dtype=np.int64)
        if self.pseudo_to_original.size < self.k:
            raise ValueError("label map has fewer pseudo-classes than original classes")
        if set(self.pseudo_to_original.tolist()) != set(range(self.k)):
            raise ValueError("every original class needs at least one pseudo-class")

    @classmethod
    def identity(cls, k: int) -> "LabelMap":
        return cls(np.arange(k), k)

    @property
    def K(self) -> int:
        return self.pseudo_to_original.size

    def remap(self, pseudo) -> np.ndarray:
        return self.pseudo_to_original[np.asarray(pseudo, dtype=np.int64)]


@dataclass
class RefineEvent:
    epoch: int
    classes_split: list[int]
    K_after: int


@dataclass
class RelabelState:
    pseudo_labels: np.ndarray
    label_map: LabelMap
    history: list[RefineEvent] = field(default_factory=list)

    @classmethod
    def initial(cls, labels, k: int) -> "RelabelState":
        return cls(np.asarray(labels, dtype=np.int64).copy(), LabelMap.identity(k))

    @property
    def K(self) -> int:
        return self.label_map.K

    def original_labels(self) -> np.ndarray:
        return self.label_map.remap(self.pseudo_labels)


def confusion_matrix(predicted, truth, k: int) -> np.ndarray:
    """``cm[i, j]`` counts samples of true class ``i`` predicted as ``j``."""
    predicted = np.asarray(predicted, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if predicted.shape != truth.shape:
        raise ValueError("prediction and truth vectors differ in length")
    if predicted.size and (max(predicted.max(), truth.max()) >= k or min(predicted.min(), truth.min()) < 0):
        raise ValueError(f"class index outside [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (truth, predicted), 1)
    return cm


class AbsentClassError(ValueError):
    """The class has no validation samples, so its false-negative ratio is undefined."""


def false_negative_ratio(cm, i: int) -> float:
    row = np.asarray(cm)[i]
    total = row.sum()
    if total == 0:
        raise AbsentClassError(f"class {i} is absent from the validation set")
    return float((total - row[i]) / total)


def refine(embeddings_train, state: RelabelState, fnr, t: float, max_clusters: int, seed: int) -> RelabelState:
    """Re-cluster every original class whose false-negative ratio exceeds ``t``; see :func:`refine_detailed`."""
    return refine_detailed(embeddings_train, state, fnr, t, max_clusters, seed)[0]


def refine_detailed(embeddings_train, state, fnr, t, max_clusters, seed):
    """Like :func:`refine`, also returning the split classes and the dropped pseudo-ids.

    A triggered class is clustered from scratch over all its training
    samples; its previous pseudo-ids are reused in ascending order and any
    extra clusters receive fresh ids appended after the current ones. Ids a
    class no longer needs are dropped and higher ids shift down. Returns a
    new state; the input is not modified. ``state.history`` is not extended
    here (the caller knows the epoch).
    """
    emb = np.asarray(embeddings_train, dtype=np.float64)
    original = state.original_labels()
    k = state.label_map.k
    mapping = state.label_map.pseudo_to_original.copy()
    pseudo = state.pseudo_labels.copy()
    dropped: list[int] = []
    split: list[int] = []
    for i in range(k):
        if not fnr[i] > t:
            continue
        members = np.flatnonzero(original == i)
        if members.size < 2:
            log.warning("class %d triggered but has %d training sample(s); skipped", i, members.size)
            continue
        model = xmeans(emb[members], max_clusters=max_clusters, seed=seed + i)
        old_ids = np.flatnonzero(mapping == i)
        ids = list(old_ids[: model.k])
        extra = model.k - len(ids)
        if extra > 0:
            ids += list(range(mapping.size, mapping.size + extra))
            mapping = np.concatenate([mapping, np.full(extra, i, dtype=np.int64)])
        dropped += [int(j) for j in old_ids[model.k :]]
        pseudo[members] = np.asarray(ids, dtype=np.int64)[model.assignments]
        split.append(i)
    if dropped:
        keep = np.setdiff1d(np.arange(mapping.size), dropped)
        new_id = np.full(mapping.size, -1, dtype=np.int64)
        new_id[keep] = np.arange(keep.size)
        pseudo = new_id[pseudo]
        mapping = mapping[keep]
    return RelabelState(pseudo, LabelMap(mapping, k), list(state.history)), split, sorted(dropped)


def _prune_head(model: MlpClassifier, opt: SGD, dropped: list[int]) -> None:
    keep = np.setdiff1d(np.arange(model.n_classes), dropped)
    model.head_w = model.head_w[keep].copy()
    model.head_b = model.head_b[keep].copy()
    opt.buffers[-2] = opt.buffers[-2][keep].copy()
    opt.buffers[-1] = opt.buffers[-1][keep].copy()


@dataclass
class TrainResult:
    model: MlpClassifier
    state: RelabelState
    log: list[dict]


def train_maple(ds: LabeledDataset, split: DatasetSplit, config: TrainConfig, clustering: bool = True,
                relu_embedding: bool = False, on_epoch=None) -> TrainResult:
    """Train the classifier on pseudo-labels, refining them every ``validation_period`` epochs.

    With ``clustering=False`` no refinement happens and the run is plain
    (cross-entropy + triplet) training on the original labels.
    """
    if ds.k < 2:
        raise DataError("training needs at least two original classes")
    x_train = ds.features[split.train_idx]
    x_val = ds.features[split.val_idx]
    y_val = ds.labels[split.val_idx]
    state = RelabelState.initial(ds.labels[split.train_idx], ds.k)
    model = MlpClassifier(ds.dim, config.hidden_dims, config.embedding_dim, ds.k, seed=config.seed,
                          relu_embedding=relu_embedding)
    opt = SGD(model, config.learning_rate, config.momentum, config.weight_decay)
    shuffle_rng = np.random.default_rng([config.seed, 3])
    mining_rng = np.random.default_rng([config.seed, 2])
    n = x_train.shape[0]
    records = []
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        ce_sum = trip_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            ce, trip = train_step(model, opt, x_train[idx], state.pseudo_labels[idx], config, mining_rng)
            ce_sum += ce * idx.size
            trip_sum += trip * idx.size
        val_pred = state.label_map.remap(np.argmax(model.forward(x_val)[1], axis=1))
        val_acc = float(np.mean(val_pred == y_val))
        if clustering and epoch % config.validation_period == 0:
            state = _validate_and_refine(model, opt, x_train, val_pred, y_val, state, config, epoch)
        rec = {"epoch": epoch, "ce_loss": ce_sum / n, "triplet_loss": trip_sum / n, "val_acc": val_acc, "K": state.K}
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(model, state, records)


def _validate_and_refine(model, opt, x_train, val_pred, y_val, state, config, epoch):
    k = state.label_map.k
    cm = confusion_matrix(val_pred, y_val, k)
    fnr = np.zeros(k)
    for i in range(k):
        try:
            fnr[i] = false_negative_ratio(cm, i)
        except AbsentClassError:
            log.warning("class %d absent from validation set; never triggered", i)
    if not np.any(fnr > config.fnr_threshold):
        return state
    emb = model.embed(x_train)
    new, split, dropped = refine_detailed(emb, state, fnr, config.fnr_threshold, config.max_clusters,
                                          seed=config.seed + 1000 * epoch)
    if dropped:
        _prune_head(model, opt, dropped)
    if new.K > model.n_classes:
        resize_head(model, new.K, seed=config.seed + epoch)
        opt.sync_head()
    if not np.array_equal(new.original_labels(), state.original_labels()):
        raise AssertionError("relabelling broke the pseudo-to-original mapping")
    new.history.append(RefineEvent(epoch, split, new.K))
    log.info("epoch %d: re-clustered classes %s, K=%d", epoch, split, new.K)
    return new


# ---------------------------------------------------------------- persistence


def state_to_bytes(state: RelabelState) -> bytes:
    buf = io.BytesIO()
    mp = state.label_map.pseudo_to_original
    buf.write(STATE_MAGIC)
    buf.write(struct.pack("<QQ", state.label_map.k, mp.size))
    buf.write(mp.astype("<u8").tobytes())
    buf.write(struct.pack("<Q", state.pseudo_labels.size))
    buf.write(state.pseudo_labels.astype("<u8").tobytes())
    buf.write(struct.pack("<Q", len(state.history)))
    for ev in state.history:
        buf.write(struct.pack("<QQQ", ev.epoch, ev.K_after, len(ev.classes_split)))
        buf.write(struct.pack(f"<{len(ev.classes_split)}Q", *ev.classes_split))
    return buf.getvalue()


def state_from_bytes(raw: bytes, off: int = 0) -> RelabelState:
    if raw[off : off + 4] != STATE_MAGIC:
        raise DataError("missing relabel state block (bad magic)")
    off += 4
    k, kk = struct.unpack_from("<QQ", raw, off)
    off += 16
    mapping = np.frombuffer(raw, dtype="<u8", count=kk, offset=off).astype(np.int64)
    off += 8 * kk
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8
    pseudo = np.frombuffer(raw, dtype="<u8", count=n, offset=off).astype(np.int64)
    off += 8 * n
    (h,) = struct.unpack_from("<Q", raw, off)
    off += 8
    history = []
    for _ in range(h):
        epoch, k_after, c = struct.unpack_from("<QQQ", raw, off)
        off += 24
        classes = list(struct.unpack_from(f"<{c}Q", raw, off))
        off += 8 * c
        history.append(RefineEvent(epoch, classes, k_after))
    if pseudo.size and pseudo.max() >= kk:
        raise DataError("pseudo-label outside the stored label map")
    return RelabelState(pseudo, LabelMap(mapping, k), history)


def save_checkpoint(path, model: MlpClassifier, state: RelabelState) -> None:
    Path(path).write_bytes(model_to_bytes(model) + state_to_bytes(state))


def load_checkpoint(path) -> tuple[MlpClassifier, RelabelState]:
    raw = Path(path).read_bytes()
    model, off = model_from_bytes(raw)
    state = state_from_bytes(raw, off)
    if model.n_classes != state.K:
        raise DataError(f"checkpoint head has {model.n_classes} rows but the label map has {state.K}")
    return model, state


def write_log(path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
