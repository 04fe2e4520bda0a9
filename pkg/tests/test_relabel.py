import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maple import pipeline
from maple.config import load_config
from maple.dataio import DatasetSplit, LabeledDataset
from maple.errors import DataError
from maple.nn import MlpClassifier, TrainConfig
from maple.relabel import (
    AbsentClassError, LabelMap, RefineEvent, RelabelState, confusion_matrix, false_negative_ratio, load_checkpoint,
    refine, refine_detailed, save_checkpoint, state_from_bytes, state_to_bytes, train_maple, write_log,
)


def blob_embeddings(centers_per_class, n, seed, std=1.0):
    """Training embeddings whose class ``i`` is a union of well-separated blobs."""
    rng = np.random.default_rng(seed)
    emb, lab = [], []
    for c, centers in enumerate(centers_per_class):
        for ctr in centers:
            emb.append(np.asarray(ctr, float) + std * rng.normal(size=(n, len(ctr))))
            lab.append(np.full(n, c))
    return np.vstack(emb), np.concatenate(lab)


THREE_BLOBS = [[[0, 0], [20, 0], [10, 20]], [[60, 60]]]


def tiny_problem(n=60, seed=0):
    rng = np.random.default_rng(seed)
    x = np.r_[rng.normal([-2, 0], 0.3, (n, 2)), rng.normal([2, 0], 0.3, (n, 2))]
    y = np.r_[np.zeros(n, int), np.ones(n, int)]
    ds = LabeledDataset(x, y, ["a", "b"])
    idx = rng.permutation(2 * n)
    return ds, DatasetSplit(np.sort(idx[: n]), np.sort(idx[n : 3 * n // 2]), np.sort(idx[3 * n // 2 :]))


# ---------------------------------------------------------------- validation statistics


def test_confusion_matrix_example():
    cm = confusion_matrix([0, 1, 1, 0], [0, 1, 0, 0], 2)
    assert cm.tolist() == [[2, 1], [0, 1]]
    assert false_negative_ratio(cm, 0) == pytest.approx(1 / 3)
    assert false_negative_ratio(cm, 1) == 0.0


def test_false_negative_ratio_example():
    assert false_negative_ratio(np.array([[7, 3], [0, 5]]), 0) == pytest.approx(0.3)


def test_absent_class():
    with pytest.raises(AbsentClassError):
        false_negative_ratio(np.array([[0, 0], [1, 2]]), 0)


def test_confusion_matrix_errors():
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0], 2)
    with pytest.raises(ValueError):
        confusion_matrix([0, 2], [0, 1], 2)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
def test_confusion_rows_count_truth(pairs):
    pred, truth = zip(*pairs)
    cm = confusion_matrix(pred, truth, 4)
    assert cm.sum() == len(pairs)
    assert cm.sum(axis=1).tolist() == np.bincount(truth, minlength=4).tolist()


# ---------------------------------------------------------------- label map


def test_label_map_rules():
    assert LabelMap.identity(3).K == 3
    with pytest.raises(ValueError):
        LabelMap([0, 0], 2)
    lm = LabelMap([0, 1, 0, 0], 2)
    assert lm.remap([2, 1, 3]).tolist() == [0, 1, 0]


# ---------------------------------------------------------------- refinement


def test_refine_splits_three_blob_class():
    emb, lab = blob_embeddings(THREE_BLOBS, 50, seed=1)
    state = RelabelState.initial(lab, 2)
    new = refine(emb, state, fnr=[0.5, 0.0], t=0.3, max_clusters=5, seed=0)
    assert new.K == 4
    assert new.label_map.pseudo_to_original.tolist() == [0, 1, 0, 0]
    assert np.array_equal(new.original_labels(), lab)
    # each generating blob maps to exactly one pseudo-class
    for b in range(3):
        assert np.unique(new.pseudo_labels[b * 50 : (b + 1) * 50]).size == 1
    assert np.array_equal(state.pseudo_labels, lab)


def test_refine_threshold_is_strict():
    emb, lab = blob_embeddings(THREE_BLOBS, 30, seed=2)
    state = RelabelState.initial(lab, 2)
    assert refine(emb, state, fnr=[0.3, 0.0], t=0.3, max_clusters=5, seed=0).K == 2
    assert refine(emb, state, fnr=[1.0, 1.0], t=1.0, max_clusters=5, seed=0).K == 2


def test_retrigger_replaces_previous_split():
    emb, lab = blob_embeddings(THREE_BLOBS, 40, seed=3)
    state = RelabelState.initial(lab, 2)
    first = refine(emb, state, [0.5, 0.0], 0.3, 5, seed=0)
    assert first.K == 4
    # the class collapses to two blobs: its third pseudo-id is dropped, not kept empty
    emb2 = emb.copy()
    emb2[80:120] = emb2[40:80] + 0.01
    second, split, dropped = refine_detailed(emb2, first, [0.5, 0.0], 0.3, 5, seed=0)
    assert split == [0] and len(dropped) == 1
    assert second.K == 3 and sorted(second.label_map.pseudo_to_original.tolist()) == [0, 0, 1]
    assert np.array_equal(second.original_labels(), lab)
    assert set(np.unique(second.pseudo_labels)) == set(range(second.K))


def test_refine_respects_cap():
    emb, lab = blob_embeddings(THREE_BLOBS, 30, seed=4)
    new = refine(emb, RelabelState.initial(lab, 2), [0.9, 0.9], 0.3, max_clusters=2, seed=0)
    assert new.K == 3


@given(st.integers(0, 1000), st.lists(st.floats(0, 1), min_size=3, max_size=3), st.floats(0, 1))
def test_refine_preserves_original_labels(seed, fnr, t):
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, 3, 90)
    lab[:3] = [0, 1, 2]
    emb = rng.normal(size=(90, 2)) + 15 * rng.integers(0, 3, size=(90, 1))
    state = RelabelState.initial(lab, 3)
    new = refine(emb, state, fnr, t, 5, seed)
    assert np.array_equal(new.original_labels(), lab)
    assert set(np.unique(new.pseudo_labels)) == set(range(new.K))
    for i in range(3):
        assert 1 <= np.sum(new.label_map.pseudo_to_original == i) <= 5


# ---------------------------------------------------------------- training loop


def test_threshold_one_never_splits():
    ds, split = tiny_problem()
    res = train_maple(ds, split, TrainConfig(max_epochs=20, fnr_threshold=1.0, hidden_dims=(4,), embedding_dim=2))
    assert res.state.K == 2 and res.state.history == []


def test_period_beyond_epochs_never_splits():
    ds, split = tiny_problem()
    cfg = TrainConfig(max_epochs=9, validation_period=10, fnr_threshold=0.0, hidden_dims=(4,), embedding_dim=2)
    assert train_maple(ds, split, cfg).state.K == 2


def test_no_triplet_no_split_is_plain_cross_entropy():
    ds, split = tiny_problem()
    cfg = TrainConfig(max_epochs=12, fnr_threshold=1.0, triplet_weight=0.0, hidden_dims=(5,), embedding_dim=3,
                      seed=4)
    res = train_maple(ds, split, cfg)
    # reference: mini-batch SGD on cross-entropy written out directly
    ref = MlpClassifier(2, (5,), 3, 2, seed=4)
    params = ref.params()
    vel = [np.zeros_like(p) for p in params]
    shuffle = np.random.default_rng([4, 3])
    x, y = ds.features[split.train_idx], ds.labels[split.train_idx]
    for _ in range(12):
        order = shuffle.permutation(x.shape[0])
        for s in range(0, x.shape[0], cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            _, _, grads = ref.loss_and_grads(x[idx], y[idx], np.zeros((0, 3), int), 1.0, 0.0)
            for p, g, v in zip(params, grads, vel):
                g = g + cfg.weight_decay * p
                v *= cfg.momentum
                v += g
                p -= cfg.learning_rate * v
    assert all(np.array_equal(a, b) for a, b in zip(res.model.params(), ref.params()))
    plain = train_maple(ds, split, cfg, clustering=False)
    assert all(np.array_equal(a, b) for a, b in zip(res.model.params(), plain.model.params()))


def test_training_is_deterministic():
    ds, split = tiny_problem()
    cfg = TrainConfig(max_epochs=20, fnr_threshold=0.0, hidden_dims=(4,), embedding_dim=2, seed=2)
    a, b = train_maple(ds, split, cfg), train_maple(ds, split, cfg)
    assert a.log == b.log
    assert np.array_equal(a.state.pseudo_labels, b.state.pseudo_labels)
    assert all(np.array_equal(p, q) for p, q in zip(a.model.params(), b.model.params()))


def test_single_class_rejected():
    ds = LabeledDataset(np.zeros((6, 2)), np.zeros(6, int), ["a"])
    with pytest.raises(DataError):
        train_maple(ds, DatasetSplit(np.arange(4), np.array([4]), np.array([5])), TrainConfig())


def test_head_grows_with_pseudo_classes():
    ds, split = tiny_problem()
    res = train_maple(ds, split, TrainConfig(max_epochs=10, fnr_threshold=0.0, hidden_dims=(4,), embedding_dim=2))
    assert res.model.n_classes == res.state.K
    assert [r["K"] for r in res.log][-1] == res.state.K


def test_benchmark_accuracy_recovers_after_split(tmp_path):
    cfg = load_config(pipeline.write_benchmark(tmp_path, seed=0))
    ds, split = pipeline.load_training_data(cfg)
    res = train_maple(ds, split, cfg.effective_train())
    assert 5 <= res.state.K <= 7
    acc = {r["epoch"]: r["val_acc"] for r in res.log}
    p = cfg.train.validation_period
    for ev in res.state.history:
        before = acc[ev.epoch - 1] if ev.epoch > 1 else 0.0
        window = [acc[e] for e in range(ev.epoch + 1, min(ev.epoch + 5 * p, cfg.train.max_epochs) + 1)]
        assert max(window) >= before - 0.01


# ---------------------------------------------------------------- persistence


def test_state_round_trip():
    emb, lab = blob_embeddings(THREE_BLOBS, 20, seed=5)
    state = refine(emb, RelabelState.initial(lab, 2), [0.5, 0.0], 0.3, 5, 0)
    state.history.append(RefineEvent(10, [0], state.K))
    back = state_from_bytes(state_to_bytes(state))
    assert np.array_equal(back.pseudo_labels, state.pseudo_labels)
    assert np.array_equal(back.label_map.pseudo_to_original, state.label_map.pseudo_to_original)
    assert back.history == state.history


def test_checkpoint_round_trip(tmp_path):
    ds, split = tiny_problem()
    res = train_maple(ds, split, TrainConfig(max_epochs=10, fnr_threshold=0.0, hidden_dims=(3,), embedding_dim=2))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, res.model, res.state)
    model, state = load_checkpoint(path)
    assert all(np.array_equal(a, b) for a, b in zip(model.params(), res.model.params()))
    assert np.array_equal(state.pseudo_labels, res.state.pseudo_labels)
    raw = path.read_bytes()
    with pytest.raises(DataError):
        state_from_bytes(raw, 0)


def test_write_log(tmp_path):
    write_log(tmp_path / "log.jsonl", [{"epoch": 1, "K": 2}, {"epoch": 2, "K": 3}])
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert [json.loads(s)["K"] for s in lines] == [2, 3]
