import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from maple.dataio import (
    DatasetSplit, LabeledDataset, Mode, MixtureSpec, generate_mixture, load_dataset, load_mixture_spec,
    save_dataset, stratified_split,
)
from maple.errors import ConfigError, DataError


def small_ds():
    return LabeledDataset(np.array([[0.5, -1.25], [3.0, 1e-7], [2.0, 4.0]]), np.array([0, 1, 1]), ["a", "b"])


# ---------------------------------------------------------------- types


def test_dataset_rejects_nonfinite_and_bad_labels():
    with pytest.raises(DataError):
        LabeledDataset(np.array([[np.nan]]), np.array([0]), ["a"])
    with pytest.raises(DataError):
        LabeledDataset(np.array([[1.0]]), np.array([1]), ["a"])
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((0, 2)), np.zeros(0, int), ["a"])


def test_split_parts_must_be_disjoint_and_nonempty():
    with pytest.raises(DataError):
        DatasetSplit(np.array([0, 1]), np.array([1]), np.array([2]))
    with pytest.raises(DataError):
        DatasetSplit(np.array([0]), np.array([], int), np.array([2]))


def test_mixture_spec_rejects_nonpositive_std_and_count():
    with pytest.raises(ConfigError):
        MixtureSpec([[Mode([0.0], 0.0, 3)]], seed=0)
    with pytest.raises(ConfigError):
        MixtureSpec([[Mode([0.0], 1.0, 0)]], seed=0)


# ---------------------------------------------------------------- generation


def test_single_mode_mixture():
    ds = generate_mixture(MixtureSpec([[Mode([0.0, 0.0], 1.0, 100)]], seed=3))
    assert ds.n == 100 and ds.k == 1 and ds.dim == 2


def test_generation_is_deterministic():
    spec = MixtureSpec([[Mode([0.0, 0.0], 1.0, 50)], [Mode([5.0, 5.0], 0.5, 20)]], seed=11)
    a, b = generate_mixture(spec), generate_mixture(spec)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)


def test_far_modes_are_separable_by_nearest_mean():
    spec = MixtureSpec([[Mode([0.0, 0.0], 0.1, 200)], [Mode([10.0, 10.0], 0.1, 200)]], seed=0)
    ds = generate_mixture(spec)
    means = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(2)])
    pred = np.argmin(((ds.features[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == ds.labels) == 1.0


def test_generated_moments_match_spec():
    ds = generate_mixture(MixtureSpec([[Mode([1.0, -2.0, 3.0], 0.5, 20000)]], seed=1))
    assert np.allclose(ds.features.mean(axis=0), [1.0, -2.0, 3.0], atol=0.02)
    assert np.allclose(ds.features.std(axis=0), 0.5, atol=0.02)


def test_mixture_spec_json_round_trip(tmp_path):
    spec = MixtureSpec([[Mode([0.0, 1.0], 0.2, 5), Mode([3.0, 1.0], 0.2, 7)], [Mode([1.0, 1.0], 1.0, 2)]],
                       seed=4, class_names=["x", "y"])
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(spec.to_dict()))
    again = load_mixture_spec(p)
    assert again.to_dict() == spec.to_dict()
    assert generate_mixture(again) == generate_mixture(spec)


# ---------------------------------------------------------------- files


@pytest.mark.parametrize("suffix", [".txt", ".bin"])
def test_round_trip_small(tmp_path, suffix):
    ds = small_ds()
    path = tmp_path / f"d{suffix}"
    save_dataset(ds, path)
    back = load_dataset(path)
    if suffix == ".txt":
        assert back == ds
    else:
        assert np.array_equal(back.features, ds.features.astype(np.float32).astype(np.float64))
        assert np.array_equal(back.labels, ds.labels) and back.class_names == ds.class_names


def test_text_header_format(tmp_path):
    path = tmp_path / "d.txt"
    save_dataset(small_ds(), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "MAPLE-EMB v1 N=3 D=2 K=2"
    assert lines[1] == "classes a b"
    assert lines[2].split()[0] == "0"


def test_binary_layout(tmp_path):
    path = tmp_path / "d.bin"
    save_dataset(small_ds(), path)
    raw = path.read_bytes()
    assert raw[:4] == b"MEB1"
    n, d, k = np.frombuffer(raw[4:28], dtype="<u8")
    assert (n, d, k) == (3, 2, 2)


def _write(path, text):
    path.write_text(text)
    return path


def test_load_rejects_nan(tmp_path):
    p = _write(tmp_path / "x.txt", "MAPLE-EMB v1 N=1 D=2 K=1\nclasses a\n0 1.0 nan\n")
    with pytest.raises(DataError, match="non-finite value"):
        load_dataset(p)


def test_load_rejects_short_row(tmp_path):
    p = _write(tmp_path / "x.txt", "MAPLE-EMB v1 N=1 D=4 K=1\nclasses a\n0 1.0 2.0 3.0\n")
    with pytest.raises(DataError, match="dimension mismatch"):
        load_dataset(p)


def test_load_rejects_bad_header(tmp_path):
    p = _write(tmp_path / "x.txt", "EMB v1 N=1 D=1 K=1\nclasses a\n0 1.0\n")
    with pytest.raises(DataError, match="malformed header"):
        load_dataset(p)


def test_load_rejects_label_out_of_range(tmp_path):
    p = _write(tmp_path / "x.txt", "MAPLE-EMB v1 N=1 D=1 K=1\nclasses a\n3 1.0\n")
    with pytest.raises(DataError, match="label out of range"):
        load_dataset(p)


def test_load_rejects_row_count(tmp_path):
    p = _write(tmp_path / "x.txt", "MAPLE-EMB v1 N=2 D=1 K=1\nclasses a\n0 1.0\n")
    with pytest.raises(DataError, match="row count mismatch"):
        load_dataset(p)


finite = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@given(
    feats=hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6), elements=finite),
    k=st.integers(1, 4),
    seed=st.integers(0, 100),
)
def test_binary_round_trip_is_exact(tmp_path_factory, feats, k, seed):
    labels = np.random.default_rng(seed).integers(0, k, feats.shape[0])
    ds = LabeledDataset(feats.astype(np.float64), labels, [f"c{i}" for i in range(k)])
    path = tmp_path_factory.mktemp("rt") / "d.bin"
    save_dataset(ds, path)
    assert load_dataset(path) == ds


@given(feats=hnp.arrays(np.float64, (4, 3), elements=st.floats(-1e300, 1e300, allow_nan=False)))
def test_text_round_trip_is_exact(tmp_path_factory, feats):
    ds = LabeledDataset(feats, np.array([0, 1, 0, 1]), ["a", "b"])
    path = tmp_path_factory.mktemp("rt") / "d.txt"
    save_dataset(ds, path)
    assert load_dataset(path) == ds


# ---------------------------------------------------------------- splits


def _balanced(per_class, k=3):
    labels = np.repeat(np.arange(k), per_class)
    return LabeledDataset(np.arange(labels.size, dtype=float)[:, None], labels, [str(i) for i in range(k)])


def test_split_exact_proportions():
    sp = stratified_split(_balanced(100), (0.8, 0.1, 0.1), seed=0)
    ds = _balanced(100)
    for c in range(3):
        assert [np.sum(ds.labels[idx] == c) for idx in (sp.train_idx, sp.val_idx, sp.test_idx)] == [80, 10, 10]


def test_split_is_deterministic():
    a = stratified_split(_balanced(37), seed=5)
    b = stratified_split(_balanced(37), seed=5)
    assert all(np.array_equal(x, y) for x, y in zip((a.train_idx, a.val_idx, a.test_idx),
                                                   (b.train_idx, b.val_idx, b.test_idx)))


def test_split_rejects_oversubscribed_fractions():
    with pytest.raises(ConfigError, match="> 1"):
        stratified_split(_balanced(10), (0.9, 0.2, 0.0))


def test_split_rejects_tiny_class():
    with pytest.raises(DataError):
        stratified_split(_balanced(2), (0.8, 0.1, 0.1))


@given(counts=st.lists(st.integers(3, 60), min_size=1, max_size=4),
       f=st.tuples(st.floats(0.05, 0.8), st.floats(0.05, 0.5), st.floats(0.05, 0.5)).filter(lambda t: sum(t) <= 1),
       seed=st.integers(0, 1000))
def test_split_invariants(counts, f, seed):
    labels = np.concatenate([np.full(c, i) for i, c in enumerate(counts)])
    ds = LabeledDataset(np.zeros((labels.size, 1)), labels, [str(i) for i in range(len(counts))])
    sp = stratified_split(ds, f, seed=seed)
    parts = (sp.train_idx, sp.val_idx, sp.test_idx)
    allidx = np.concatenate(parts)
    assert np.unique(allidx).size == allidx.size
    for c, n_c in enumerate(counts):
        for frac, idx in zip(f, parts):
            assert abs(np.sum(labels[idx] == c) - frac * n_c) <= 1.0 + 1e-9
