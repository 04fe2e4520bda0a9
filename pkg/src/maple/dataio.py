"""Datasets, synthetic Gaussian mixtures, embedding files and stratified splits."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

TEXT_MAGIC = "MAPLE-EMB"
TEXT_VERSION = "v1"
BINARY_MAGIC = b"MEB1"


@dataclass(eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = tuple(str(n) for n in self.class_names)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise DataError(f"features must be a non-empty N x D matrix, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("labels must be a vector with one entry per feature row")
        if not np.all(np.isfinite(self.features)):
            raise DataError("non-finite value in features")
        if self.k < 1:
            raise DataError("at least one class name is required")
        if self.labels.min() < 0 or self.labels.max() >= self.k:
            raise DataError(f"label out of range [0, {self.k})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def k(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_names)

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.class_names == other.class_names
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )


@dataclass
class DatasetSplit:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.val_idx = np.asarray(self.val_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        parts = (self.train_idx, self.val_idx, self.test_idx)
        if any(p.size == 0 for p in parts):
            raise DataError("every split part must be nonempty")
        allidx = np.concatenate(parts)
        if np.unique(allidx).size != allidx.size:
            raise DataError("split parts overlap")
        if allidx.min() < 0:
            raise DataError("negative split index")


@dataclass
class Mode:
    mean: np.ndarray
    std: float
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if not self.std > 0:
            raise ConfigError(f"mode std must be positive, got {self.std}")
        if int(self.count) < 1:
            raise ConfigError(f"mode count must be >= 1, got {self.count}")
        self.count = int(self.count)


@dataclass
class MixtureSpec:
    """Per-class lists of isotropic Gaussian modes plus a seed."""

    classes: list[list[Mode]]
    seed: int = 0
    class_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.classes or any(len(modes) == 0 for modes in self.classes):
            raise ConfigError("every class needs at least one mode")
        dims = {m.mean.shape for modes in self.classes for m in modes}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ConfigError("all mode means must be vectors of the same length")
        if not self.class_names:
            self.class_names = tuple(f"class{i}" for i in range(len(self.classes)))
        if len(self.class_names) != len(self.classes):
            raise ConfigError("class_names length must match the number of classes")

    @property
    def dim(self) -> int:
        return self.classes[0][0].mean.shape[0]

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureSpec":
        try:
            classes = [[Mode(m["mean"], float(m["std"]), int(m["count"])) for m in c["modes"]] for c in d["classes"]]
            names = tuple(c.get("name", f"class{i}") for i, c in enumerate(d["classes"]))
            return cls(classes, int(d.get("seed", 0)), names)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed mixture spec: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "classes": [
                {"name": name, "modes": [{"mean": m.mean.tolist(), "std": m.std, "count": m.count} for m in modes]}
                for name, modes in zip(self.class_names, self.classes)
            ],
        }


def load_mixture_spec(path) -> MixtureSpec:
    try:
        with open(path) as fh:
            return MixtureSpec.from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def generate_mixture(spec: MixtureSpec, return_modes: bool = False):
    """Draw every mode's samples i.i.d. from its isotropic Gaussian.

    Samples are emitted class by class, mode by mode, so the output is a pure
    function of the spec. With ``return_modes`` a second array gives the
    global mode index of each row.
    """
    rng = np.random.default_rng(spec.seed)
    feats, labels, mode_ids = [], [], []
    mode_counter = 0
    for label, modes in enumerate(spec.classes):
        for m in modes:
            feats.append(m.mean + m.std * rng.standard_normal((m.count, spec.dim)))
            labels.append(np.full(m.count, label, dtype=np.int64))
            mode_ids.append(np.full(m.count, mode_counter, dtype=np.int64))
            mode_counter += 1
    ds = LabeledDataset(np.vstack(feats), np.concatenate(labels), spec.class_names)
    if return_modes:
        return ds, np.concatenate(mode_ids)
    return ds


# ---------------------------------------------------------------- file formats


def save_dataset(ds: LabeledDataset, path, binary: bool | None = None) -> None:
    """Write ``ds``; the binary variant is used for ``.bin`` paths unless overridden."""
    path = Path(path)
    if binary is None:
        binary = path.suffix == ".bin"
    if binary:
        _save_binary(ds, path)
    else:
        _save_text(ds, path)


def _save_text(ds: LabeledDataset, path: Path) -> None:
    for name in ds.class_names:
        if not name or any(ch.isspace() for ch in name):
            raise DataError(f"class name {name!r} cannot be stored in the text format")
    lines = [f"{TEXT_MAGIC} {TEXT_VERSION} N={ds.n} D={ds.dim} K={ds.k}", "classes " + " ".join(ds.class_names)]
    for label, row in zip(ds.labels.tolist(), ds.features.tolist()):
        lines.append(f"{label} " + " ".join(repr(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _save_binary(ds: LabeledDataset, path: Path) -> None:
    f32 = ds.features.astype("<f4")
    parts = [BINARY_MAGIC, struct.pack("<QQQ", ds.n, ds.dim, ds.k)]
    for name in ds.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)) + raw)
    rec = np.zeros(ds.n, dtype=np.dtype([("label", "<u4"), ("x", "<f4", (ds.dim,))]))
    rec["label"] = ds.labels
    rec["x"] = f32
    parts.append(rec.tobytes())
    path.write_bytes(b"".join(parts))


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == BINARY_MAGIC:
        return _load_binary(path)
    return _load_text(path)


def _parse_header(line: str) -> tuple[int, int, int]:
    toks = line.split()
    if len(toks) != 5 or toks[0] != TEXT_MAGIC or toks[1] != TEXT_VERSION:
        raise DataError(f"malformed header: {line!r}")
    vals = {}
    for tok, key in zip(toks[2:], ("N", "D", "K")):
        name, _, val = tok.partition("=")
        if name != key or not val.isdigit():
            raise DataError(f"malformed header: {line!r}")
        vals[key] = int(val)
    return vals["N"], vals["D"], vals["K"]


def _load_text(path: Path) -> LabeledDataset:
    try:
        lines = path.read_text().splitlines()
    except UnicodeDecodeError as exc:
        raise DataError(f"malformed header: {path} is not a text embedding file") from exc
    if len(lines) < 2:
        raise DataError("malformed header: file too short")
    n, d, k = _parse_header(lines[0])
    ctoks = lines[1].split()
    if not ctoks or ctoks[0] != "classes" or len(ctoks) - 1 != k:
        raise DataError(f"malformed header: class line must list {k} names")
    rows = [ln for ln in lines[2:] if ln.strip()]
    if len(rows) != n:
        raise DataError(f"row count mismatch: header says N={n}, found {len(rows)} rows")
    labels = np.empty(n, dtype=np.int64)
    feats = np.empty((n, d), dtype=np.float64)
    for i, ln in enumerate(rows):
        toks = ln.split()
        if len(toks) != d + 1:
            raise DataError(f"dimension mismatch on row {i}: expected {d} values, got {len(toks) - 1}")
        try:
            labels[i] = int(toks[0])
            vals = [float(t) for t in toks[1:]]
        except ValueError as exc:
            raise DataError(f"unparseable value on row {i}: {exc}") from exc
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"non-finite value on row {i}")
        if not 0 <= labels[i] < k:
            raise DataError(f"label out of range on row {i}: {labels[i]} not in [0, {k})")
        feats[i] = vals
    return LabeledDataset(feats, labels, tuple(ctoks[1:]))


def _load_binary(path: Path) -> LabeledDataset:
    raw = path.read_bytes()
    off = 4
    try:
        n, d, k = struct.unpack_from("<QQQ", raw, off)
        off += 24
        names = []
        for _ in range(k):
            (ln,) = struct.unpack_from("<Q", raw, off)
            off += 8
            names.append(raw[off : off + ln].decode("utf-8"))
            off += ln
    except (struct.error, UnicodeDecodeError) as exc:
        raise DataError(f"malformed header: {exc}") from exc
    dt = np.dtype([("label", "<u4"), ("x", "<f4", (d,))])
    if len(raw) - off != n * dt.itemsize:
        raise DataError(f"dimension mismatch: payload of {len(raw) - off} bytes does not hold {n} records of D={d}")
    rec = np.frombuffer(raw, dtype=dt, count=n, offset=off)
    feats = rec["x"].astype(np.float64)
    labels = rec["label"].astype(np.int64)
    if not np.all(np.isfinite(feats)):
        raise DataError("non-finite value in binary payload")
    if n and labels.max() >= k:
        raise DataError(f"label out of range [0, {k})")
    return LabeledDataset(feats, labels, tuple(names))


# ---------------------------------------------------------------- splits


def _part_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    target = [f * n for f in fractions]
    sizes = [max(1, math.floor(t + 1e-9)) for t in target]
    budget = min(n, round(sum(target)))
    # leftover samples go to the parts with the largest rounding remainder
    order = sorted(range(len(target)), key=lambda j: (sizes[j] - target[j], j))
    for j in order:
        if sum(sizes) >= budget:
            break
        if sizes[j] < target[j]:
            sizes[j] += 1
    return sizes


def stratified_split(ds: LabeledDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ConfigError("fractions must be (train, val, test)")
    if sum(fractions) > 1 + 1e-12:
        raise ConfigError(f"split fractions sum to {sum(fractions):.6g} > 1")
    if any(f <= 0 for f in fractions):
        raise ConfigError("split fractions must all be positive")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for c in range(ds.k):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        if idx.size < 3:
            raise DataError(f"class {ds.class_names[c]!r} has {idx.size} samples, fewer than the 3 split parts")
        idx = idx[rng.permutation(idx.size)]
        sizes = _part_sizes(idx.size, fractions)
        start = 0
        for j, s in enumerate(sizes):
            parts[j].append(np.sort(idx[start : start + s]))
            start += s
    return DatasetSplit(*(np.concatenate(p) for p in parts))
