"""End-to-end orchestration: synthetic benchmark, training, evaluation,
ablation rows and hyperparameter sweeps. The CLI is a thin layer on top.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics as M
from .config import RunConfig, load_config
from .dataio import DatasetSplit, LabeledDataset, Mode, MixtureSpec, generate_mixture, load_dataset, save_dataset, stratified_split
from .errors import ConfigError, DataError, MapleError
from .mahal import (
    GaussianHead, PcaTransform, fit_head, fit_pca, head_from_bytes, head_to_bytes, identity_transform,
    pca_from_bytes, pca_to_bytes, predict,
)
from .nn import MlpClassifier
from .relabel import RelabelState, load_checkpoint, save_checkpoint, train_maple, write_log

log = logging.getLogger(__name__)

MODEL_FILE = "model.ckpt"
HEAD_FILE = "head.bin"
PCA_FILE = "pca.bin"
LOG_FILE = "train_log.jsonl"
CONFIG_ECHO = "config.txt"

# ---------------------------------------------------------------- benchmark

BENCH_DIM = 10
BENCH_SIGMA = 0.1
BENCH_RADIUS = 1.5
BENCH_COUNTS = {"train": 500, "val": 100, "test": 200}
BENCH_OOD_COUNT = 1000
# the benchmark network: a single linear embedding layer into two dimensions
BENCH_OVERRIDES = {"hidden_dims": (), "embedding_dim": 2}


def _bench_geometry():
    """Mode centres of the four benchmark classes and the OOD centre.

    Class 0 sits on the vertices of a triangle (26 sigma apart), so no single
    linear region covers it; classes 1-3 sit on the edge midpoints. Class 2
    has a second mode 8 sigma further out, a mild intra-class variation that
    only an aggressive threshold re-clusters.
    """
    def e(x, y):
        v = np.zeros(BENCH_DIM)
        v[:2] = (x, y)
        return v

    angles = [math.pi / 2 + j * 2 * math.pi / 3 for j in range(3)]
    verts = [e(BENCH_RADIUS * math.cos(a), BENCH_RADIUS * math.sin(a)) for a in angles]
    mids = [(verts[0] + verts[1]) / 2, (verts[1] + verts[2]) / 2, (verts[2] + verts[0]) / 2]
    outward = mids[1] / np.linalg.norm(mids[1])
    classes = [verts, [mids[0]], [mids[1], mids[1] + 8 * BENCH_SIGMA * outward], [mids[2]]]
    ood = verts[0] * (BENCH_RADIUS + 30 * BENCH_SIGMA) / BENCH_RADIUS
    return classes, ood


def benchmark_specs(seed: int = 0) -> dict[str, MixtureSpec]:
    """Mixture specs for the train/val/test/ood files of the synthetic benchmark."""
    classes, ood = _bench_geometry()
    names = [f"class{i}" for i in range(len(classes))]
    specs = {}
    for j, (part, count) in enumerate(BENCH_COUNTS.items()):
        modes = [[Mode(m, BENCH_SIGMA, count) for m in cls] for cls in classes]
        specs[part] = MixtureSpec(modes, seed=seed * 10 + j, class_names=names)
    specs["ood"] = MixtureSpec([[Mode(ood, BENCH_SIGMA, BENCH_OOD_COUNT)]], seed=seed * 10 + 9, class_names=["ood"])
    return specs


def write_benchmark(out_dir, seed: int = 0) -> Path:
    """Write the benchmark data files plus a ready-to-run config; return the config path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for part, spec in benchmark_specs(seed).items():
        (out / f"{part}.spec.json").write_text(json.dumps(spec.to_dict(), indent=1) + "\n")
        paths[part] = out / f"{part}.bin"
        save_dataset(generate_mixture(spec), paths[part])
    cfg = load_config(overrides=[
        f"seed = {seed}",
        "hidden_dims = ",
        f"embedding_dim = {BENCH_OVERRIDES['embedding_dim']}",
        f"train_data = {paths['train'].resolve()}",
        f"val_data = {paths['val'].resolve()}",
        f"test_data = {paths['test'].resolve()}",
        f"ood_data = {paths['ood'].resolve()}",
        f"out_dir = {(out / 'run').resolve()}",
    ])
    cfg_path = out / "benchmark.cfg"
    cfg_path.write_text("# synthetic benchmark, generated by `maple gen --benchmark`\n" + cfg.to_text())
    return cfg_path


# ---------------------------------------------------------------- data


def _concat(parts: list[LabeledDataset]) -> LabeledDataset:
    names = parts[0].class_names
    for p in parts[1:]:
        if p.class_names != names:
            raise DataError("train/val/test files disagree on class names")
    return LabeledDataset(np.vstack([p.features for p in parts]), np.concatenate([p.labels for p in parts]), names)


def load_training_data(cfg: RunConfig) -> tuple[LabeledDataset, DatasetSplit]:
    """Explicit train/val/test files when ``val_data`` and ``test_data`` are set, else a stratified split."""
    if not cfg.train_data:
        raise ConfigError("train_data is not set")
    train = load_dataset(cfg.train_data)
    if cfg.val_data and cfg.test_data:
        val, test = load_dataset(cfg.val_data), load_dataset(cfg.test_data)
        ds = _concat([train, val, test])
        a, b = train.n, train.n + val.n
        return ds, DatasetSplit(np.arange(a), np.arange(a, b), np.arange(b, ds.n))
    if cfg.val_data or cfg.test_data:
        raise ConfigError("set both val_data and test_data, or neither")
    return train, stratified_split(train, cfg.split_fractions, seed=cfg.seed)


def ood_name(path) -> str:
    name = Path(path).name
    for suffix in (".bin", ".txt", ".emb"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


# ---------------------------------------------------------------- train / eval


@dataclass
class Artifacts:
    model: MlpClassifier
    state: RelabelState
    pca: PcaTransform
    head: GaussianHead
    log: list[dict]


def train(cfg: RunConfig, ds: LabeledDataset, split: DatasetSplit) -> Artifacts:
    """Train, then fit the reduction and the Gaussian head once on the final train embeddings."""
    res = train_maple(ds, split, cfg.effective_train(), clustering=cfg.use_clustering,
                      relu_embedding=cfg.relu_embedding)
    emb = res.model.embed(ds.features[split.train_idx])
    if cfg.use_pca:
        pca = fit_pca(emb, cfg.pca_variance_target)
    else:
        pca = identity_transform(emb.shape[1])
    head = fit_head(pca.transform(emb), res.state.pseudo_labels, res.state.label_map.pseudo_to_original)
    return Artifacts(res.model, res.state, pca, head, res.log)


def save_artifacts(out_dir, art: Artifacts, cfg: RunConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / MODEL_FILE, art.model, art.state)
    (out / HEAD_FILE).write_bytes(head_to_bytes(art.head))
    (out / PCA_FILE).write_bytes(pca_to_bytes(art.pca))
    write_log(out / LOG_FILE, art.log)
    (out / CONFIG_ECHO).write_text(cfg.to_text())


def load_artifacts(ckpt_dir) -> Artifacts:
    d = Path(ckpt_dir)
    try:
        model, state = load_checkpoint(d / MODEL_FILE)
        head = head_from_bytes((d / HEAD_FILE).read_bytes())
        pca = pca_from_bytes((d / PCA_FILE).read_bytes())
    except FileNotFoundError as exc:
        raise DataError(f"missing checkpoint file: {exc.filename}") from None
    if pca.input_dim != model.embedding_dim or head.dof != pca.out_dim:
        raise DataError("model, PCA and head checkpoints do not fit together")
    return Artifacts(model, state, pca, head, [])


def evaluate(cfg: RunConfig, art: Artifacts, test: LabeledDataset, ood_sets: dict[str, np.ndarray]) -> M.EvalReport:
    """Both accuracies, calibration of ``P_MD``, OOD separation per set, QQ error and latency."""
    metric = cfg.distance_mode
    t0 = time.perf_counter()
    emb, logits = art.model.forward(test.features)
    pred = predict(art.pca, art.head, emb, logits, metric)
    latency = (time.perf_counter() - t0) * 1000.0 / test.n
    truth = test.labels
    correct = pred.original_class == truth
    z = art.pca.transform(emb)
    md = art.head.distances(z, "mahalanobis")
    md2 = md.min(axis=1) ** 2
    report = M.EvalReport(
        accuracy_softmax=M.accuracy(pred.softmax_class, truth),
        accuracy_md=M.accuracy(pred.original_class, truth),
        ece=M.ece(pred.p_md, correct, cfg.ece_bins),
        nll=M.nll(pred.p_md),
        qq_error=M.qq_error(md2, art.head.dof),
        latency_ms_per_sample=latency,
        num_pseudo_classes=art.head.k,
        reduced_dim=art.head.dof,
        calibration_bins=M.calibration_curve(pred.p_md, correct, cfg.ece_bins),
    )
    report.uncertainty_histograms["id"] = M.uncertainty_histogram(pred.uncertainty, cfg.hist_bins).tolist()
    for name, feats in ood_sets.items():
        u_ood = predict(art.pca, art.head, art.model.embed(feats), None, metric).uncertainty
        report.ood.append(M.OodResult(name, M.auroc(pred.uncertainty, u_ood), M.aupr(pred.uncertainty, u_ood),
                                      int(u_ood.size)))
        report.uncertainty_histograms[name] = M.uncertainty_histogram(u_ood, cfg.hist_bins).tolist()
        report.pr_points[name] = M.pr_curve(pred.uncertainty, u_ood)
    return report


def load_ood_sets(cfg: RunConfig, expected_dim: int) -> dict[str, np.ndarray]:
    out = {}
    for path in cfg.ood_data:
        ds = load_dataset(path)
        if ds.dim != expected_dim:
            raise DataError(f"OOD set {path}: dimension mismatch ({ds.dim} vs {expected_dim})")
        name = ood_name(path)
        if name in out or name == "id":
            raise DataError(f"duplicate OOD set name {name!r}")
        out[name] = ds.features
    return out


def test_dataset(cfg: RunConfig) -> LabeledDataset:
    ds, split = load_training_data(cfg)
    return ds.subset(split.test_idx)


def run_full(cfg: RunConfig, out_dir) -> M.EvalReport:
    """Train, persist, evaluate, persist the report; the unit behind ablation rows and sweeps."""
    ds, split = load_training_data(cfg)
    art = train(cfg, ds, split)
    save_artifacts(out_dir, art, cfg)
    report = evaluate(cfg, art, ds.subset(split.test_idx), load_ood_sets(cfg, ds.dim))
    report.write(out_dir)
    return report


# ---------------------------------------------------------------- ablation / sweep

ABLATION_ROWS = [
    ("DNN+MD", dict(use_pca=False, distance_mode="mahalanobis", use_triplet=False, use_clustering=False)),
    ("DNN+PCA+MD", dict(use_pca=True, distance_mode="mahalanobis", use_triplet=False, use_clustering=False)),
    ("DNN+PCA+ED", dict(use_pca=True, distance_mode="euclidean", use_triplet=False, use_clustering=False)),
    ("DNN+Triplet+PCA+MD", dict(use_pca=True, distance_mode="mahalanobis", use_triplet=True, use_clustering=False)),
    ("DNN+Clustering+PCA+MD", dict(use_pca=True, distance_mode="mahalanobis", use_triplet=False, use_clustering=True)),
    ("MAPLE", dict(use_pca=True, distance_mode="mahalanobis", use_triplet=True, use_clustering=True)),
]

SWEEP_PARAMS = {"t": "fnr_threshold", "p": "validation_period", "max_clusters": "max_clusters"}


def worker_count() -> int:
    raw = os.environ.get("MAPLE_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MAPLE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"MAPLE_THREADS must be a positive integer, got {raw!r}")
    return n


def _summary(report: M.EvalReport) -> dict:
    aurocs = [o.auroc for o in report.ood]
    auprs = [o.aupr for o in report.ood]
    return {
        "K": report.num_pseudo_classes,
        "eig": report.reduced_dim,
        "accuracy_softmax": report.accuracy_softmax,
        "accuracy_md": report.accuracy_md,
        "ece": report.ece,
        "nll": report.nll,
        "qq_error": report.qq_error,
        "auroc": float(np.mean(aurocs)) if aurocs else None,
        "aupr": float(np.mean(auprs)) if auprs else None,
    }


def _run_row(args) -> dict:
    cfg_text, out_dir = args
    cfg = load_config(overrides=cfg_text.splitlines())
    try:
        return {"status": "ok", **_summary(run_full(cfg, out_dir))}
    except (MapleError, ArithmeticError, ValueError) as exc:
        log.error("run in %s failed: %s", out_dir, exc)
        return {"status": f"failed: {type(exc).__name__}: {exc}"}


def _run_many(jobs: list[tuple[RunConfig, Path]], workers: int | None = None) -> list[dict]:
    payload = [(cfg.to_text(), str(out)) for cfg, out in jobs]
    workers = min(workers or worker_count(), len(payload))
    if workers <= 1:
        return [_run_row(p) for p in payload]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_row, payload))


def _write_table(out_dir: Path, stem: str, rows: list[dict]) -> None:
    (out_dir / f"{stem}.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    cols = sorted({k for r in rows for k in r}, key=lambda k: (k not in ("row", "name", "param", "value", "status"), k))
    with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


def run_ablation(cfg: RunConfig, out_dir, workers: int | None = None) -> list[dict]:
    """The six flag combinations with a shared seed; a failing row is annotated, the rest still run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.replace(**flags), out / f"row{i}") for i, (_, flags) in enumerate(ABLATION_ROWS, 1)]
    results = _run_many(jobs, workers)
    rows = [{"row": i, "name": name, **res} for i, ((name, _), res) in enumerate(zip(ABLATION_ROWS, results), 1)]
    _write_table(out, "ablation", rows)
    return rows


def run_sweep(cfg: RunConfig, param: str, values, out_dir, workers: int | None = None) -> list[dict]:
    """One full run per value of ``param`` (``t``, ``p`` or ``max_clusters``), shared seed."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {sorted(SWEEP_PARAMS)}, got {param!r}")
    key = SWEEP_PARAMS[param]
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.replace(**{key: v}), out / f"{param}={v}") for v in values]
    results = _run_many(jobs, workers)
    rows = [{"param": param, "value": v, **res} for v, res in zip(values, results)]
    _write_table(out, f"sweep_{param}", rows)
    return rows
