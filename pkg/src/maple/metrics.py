"""Classification, calibration and OOD-separation metrics, plus the chi-squared QQ error.

OOD detection treats OOD as the positive class and the uncertainty as the score.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .mahal import chi2_ppf

log = logging.getLogger(__name__)

NLL_FLOOR = 1e-12


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.size == 0 or preds.shape != labels.shape:
        raise ValueError("accuracy needs two non-empty arrays of equal shape")
    return float(np.mean(preds == labels))


def _bin_index(confidences: np.ndarray, num_bins: int) -> np.ndarray:
    # right-closed bins (e_{b-1}, e_b]; a confidence of exactly 0 lands in the first bin
    inner = np.linspace(0.0, 1.0, num_bins + 1)[1:-1]
    return np.searchsorted(inner, confidences, side="left")


def _check_conf(confidences, correct, num_bins):
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=bool)
    if conf.size == 0:
        raise ValueError("empty input")
    if conf.shape != corr.shape:
        raise ValueError("confidences and correct flags differ in shape")
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    return conf, corr


def calibration_curve(confidences, correct, num_bins: int = 15) -> list[tuple[float, float, int]]:
    """``(mean confidence, accuracy, count)`` for every equal-width bin; empty bins give NaN means."""
    conf, corr = _check_conf(confidences, correct, num_bins)
    idx = _bin_index(conf, num_bins)
    counts = np.bincount(idx, minlength=num_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=num_bins)
    acc_sum = np.bincount(idx, weights=corr.astype(np.float64), minlength=num_bins)
    out = []
    for b in range(num_bins):
        n = int(counts[b])
        if n:
            out.append((float(conf_sum[b] / n), float(acc_sum[b] / n), n))
        else:
            out.append((float("nan"), float("nan"), 0))
    return out


def ece(confidences, correct, num_bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins."""
    curve = calibration_curve(confidences, correct, num_bins)
    total = sum(n for _, _, n in curve)
    return float(sum(n / total * abs(acc - conf) for conf, acc, n in curve if n))


def nll(prob_of_true_class) -> float:
    p = np.asarray(prob_of_true_class, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty input")
    clamped = p < NLL_FLOOR
    if clamped.any():
        log.info("nll: clamped %d probabilities to %g", int(clamped.sum()), NLL_FLOOR)
    return float(-np.mean(np.log(np.maximum(p, NLL_FLOOR))))


def _split_scores(id_scores, ood_scores):
    ids = np.asarray(id_scores, dtype=np.float64).ravel()
    ood = np.asarray(ood_scores, dtype=np.float64).ravel()
    if ids.size == 0:
        raise ValueError("ID score set is empty")
    if ood.size == 0:
        raise ValueError("OOD score set is empty; the positive class is undefined")
    return ids, ood


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(values.size, dtype=np.float64)
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], values.size]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    return ranks


def auroc(id_uncertainties, ood_uncertainties) -> float:
    """Mann-Whitney estimate ``P(u_ood > u_id) + P(tie) / 2`` from the OOD rank sum."""
    ids, ood = _split_scores(id_uncertainties, ood_uncertainties)
    ranks = _average_ranks(np.concatenate([ids, ood]))
    m = ood.size
    u_stat = ranks[ids.size :].sum() - m * (m + 1) / 2.0
    return float(u_stat / (ids.size * m))


def pr_curve(id_uncertainties, ood_uncertainties) -> list[tuple[float, float, float]]:
    """``(threshold, recall, precision)`` at each distinct score, sweeping thresholds downwards."""
    ids, ood = _split_scores(id_uncertainties, ood_uncertainties)
    scores = np.concatenate([ood, ids])
    positive = np.r_[np.ones(ood.size, bool), np.zeros(ids.size, bool)]
    order = np.argsort(-scores, kind="mergesort")
    scores, positive = scores[order], positive[order]
    tp = np.cumsum(positive)
    fp = np.cumsum(~positive)
    last_of_group = np.r_[scores[1:] != scores[:-1], True]
    tp, fp, thr = tp[last_of_group], fp[last_of_group], scores[last_of_group]
    return [(float(t), float(a / ood.size), float(a / (a + b))) for t, a, b in zip(thr, tp, fp)]


def aupr(id_uncertainties, ood_uncertainties) -> float:
    """Step-wise area under precision-recall: sum of recall increments times precision."""
    pts = pr_curve(id_uncertainties, ood_uncertainties)
    area = 0.0
    prev_recall = 0.0
    for _, recall, precision in pts:
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return float(area)


def uncertainty_histogram(uncertainties, num_bins: int = 20) -> np.ndarray:
    """Counts over equal-width bins of [0, 1]; the last bin includes 1."""
    u = np.asarray(uncertainties, dtype=np.float64)
    counts, _ = np.histogram(np.clip(u, 0.0, 1.0), bins=num_bins, range=(0.0, 1.0))
    return counts


@lru_cache(maxsize=32)
def _chi2_plotting_quantiles(n: int, dof: int) -> np.ndarray:
    levels = (np.arange(1, n + 1) - 0.5) / n
    return chi2_ppf(levels, dof)


def qq_error(md_squared, dof: int) -> float:
    """Mean absolute gap between sorted squared distances and chi-squared quantiles."""
    x = np.sort(np.asarray(md_squared, dtype=np.float64).ravel())
    if x.size < 10:
        raise ValueError("qq_error needs at least 10 samples")
    theo = _chi2_plotting_quantiles(x.size, int(dof))
    return float(np.mean(np.abs(x - theo)))


# ---------------------------------------------------------------- report


@dataclass
class OodResult:
    name: str
    auroc: float
    aupr: float
    n_samples: int


@dataclass
class EvalReport:
    accuracy_softmax: float
    accuracy_md: float
    ece: float
    nll: float
    qq_error: float
    latency_ms_per_sample: float
    num_pseudo_classes: int
    reduced_dim: int
    ood: list[OodResult] = field(default_factory=list)
    calibration_bins: list[tuple[float, float, int]] = field(default_factory=list)
    uncertainty_histograms: dict[str, list[int]] = field(default_factory=dict)
    pr_points: dict[str, list[tuple[float, float, float]]] = field(default_factory=dict)
    ood_positive_class: str = "ood"

    def to_dict(self, include_latency: bool = True) -> dict:
        d = asdict(self)
        if not include_latency:
            d.pop("latency_ms_per_sample")
        d["calibration_bins"] = [
            {"mean_confidence": None if np.isnan(c) else c, "accuracy": None if np.isnan(a) else a, "count": n}
            for c, a, n in self.calibration_bins
        ]
        d["pr_points"] = {k: [list(p) for p in v] for k, v in self.pr_points.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d.setdefault("latency_ms_per_sample", float("nan"))
        d["ood"] = [OodResult(**o) for o in d.get("ood", [])]
        d["calibration_bins"] = [
            (float("nan") if b["mean_confidence"] is None else b["mean_confidence"],
             float("nan") if b["accuracy"] is None else b["accuracy"], b["count"])
            for b in d.get("calibration_bins", [])
        ]
        d["pr_points"] = {k: [tuple(p) for p in v] for k, v in d.get("pr_points", {}).items()}
        return cls(**d)

    def write(self, out_dir) -> None:
        """``report.json`` plus one CSV per curve for external plotting."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(out / "calibration_bins.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "mean_confidence", "accuracy", "count"])
            for b, (c, a, n) in enumerate(self.calibration_bins):
                w.writerow([b, "" if np.isnan(c) else repr(c), "" if np.isnan(a) else repr(a), n])
        with open(out / "uncertainty_histograms.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            names = list(self.uncertainty_histograms)
            w.writerow(["bin", *names])
            rows = zip(*(self.uncertainty_histograms[n] for n in names))
            for b, row in enumerate(rows):
                w.writerow([b, *row])
        for name, pts in self.pr_points.items():
            with open(out / f"pr_{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["threshold", "recall", "precision"])
                w.writerows([repr(t), repr(r), repr(p)] for t, r, p in pts)
