"""Inference stack: standardized PCA, Gaussian class head with shared covariance,
Mahalanobis/Euclidean distances and chi-squared predictive probabilities.
"""

from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DataError, SingularCovarianceError

log = logging.getLogger(__name__)

HEAD_MAGIC = b"MGH1"
PCA_MAGIC = b"MPC1"

JITTER_START = 1e-20
JITTER_MAX = 1e-8

_EPS = 1e-15
_TINY = 1e-300


# ---------------------------------------------------------------- chi-squared


def _gamma_p_array(a: float, x: np.ndarray) -> np.ndarray:
    """Vectorized ``P(a, x)`` for a fixed shape ``a`` (same branches as the scalar form)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    out[np.isinf(x)] = 1.0
    pos = (x > 0) & np.isfinite(x)
    ser = pos & (x < a + 1.0)
    cf = pos & ~ser
    if ser.any():
        xs = x[ser]
        term = np.full_like(xs, 1.0 / a)
        total = term.copy()
        for n in range(1, 10_000):
            term *= xs / (a + n)
            total += term
            if np.all(np.abs(term) < np.abs(total) * _EPS):
                break
        out[ser] = np.minimum(1.0, total * np.exp(-xs + a * np.log(xs) - math.lgamma(a)))
    if cf.any():
        xc = x[cf]
        b = xc + 1.0 - a
        c = np.full_like(xc, 1.0 / _TINY)
        d = 1.0 / b
        h = d.copy()
        for i in range(1, 10_000):
            an = -i * (i - a)
            b = b + 2.0
            d = an * d + b
            d = np.where(np.abs(d) < _TINY, _TINY, d)
            c = b + an / c
            c = np.where(np.abs(c) < _TINY, _TINY, c)
            d = 1.0 / d
            delta = d * c
            h *= delta
            if np.all(np.abs(delta - 1.0) < _EPS):
                break
        out[cf] = np.maximum(0.0, 1.0 - np.exp(-xc + a * np.log(xc) - math.lgamma(a)) * h)
    return out


def chi2_cdf(x, dof: int):
    """CDF of the chi-squared distribution with ``dof`` degrees of freedom."""
    if dof < 1:
        raise ValueError("dof must be a positive integer")
    arr = np.asarray(x, dtype=np.float64)
    if np.any(np.isnan(arr)) or np.any(arr < 0):
        raise ValueError("chi2_cdf is defined for x >= 0")
    out = _gamma_p_array(0.5 * dof, 0.5 * arr)
    return float(out) if out.ndim == 0 else out


def chi2_ppf(q, dof: int, tol: float = 1e-10):
    """Inverse CDF by bisection on :func:`chi2_cdf`, to ``tol`` (relative above 1) in x."""
    qs = np.atleast_1d(np.asarray(q, dtype=np.float64))
    if np.any((qs < 0) | (qs >= 1)):
        raise ValueError("quantile level must lie in [0, 1)")
    a = 0.5 * dof
    lo = np.zeros_like(qs)
    hi = np.full_like(qs, max(1.0, float(dof)))
    low = _gamma_p_array(a, 0.5 * hi) < qs
    while low.any():
        lo = np.where(low, hi, lo)
        hi = np.where(low, 2.0 * hi, hi)
        low = _gamma_p_array(a, 0.5 * hi) < qs
    while np.any(hi - lo > tol * np.maximum(1.0, hi)):
        mid = 0.5 * (lo + hi)
        below = _gamma_p_array(a, 0.5 * mid) < qs
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    out = 0.5 * (lo + hi)
    return float(out[0]) if np.ndim(q) == 0 else out


# ---------------------------------------------------------------- PCA


@dataclass
class PcaTransform:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    components: np.ndarray
    explained_fraction: float
    eigenvalues: np.ndarray
    zero_variance: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.feature_mean.shape[0]

    @property
    def out_dim(self) -> int:
        return self.components.shape[1]

    def standardize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.feature_mean) / self.feature_std

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise DataError(f"dimension mismatch: transform expects d={self.input_dim}, got {x.shape[-1]}")
        return self.standardize(x) @ self.components

    def reconstruction_error(self, x) -> float:
        """Mean squared residual in standardized space after projecting onto the kept components."""
        s = self.standardize(x)
        resid = s - (s @ self.components) @ self.components.T
        return float(np.mean(np.sum(resid**2, axis=1)))


def _sorted_eigh(cov: np.ndarray):
    vals, vecs = np.linalg.eigh(cov)
    order = np.lexsort((np.arange(vals.size), -vals))
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    # deterministic sign: largest-magnitude entry of each vector is positive
    pivots = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivots, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vals, vecs * signs


def fit_pca(embeddings, variance_target: float = 0.95, standardize: bool = True) -> PcaTransform:
    """Keep the fewest leading components whose eigenvalues reach ``variance_target`` of the trace."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("PCA needs at least two embedding rows")
    if not 0 < variance_target <= 1:
        raise ValueError("variance_target must lie in (0, 1]")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    zero = std <= 1e-12 * max(1.0, float(np.abs(x).max()))
    if not standardize:
        std = np.ones_like(std)
    std = np.where(zero, 1.0, std)
    if np.any(zero):
        log.warning("PCA: %d zero-variance feature dimension(s) left unscaled", int(zero.sum()))
    s = (x - mean) / std
    s[:, zero] = 0.0
    cov = s.T @ s / x.shape[0]
    vals, vecs = _sorted_eigh(cov)
    total = vals.sum()
    if not total > 0:
        raise DataError("PCA on constant data: total variance is zero")
    prefix = np.cumsum(vals)
    kept = int(np.searchsorted(prefix, variance_target * total * (1 - 1e-12), side="left")) + 1
    kept = min(kept, vals.size)
    return PcaTransform(mean, std, vecs[:, :kept].copy(), float(prefix[kept - 1] / total), vals, zero)


def identity_transform(dim: int) -> PcaTransform:
    """Pass-through transform used when dimensionality reduction is disabled."""
    return PcaTransform(np.zeros(dim), np.ones(dim), np.eye(dim), 1.0, np.ones(dim), np.zeros(dim, dtype=bool))


def pca_to_bytes(pca: PcaTransform) -> bytes:
    buf = io.BytesIO()
    buf.write(PCA_MAGIC)
    buf.write(struct.pack("<QQ", pca.input_dim, pca.out_dim))
    buf.write(struct.pack("<d", pca.explained_fraction))
    for arr in (pca.feature_mean, pca.feature_std, pca.components, pca.eigenvalues, pca.zero_variance.astype(np.float64)):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def pca_from_bytes(raw: bytes) -> PcaTransform:
    if raw[:4] != PCA_MAGIC:
        raise DataError("not a PCA checkpoint (bad magic)")
    d, dp = struct.unpack_from("<QQ", raw, 4)
    (frac,) = struct.unpack_from("<d", raw, 20)
    off = 28
    arrays = []
    for shape in ((d,), (d,), (d, dp), (d,), (d,)):
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64))
        off += 8 * count
    mean, std, comps, vals, zero = arrays
    gram = comps.T @ comps
    if np.max(np.abs(gram - np.eye(dp))) > 1e-9 or np.any(std <= 0):
        raise DataError("PCA checkpoint fails its invariants")
    return PcaTransform(mean, std, comps, frac, vals, zero.astype(bool))


# ---------------------------------------------------------------- Gaussian head


@dataclass
class GaussianHead:
    centroids: np.ndarray
    covariance: np.ndarray
    cholesky: np.ndarray
    jitter: float
    pseudo_to_original: np.ndarray

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dof(self) -> int:
        return self.centroids.shape[1]

    def whiten(self, z) -> np.ndarray:
        """``L^{-1} z`` row-wise via triangular solve against the Cholesky factor."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return solve_triangular(self.cholesky, z.T, lower=True, check_finite=False).T

    def distances(self, z, metric: str = "mahalanobis") -> np.ndarray:
        """``N x K`` matrix of distances from each row of ``z`` to every centroid."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.dof:
            raise DataError(f"dimension mismatch: head expects d'={self.dof}, got {z.shape[1]}")
        if metric == "mahalanobis":
            wz, wc = self.whiten(z), self.whiten(self.centroids)
        elif metric == "euclidean":
            wz, wc = z, self.centroids
        else:
            raise ValueError(f"unknown distance metric {metric!r}")
        diff = wz[:, None, :] - wc[None, :, :]
        return np.sqrt(np.einsum("nkd,nkd->nk", diff, diff))


def factorize(cov: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky factor of ``cov``; on failure retry with growing diagonal jitter."""
    try:
        return np.linalg.cholesky(cov), 0.0
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(cov.shape[0])
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            chol = np.linalg.cholesky(cov + jitter * eye)
            log.info("covariance factorized with diagonal jitter %.1e", jitter)
            return chol, jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SingularCovarianceError(f"shared covariance is singular even with jitter {JITTER_MAX:g}")


def fit_head(z_train, pseudo_labels, pseudo_to_original) -> GaussianHead:
    """Per-class means and the pooled within-class covariance (normalized by N)."""
    z = np.asarray(z_train, dtype=np.float64)
    y = np.asarray(pseudo_labels, dtype=np.int64)
    mapping = np.asarray(pseudo_to_original, dtype=np.int64)
    k = mapping.size
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise DataError("z_train must be N x d' with one label per row")
    if y.min() < 0 or y.max() >= k:
        raise DataError("pseudo-label outside the label map")
    counts = np.bincount(y, minlength=k)
    if np.any(counts == 0):
        raise DataError(f"pseudo-class(es) without samples: {np.flatnonzero(counts == 0).tolist()}")
    sums = np.zeros((k, z.shape[1]))
    np.add.at(sums, y, z)
    centroids = sums / counts[:, None]
    centred = z - centroids[y]
    cov = centred.T @ centred / z.shape[0]
    cov = 0.5 * (cov + cov.T)
    chol, jitter = factorize(cov)
    return GaussianHead(centroids, cov, chol, jitter, mapping)


def mahalanobis(head: GaussianHead, z, c: int) -> float:
    if not 0 <= c < head.k:
        raise IndexError(f"class {c} outside [0, {head.k})")
    return float(head.distances(z)[0, c])


def euclidean(head: GaussianHead, z, c: int) -> float:
    if not 0 <= c < head.k:
        raise IndexError(f"class {c} outside [0, {head.k})")
    return float(head.distances(z, "euclidean")[0, c])


def head_to_bytes(head: GaussianHead) -> bytes:
    k, dp = head.centroids.shape
    n_orig = int(head.pseudo_to_original.max()) + 1
    buf = io.BytesIO()
    buf.write(HEAD_MAGIC)
    buf.write(struct.pack("<QQQ", dp, k, n_orig))
    buf.write(np.ascontiguousarray(head.pseudo_to_original, dtype="<u8").tobytes())
    buf.write(np.ascontiguousarray(head.centroids, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(head.covariance, dtype="<f8").tobytes())
    buf.write(struct.pack("<d", head.jitter))
    return buf.getvalue()


def head_from_bytes(raw: bytes) -> GaussianHead:
    """Parse a head checkpoint and re-verify its invariants."""
    if raw[:4] != HEAD_MAGIC:
        raise DataError("not a head checkpoint (bad magic)")
    try:
        dp, k, n_orig = struct.unpack_from("<QQQ", raw, 4)
        off = 28
        mapping = np.frombuffer(raw, dtype="<u8", count=k, offset=off).astype(np.int64)
        off += 8 * k
        centroids = np.frombuffer(raw, dtype="<f8", count=k * dp, offset=off).reshape(k, dp).astype(np.float64)
        off += 8 * k * dp
        cov = np.frombuffer(raw, dtype="<f8", count=dp * dp, offset=off).reshape(dp, dp).astype(np.float64)
        off += 8 * dp * dp
        (jitter,) = struct.unpack_from("<d", raw, off)
    except (struct.error, ValueError) as exc:
        raise DataError(f"truncated head checkpoint: {exc}") from exc
    if k < 1 or np.any(mapping >= n_orig) or set(mapping.tolist()) != set(range(n_orig)):
        raise DataError("head checkpoint label map is invalid")
    if not (np.all(np.isfinite(centroids)) and np.all(np.isfinite(cov))):
        raise DataError("head checkpoint holds non-finite values")
    if np.max(np.abs(cov - cov.T)) > 1e-12:
        raise DataError("head covariance is not symmetric")
    try:
        chol = np.linalg.cholesky(cov + jitter * np.eye(dp))
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError("stored covariance does not factorize with its recorded jitter") from exc
    if np.max(np.abs(chol @ chol.T - cov - jitter * np.eye(dp))) > 1e-9 * max(1.0, np.abs(cov).max()):
        raise DataError("head factorization does not reproduce the covariance")
    return GaussianHead(centroids, cov, chol, jitter, mapping)


# ---------------------------------------------------------------- prediction


@dataclass
class Prediction:
    """Per-sample outputs; fields are arrays for batch input, scalars for a single vector."""

    original_class: np.ndarray
    pseudo_class: np.ndarray
    p_md: np.ndarray
    uncertainty: np.ndarray
    distances: np.ndarray
    softmax_class: np.ndarray | None


def predict(pca: PcaTransform, head: GaussianHead, embeddings, logits=None, metric: str = "mahalanobis") -> Prediction:
    """Nearest-centroid class, chi-squared probability ``1 - F(md^2)`` and uncertainty ``F(md^2)``.

    Ties in distance go to the lowest pseudo-class index.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    single = x.ndim == 1
    z = pca.transform(np.atleast_2d(x))
    dist = head.distances(z, metric)
    c_star = np.argmin(dist, axis=1)
    md_star = dist[np.arange(len(c_star)), c_star]
    u = chi2_cdf(md_star**2, head.dof)
    u = np.atleast_1d(u)
    p = 1.0 - u
    orig = head.pseudo_to_original[c_star]
    soft = None
    if logits is not None:
        lg = np.atleast_2d(np.asarray(logits, dtype=np.float64))
        soft = head.pseudo_to_original[np.argmax(lg, axis=1)]
    if single:
        return Prediction(int(orig[0]), int(c_star[0]), float(p[0]), float(u[0]), dist[0],
                          None if soft is None else int(soft[0]))
    return Prediction(orig, c_star, p, u, dist, soft)
