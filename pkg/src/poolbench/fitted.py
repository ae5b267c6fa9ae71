"""Parametric pools fitted on the training split: PCA over mean-pooled
vectors and a bag-of-visual-words codebook over pixel embeddings."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, DimMismatch, InvalidDim, IoFailure, LeakageError, TooFewPixels, TruncatedFile
from .pooling import PooledMatrix, PooledVector, PoolingMethodSpec
from .tiles import PatchTensor


def check_leakage(ids, split, step: str) -> None:
    """Raise if any of ``ids`` sits on the test side of ``split``."""
    if split is None or ids is None:
        return
    leaked = set(ids) & set(split.test_ids)
    if leaked:
        sample = sorted(leaked)[:3]
        raise LeakageError(f"{step}: {len(leaked)} test ids in fitting data, e.g. {sample}")


# --------------------------------------------------------------------------- PCA


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (m, D), orthonormal rows
    explained_variance: np.ndarray  # (m,), non-increasing

    @property
    def target_dim(self) -> int:
        return self.components.shape[0]

    @property
    def channels(self) -> int:
        return self.components.shape[1]

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.channels:
            raise DimMismatch(f"expected {self.channels}-dim input, got {x.shape[-1]}")
        return (x - self.mean.astype(np.float64)) @ self.components.astype(np.float64).T

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.components.astype(np.float64) + self.mean


def fit_pca(train_pooled: PooledMatrix, target_dim: int | None = None, *, split=None) -> PcaModel:
    """Top principal directions of the centered training matrix.

    Variances use the n-1 divisor. Each component is sign-fixed so that its
    largest-magnitude entry is positive.
    """
    check_leakage(train_pooled.ids, split, "fit_pca")
    X = np.asarray(train_pooled.values, dtype=np.float64)
    n, D = X.shape
    m = min(32, D) if target_dim is None else target_dim
    if n < 2:
        raise InvalidDim(f"PCA needs at least 2 training rows, got {n}")
    if not 1 <= m <= min(n - 1, D):
        raise InvalidDim(f"target_dim {m} outside [1, {min(n - 1, D)}]")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1][:m]
    comps = evecs[:, order].T
    evals = np.clip(evals[order], 0.0, None)
    pivots = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(m), pivots])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    return PcaModel(mean.astype(np.float32), comps.astype(np.float32), evals.astype(np.float32))


def apply_pca(model: PcaModel, vec) -> PooledVector:
    values = vec.values if isinstance(vec, PooledVector) else np.asarray(vec, dtype=np.float64)
    if values.shape != (model.channels,):
        raise DimMismatch(f"expected a {model.channels}-dim mean-pooled vector, got shape {values.shape}")
    return PooledVector(PoolingMethodSpec("pca", target_dim=model.target_dim), model.transform(values))


# -------------------------------------------------------------------------- BoVW


@dataclass(frozen=True, eq=False)
class BovwModel:
    centroids: np.ndarray  # (k, D)
    seed: int
    inertia_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def channels(self) -> int:
        return self.centroids.shape[1]


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def assign(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per row (ties go to the lowest index) and its squared distance."""
    d = _sq_dists(X, C)
    labels = np.argmin(d, axis=1)
    return labels, d[np.arange(len(X)), labels]


def inertia(X: np.ndarray, C: np.ndarray) -> float:
    return float(assign(X, C)[1].sum())


def kmeans_plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = _sq_dists(X, centers[:1]).ravel()
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # fewer distinct points than k; duplicates are reseeded later if empty
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[i] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centers[i : i + 1]).ravel())
    return centers


def gather_pixels(patches, max_pixels_per_patch=None, rng=None) -> np.ndarray:
    blocks = []
    for x in patches:
        pix = x.pixels() if isinstance(x, PatchTensor) else np.asarray(x).reshape(-1, np.shape(x)[-1])
        if max_pixels_per_patch is not None and len(pix) > max_pixels_per_patch:
            rows = np.sort(rng.choice(len(pix), max_pixels_per_patch, replace=False))
            pix = pix[rows]
        blocks.append(np.asarray(pix, dtype=np.float64))
    if not blocks:
        return np.zeros((0, 0))
    return np.vstack(blocks)


def minibatch_kmeans(X, k, seed=0, batch_size=1024, epochs=10, init_sample=None):
    """Mini-batch k-means with k-means++ seeding.

    Each batch moves a centroid toward the mean of its assigned points with
    step (points in batch) / (cumulative count), i.e. a per-point rate of
    1/count. Centroids left empty for a full epoch are reseeded from the
    farthest points of the epoch's last batch. Returns (centroids, per-epoch
    full-data inertia).
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if n < k:
        raise TooFewPixels(f"need at least k={k} pixels, got {n}")
    rng = np.random.default_rng(seed)
    sample_size = min(n, init_sample or max(10 * k, 4096))
    sample = X[np.sort(rng.choice(n, sample_size, replace=False))] if sample_size < n else X
    C = kmeans_plus_plus(sample, k, rng)
    counts = np.zeros(k)
    trace = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_hits = np.zeros(k)
        for start in range(0, n, batch_size):
            batch = X[order[start : start + batch_size]]
            labels, dist = assign(batch, C)
            m = np.bincount(labels, minlength=k).astype(np.float64)
            sums = np.zeros_like(C)
            np.add.at(sums, labels, batch)
            hit = m > 0
            counts[hit] += m[hit]
            epoch_hits += m
            C[hit] += (sums[hit] - m[hit, None] * C[hit]) / counts[hit, None]
        # a centroid that won no point over a whole epoch is empty: move it onto
        # the farthest (non-coincident) points of the last batch
        empty = np.flatnonzero(epoch_hits == 0)
        if empty.size:
            far = np.argsort(-dist, kind="stable")
            far = far[dist[far] > 0][: empty.size]
            C[empty[: far.size]] = batch[far]
            counts[empty[: far.size]] = 0
        trace.append(inertia(X, C))
    return C, np.array(trace)


def fit_bovw(
    train_patches,
    k: int = 64,
    seed: int = 0,
    batch_size: int = 1024,
    epochs: int = 10,
    *,
    ids=None,
    split=None,
    max_pixels_per_patch: int | None = None,
) -> BovwModel:
    """Learn a k-word codebook from the pixels of the training patches."""
    check_leakage(ids, split, "fit_bovw")
    rng = np.random.default_rng(seed)
    X = gather_pixels(train_patches, max_pixels_per_patch, rng)
    if len(X) < k:
        raise TooFewPixels(f"need at least k={k} pixels, got {len(X)}")
    C, trace = minibatch_kmeans(X, k, seed=seed, batch_size=batch_size, epochs=epochs)
    return BovwModel(C.astype(np.float32), seed, trace)


def encode_bovw(model: BovwModel, x) -> PooledVector:
    """L1-normalized histogram of nearest-centroid assignments over the patch pixels."""
    pix = x.pixels() if isinstance(x, PatchTensor) else np.asarray(x)
    if pix.shape[-1] != model.channels:
        raise DimMismatch(f"patch has D={pix.shape[-1]}, codebook has D={model.channels}")
    labels, _ = assign(np.asarray(pix, dtype=np.float64), model.centroids.astype(np.float64))
    hist = np.bincount(labels, minlength=model.k).astype(np.float64) / len(labels)
    return PooledVector(PoolingMethodSpec("bovw", k=model.k, seed=model.seed), hist)


# -------------------------------------------------------------- model files

_MODEL_HEAD = struct.Struct("<4sIIq")


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def save_pca(model: PcaModel, path) -> None:
    m, D = model.components.shape
    buf = _MODEL_HEAD.pack(b"PCA1", m, D, 0)
    buf += _f32(model.mean) + _f32(model.components) + _f32(model.explained_variance)
    _write(path, buf)


def load_pca(path) -> PcaModel:
    buf = _read(path)
    m, D, _ = _header(buf, b"PCA1")
    arrs = _unpack(buf, [D, m * D, m])
    return PcaModel(arrs[0], arrs[1].reshape(m, D), arrs[2])


def save_bovw(model: BovwModel, path) -> None:
    k, D = model.centroids.shape
    e = len(model.inertia_trace)
    buf = _MODEL_HEAD.pack(b"BVW1", k, D, model.seed) + struct.pack("<I", e)
    buf += _f32(model.centroids) + np.ascontiguousarray(model.inertia_trace, dtype="<f8").tobytes()
    _write(path, buf)


def load_bovw(path) -> BovwModel:
    buf = _read(path)
    k, D, seed = _header(buf, b"BVW1")
    (e,) = struct.unpack_from("<I", buf, _MODEL_HEAD.size)
    start = _MODEL_HEAD.size + 4
    if len(buf) != start + 4 * k * D + 8 * e:
        raise TruncatedFile("BoVW model payload has the wrong length")
    C = np.frombuffer(buf, "<f4", k * D, start).astype(np.float32).reshape(k, D)
    trace = np.frombuffer(buf, "<f8", e, start + 4 * k * D).astype(np.float64)
    return BovwModel(C, int(seed), trace)


def _write(path, buf: bytes) -> None:
    try:
        Path(path).write_bytes(buf)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _header(buf: bytes, magic: bytes):
    if buf[:4] != magic:
        raise BadMagic(f"expected magic {magic!r}, got {buf[:4]!r}")
    if len(buf) < _MODEL_HEAD.size:
        raise TruncatedFile("model header is incomplete")
    _, a, b, seed = _MODEL_HEAD.unpack_from(buf)
    return a, b, seed


def _unpack(buf: bytes, sizes):
    offset = _MODEL_HEAD.size
    if len(buf) != offset + 4 * sum(sizes):
        raise TruncatedFile("model payload has the wrong length")
    out = []
    for size in sizes:
        out.append(np.frombuffer(buf, "<f4", size, offset).astype(np.float32))
        offset += 4 * size
    return out
