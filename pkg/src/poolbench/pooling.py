"""Training-free pooling operators: (H, W, D) patch -> d-dim vector.

All reductions run in float64 over the (N, D) pixel matrix. Outputs stay
float64 until they are written to disk.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, DegenerateStd, InvalidSpec, IoFailure, TruncatedFile
from .tiles import PatchTensor

TRAINING_FREE = (
    "mean",
    "max",
    "std",
    "gem",
    "center_weighted",
    "mean_std",
    "mean_max",
    "stats",
    "percentiles",
    "median_iqr",
    "covariance",
)
PARAMETRIC = ("pca", "bovw")
ALL_METHODS = TRAINING_FREE + PARAMETRIC

# fixed component order for the concatenating methods
CONCAT_PARTS = {
    "mean_std": ("mean", "std"),
    "mean_max": ("mean", "max"),
    "stats": ("min", "max", "mean", "std"),
}


@dataclass(frozen=True)
class PoolingMethodSpec:
    kind: str
    p: float = 3.0
    sigma_frac: float = 0.25
    quantiles: tuple = (5.0, 25.0, 50.0, 75.0, 95.0)
    ddof: int = 0
    epsilon: float = 1e-6
    # parametric pools
    target_dim: int | None = None
    k: int = 64
    batch_size: int = 1024
    epochs: int = 10
    seed: int = 0
    max_pixels_per_patch: int | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in ALL_METHODS:
            raise InvalidSpec(f"unknown pooling method {self.kind!r}")
        q = tuple(float(v) for v in self.quantiles)
        object.__setattr__(self, "quantiles", q)
        if not q or any(not 0.0 <= v <= 100.0 for v in q) or any(b <= a for a, b in zip(q, q[1:])):
            raise InvalidSpec(f"quantiles must be strictly increasing within [0, 100], got {q}")
        if not self.p >= 1.0:
            raise InvalidSpec(f"GeM exponent must be >= 1, got {self.p}")
        if not self.sigma_frac > 0.0:
            raise InvalidSpec(f"sigma_frac must be > 0, got {self.sigma_frac}")
        if not self.epsilon > 0.0:
            raise InvalidSpec(f"epsilon must be > 0, got {self.epsilon}")
        if self.ddof not in (0, 1):
            raise InvalidSpec(f"ddof must be 0 or 1, got {self.ddof}")
        if self.k < 2:
            raise InvalidSpec(f"BoVW vocabulary needs k >= 2, got {self.k}")
        if self.target_dim is not None and self.target_dim < 1:
            raise InvalidSpec(f"target_dim must be >= 1, got {self.target_dim}")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidSpec("batch_size and epochs must be positive")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def is_parametric(self) -> bool:
        return self.kind in PARAMETRIC

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quantiles"] = list(self.quantiles)
        return d

    def canonical(self) -> str:
        """Stable string form, used as the method descriptor in pooled-matrix files."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "PoolingMethodSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidSpec(f"unknown method parameters {sorted(unknown)}")
        if "quantiles" in d:
            d["quantiles"] = tuple(d["quantiles"])
        return cls(**d)

    @classmethod
    def parse(cls, value) -> "PoolingMethodSpec":
        """Accept a bare method name, a dict, or an existing spec."""
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            return cls(kind=value)
        if isinstance(value, dict):
            return cls.from_dict(value)
        raise InvalidSpec(f"cannot interpret {value!r} as a pooling method")


def output_dim(spec: PoolingMethodSpec, channels: int, *, pca_input_dim: int | None = None) -> int:
    D = channels
    if D < 1:
        raise InvalidSpec(f"channels must be >= 1, got {D}")
    kind = spec.kind
    if kind in ("mean", "max", "std", "gem", "center_weighted"):
        return D
    if kind in ("mean_std", "mean_max", "median_iqr"):
        return 2 * D
    if kind == "stats":
        return 4 * D
    if kind == "percentiles":
        return len(spec.quantiles) * D
    if kind == "covariance":
        return D * (D + 1) // 2
    if kind == "pca":
        return spec.target_dim if spec.target_dim is not None else min(32, D)
    if kind == "bovw":
        return spec.k
    raise InvalidSpec(kind)


@dataclass(frozen=True, eq=False)
class PooledVector:
    method: PoolingMethodSpec
    values: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def _pix(x) -> np.ndarray:
    if isinstance(x, PatchTensor):
        return x.pixels().astype(np.float64)
    arr = np.asarray(x, dtype=np.float64)
    return arr.reshape(-1, arr.shape[-1])


def _std(pix: np.ndarray, ddof: int) -> np.ndarray:
    n = pix.shape[0]
    if n - ddof < 1:
        raise DegenerateStd(f"std with ddof={ddof} needs at least {ddof + 1} pixels, got {n}")
    return pix.std(axis=0, ddof=ddof)


def pool_mean(x) -> np.ndarray:
    return _pix(x).mean(axis=0)


def pool_min(x) -> np.ndarray:
    return _pix(x).min(axis=0)


def pool_max(x) -> np.ndarray:
    return _pix(x).max(axis=0)


def pool_std(x, ddof: int = 0) -> np.ndarray:
    return _std(_pix(x), ddof)


def pool_gem(x, p: float = 3.0, epsilon: float = 1e-6) -> np.ndarray:
    # embeddings are signed; clamp below at epsilon before the power mean
    pix = np.maximum(_pix(x), epsilon)
    if p == 1.0:
        return pix.mean(axis=0)
    # factor out the per-channel max so large p does not overflow
    scale = pix.max(axis=0)
    return scale * np.mean((pix / scale) ** p, axis=0) ** (1.0 / p)


def center_weights(height: int, width: int, sigma_frac: float = 0.25) -> np.ndarray:
    """Normalized isotropic Gaussian over the pixel grid, shape (H, W)."""
    sigma = sigma_frac * min(height, width)
    r = np.arange(height, dtype=np.float64) - (height - 1) / 2.0
    c = np.arange(width, dtype=np.float64) - (width - 1) / 2.0
    w = np.exp(-(r[:, None] ** 2 + c[None, :] ** 2) / (2.0 * sigma * sigma))
    return w / w.sum()


def pool_center_weighted(x: PatchTensor, sigma_frac: float = 0.25) -> np.ndarray:
    w = center_weights(x.height, x.width, sigma_frac).ravel()
    return w @ _pix(x)


def pool_percentiles(x, quantiles=(5.0, 25.0, 50.0, 75.0, 95.0)) -> np.ndarray:
    """Per-channel quantiles, concatenated quantile-major: all channels at q0, then q1, ..."""
    q = np.asarray(quantiles, dtype=np.float64) / 100.0
    return np.quantile(_pix(x), q, axis=0, method="linear").ravel()


def pool_median_iqr(x) -> np.ndarray:
    q25, q50, q75 = np.quantile(_pix(x), [0.25, 0.5, 0.75], axis=0, method="linear")
    return np.concatenate([q50, q75 - q25])


def covariance_matrix(x, ddof: int = 0) -> np.ndarray:
    pix = _pix(x)
    n = pix.shape[0]
    if n - ddof < 1:
        raise DegenerateStd(f"covariance with ddof={ddof} needs at least {ddof + 1} pixels, got {n}")
    centered = pix - pix.mean(axis=0)
    return centered.T @ centered / (n - ddof)


def pool_covariance(x, ddof: int = 0) -> np.ndarray:
    cov = covariance_matrix(x, ddof)
    rows, cols = np.triu_indices(cov.shape[0])
    return cov[rows, cols]


_SINGLE = {
    "mean": lambda x, s: pool_mean(x),
    "min": lambda x, s: pool_min(x),
    "max": lambda x, s: pool_max(x),
    "std": lambda x, s: pool_std(x, s.ddof),
    "gem": lambda x, s: pool_gem(x, s.p, s.epsilon),
    "center_weighted": lambda x, s: pool_center_weighted(x, s.sigma_frac),
    "percentiles": lambda x, s: pool_percentiles(x, s.quantiles),
    "median_iqr": lambda x, s: pool_median_iqr(x),
    "covariance": lambda x, s: pool_covariance(x, s.ddof),
}


def pool_concat(x, parts, spec: PoolingMethodSpec | None = None) -> np.ndarray:
    spec = spec or PoolingMethodSpec("mean")
    return np.concatenate([_SINGLE[part](x, spec) for part in parts])


def pool_values(spec: PoolingMethodSpec, x: PatchTensor) -> np.ndarray:
    if spec.kind in CONCAT_PARTS:
        return pool_concat(x, CONCAT_PARTS[spec.kind], spec)
    if spec.kind in _SINGLE:
        return _SINGLE[spec.kind](x, spec)
    raise InvalidSpec(f"{spec.kind!r} is parametric; fit it with poolbench.fitted")


def pool(spec: PoolingMethodSpec, x: PatchTensor) -> PooledVector:
    return PooledVector(spec, pool_values(spec, x))


@dataclass(eq=False)
class PooledMatrix:
    """n x d pooled vectors, row i belonging to ``ids[i]``."""

    ids: list[str]
    values: np.ndarray
    method: PoolingMethodSpec
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.ids):
            raise ValueError(f"values shape {self.values.shape} does not match {len(self.ids)} ids")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def take(self, ids) -> "PooledMatrix":
        index = {pid: i for i, pid in enumerate(self.ids)}
        rows = [index[pid] for pid in ids]
        return PooledMatrix(list(ids), self.values[rows], self.method, dict(self.meta))


def pool_matrix(spec: PoolingMethodSpec, items) -> PooledMatrix:
    """Pool an iterable of (id, PatchTensor) pairs with a training-free method."""
    ids, rows = [], []
    for pid, tensor in items:
        ids.append(pid)
        rows.append(pool_values(spec, tensor))
    if not rows:
        return PooledMatrix([], np.zeros((0, 0)), spec)
    return PooledMatrix(ids, np.vstack(rows), spec)


POOLED_MAGIC = b"PVE1"


def write_pooled(matrix: PooledMatrix, path) -> None:
    """Write the binary matrix to ``path`` and the id list to ``path + '.ids'``."""
    path = Path(path)
    desc = matrix.method.canonical().encode("utf-8")
    body = struct.pack("<4sIII", POOLED_MAGIC, matrix.n, matrix.d, len(desc)) + desc
    body += np.ascontiguousarray(matrix.values, dtype="<f4").tobytes()
    try:
        path.write_bytes(body)
        ids_path(path).write_text("".join(f"{pid}\n" for pid in matrix.ids), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def ids_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids")


def read_pooled(path) -> PooledMatrix:
    path = Path(path)
    try:
        buf = path.read_bytes()
        id_lines = ids_path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if buf[:4] != POOLED_MAGIC:
        raise BadMagic(f"expected magic {POOLED_MAGIC!r}, got {buf[:4]!r}")
    if len(buf) < 16:
        raise TruncatedFile("pooled-matrix header is incomplete")
    _, n, d, desc_len = struct.unpack_from("<4sIII", buf)
    start = 16 + desc_len
    if len(buf) != start + 4 * n * d:
        raise TruncatedFile(f"payload length does not match n={n}, d={d}")
    spec = PoolingMethodSpec.from_dict(json.loads(buf[16:start].decode("utf-8")))
    values = np.frombuffer(buf, dtype="<f4", count=n * d, offset=start).reshape(n, d)
    if len(id_lines) != n:
        raise TruncatedFile(f"id sidecar has {len(id_lines)} lines, matrix has {n} rows")
    return PooledMatrix(id_lines, values.astype(np.float32), spec)
