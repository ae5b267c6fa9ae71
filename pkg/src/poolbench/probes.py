"""kNN (cosine) and standardized multinomial logistic-regression probes."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .errors import (
    BadMagic,
    DimMismatch,
    EmptyInput,
    IoFailure,
    LengthMismatch,
    NonFinite,
    SingularInput,
    TruncatedFile,
)
from .fitted import check_leakage
from .pooling import PooledMatrix

NORM_FLOOR = 1e-12
DEFAULT_C_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)


def _unpack_train(train, labels):
    if isinstance(train, PooledMatrix):
        return np.asarray(train.values, dtype=np.float64), list(train.ids)
    return np.asarray(train, dtype=np.float64), None


def accuracy(preds, truth) -> float:
    preds, truth = list(preds), list(truth)
    if len(preds) != len(truth):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(truth)} labels")
    if not preds:
        raise EmptyInput("accuracy of an empty prediction list")
    return sum(int(p) == int(t) for p, t in zip(preds, truth)) / len(preds)


# --------------------------------------------------------------------------- kNN


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return 1.0
    return float(np.clip(1.0 - (a @ b) / (na * nb), 0.0, 2.0))


def cosine_distances(Q, T) -> np.ndarray:
    """Pairwise cosine distances (len(Q), len(T)); rows or columns with ~zero norm give 1.0."""
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    T = np.atleast_2d(np.asarray(T, dtype=np.float64))
    qn = np.linalg.norm(Q, axis=1)
    tn = np.linalg.norm(T, axis=1)
    qs = np.where(qn < NORM_FLOOR, 1.0, qn)
    ts = np.where(tn < NORM_FLOOR, 1.0, tn)
    dist = 1.0 - (Q / qs[:, None]) @ (T / ts[:, None]).T
    dist[qn < NORM_FLOOR, :] = 1.0
    dist[:, tn < NORM_FLOOR] = 1.0
    return np.clip(dist, 0.0, 2.0)


@dataclass(frozen=True, eq=False)
class KnnModel:
    train_matrix: np.ndarray
    train_labels: np.ndarray
    k: int = 5


def fit_knn(train, labels, k: int = 5, *, split=None) -> KnnModel:
    X, ids = _unpack_train(train, labels)
    check_leakage(ids, split, "fit_knn")
    y = np.asarray(labels, dtype=np.int64)
    if len(X) != len(y):
        raise LengthMismatch(f"{len(X)} rows vs {len(y)} labels")
    if not 1 <= k <= len(X):
        raise ValueError(f"k={k} must be in [1, {len(X)}]")
    if not np.all(np.isfinite(X)):
        raise NonFinite("kNN training matrix contains non-finite values")
    return KnnModel(X, y, k)


def _vote(neighbor_labels: np.ndarray) -> int:
    classes, counts = np.unique(neighbor_labels, return_counts=True)
    tied = set(classes[counts == counts.max()].tolist())
    # neighbors are ordered nearest first: first tied class wins
    for lab in neighbor_labels:
        if lab in tied:
            return int(lab)
    raise AssertionError("unreachable")


def knn_predict_batch(model: KnnModel, queries) -> np.ndarray:
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if Q.shape[1] != model.train_matrix.shape[1]:
        raise DimMismatch(f"query dim {Q.shape[1]} vs train dim {model.train_matrix.shape[1]}")
    dist = cosine_distances(Q, model.train_matrix)
    order = np.argsort(dist, axis=1, kind="stable")[:, : model.k]
    return np.array([_vote(model.train_labels[row]) for row in order], dtype=np.int64)


def knn_predict(model: KnnModel, query) -> int:
    return int(knn_predict_batch(model, np.asarray(query)[None, :])[0])


# ------------------------------------------------------------------------ linear


@dataclass(frozen=True, eq=False)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        scale = X.std(axis=0)
        scale = np.where(scale < NORM_FLOOR, 1.0, scale)
        return cls(X.mean(axis=0), scale)

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale


def logistic_objective(params, X, Y, c):
    """Summed cross-entropy plus ||W||^2 / (2c), and its gradient.

    ``params`` is W (K x d, row-major) followed by b (K). ``Y`` is one-hot (n x K).
    """
    n, d = X.shape
    K = Y.shape[1]
    W = params[: K * d].reshape(K, d)
    b = params[K * d :]
    logits = X @ W.T + b
    shift = logits.max(axis=1, keepdims=True)
    z = logits - shift
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - lse
    loss = -(Y * log_p).sum() + (W * W).sum() / (2.0 * c)
    G = np.exp(log_p) - Y
    grad_W = G.T @ X + W / c
    grad_b = G.sum(axis=0)
    return loss, np.concatenate([grad_W.ravel(), grad_b])


@dataclass
class SolveResult:
    weights: np.ndarray
    bias: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float
    objective_trace: list = field(default_factory=list)


def solve_logistic(X, y_index, n_classes, c, max_iter=2000, tol=1e-6) -> SolveResult:
    """Minimize the L2 multinomial objective from W=0, b=0 with L-BFGS.

    Stops when the gradient infinity-norm reaches ``tol`` or at ``max_iter``.
    """
    n, d = X.shape
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), y_index] = 1.0
    x0 = np.zeros(n_classes * (d + 1))
    trace = [logistic_objective(x0, X, Y, c)[0]]

    def fun(p):
        f, g = logistic_objective(p, X, Y, c)
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            raise NonFinite(f"objective became non-finite at C={c}")
        return f, g

    def record(intermediate_result):
        trace.append(float(intermediate_result.fun))

    res = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        callback=record,
        options={"maxiter": max_iter, "gtol": tol, "ftol": np.finfo(float).eps, "maxcor": 20},
    )
    _, g = logistic_objective(res.x, X, Y, c)
    gnorm = float(np.abs(g).max())
    W = res.x[: n_classes * d].reshape(n_classes, d)
    b = res.x[n_classes * d :]
    return SolveResult(W, b, gnorm <= tol, int(res.nit), gnorm, trace)


def stratified_folds(y, folds: int, seed: int) -> np.ndarray:
    """Fold index per sample; each class is shuffled (seeded) then dealt round-robin."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=np.int64)
    offset = 0
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        members = members[rng.permutation(len(members))]
        fold_of[members] = (offset + np.arange(len(members))) % folds
        offset += len(members)
    return fold_of


@dataclass(frozen=True, eq=False)
class LinearModel:
    weights: np.ndarray  # (K, d)
    bias: np.ndarray  # (K,)
    standardizer: Standardizer
    chosen_c: float
    classes: np.ndarray  # original label of each of the K rows
    cv_table: list = field(default_factory=list)
    converged: bool = True
    objective_trace: list = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]


def _fit_once(X, y_index, K, c, max_iter, tol):
    std = Standardizer.fit(X)
    res = solve_logistic(std.transform(X), y_index, K, c, max_iter, tol)
    return std, res


def fit_linear(
    train,
    labels,
    c_grid=DEFAULT_C_GRID,
    folds: int = 3,
    seed: int = 0,
    *,
    split=None,
    max_iter: int = 2000,
    tol: float = 1e-6,
) -> LinearModel:
    """Standardized multinomial logistic regression, C picked by stratified k-fold CV.

    The standardizer is refit on each CV training fold, then on the full
    training set for the final model. Equal CV scores go to the smaller C.
    """
    X, ids = _unpack_train(train, labels)
    check_leakage(ids, split, "fit_linear")
    y = np.asarray(labels, dtype=np.int64)
    if len(X) != len(y):
        raise LengthMismatch(f"{len(X)} rows vs {len(y)} labels")
    c_grid = sorted(float(c) for c in c_grid)
    if not c_grid or any(c <= 0 for c in c_grid):
        raise ValueError(f"c_grid must be non-empty and positive, got {c_grid}")
    classes = np.unique(y)
    K = len(classes)
    if K < 2:
        raise SingularInput("all training labels are identical")
    if len(y) < folds * K:
        raise ValueError(f"need at least folds*K={folds * K} training rows, got {len(y)}")
    if not np.all(np.isfinite(X)):
        raise NonFinite("training matrix contains non-finite values")
    y_index = np.searchsorted(classes, y)

    fold_of = stratified_folds(y_index, folds, seed)
    cv_table = []
    for c in c_grid:
        scores, converged = [], True
        for f in range(folds):
            tr, va = fold_of != f, fold_of == f
            std, res = _fit_once(X[tr], y_index[tr], K, c, max_iter, tol)
            logits = std.transform(X[va]) @ res.weights.T + res.bias
            scores.append(accuracy(np.argmax(logits, axis=1), y_index[va]))
            converged &= res.converged
        cv_table.append(
            {"c": c, "mean_accuracy": float(np.mean(scores)), "fold_accuracies": scores, "converged": converged}
        )
    best = max(cv_table, key=lambda row: (row["mean_accuracy"], -row["c"]))
    std, res = _fit_once(X, y_index, K, best["c"], max_iter, tol)
    return LinearModel(res.weights, res.bias, std, best["c"], classes, cv_table, res.converged, res.objective_trace)


def linear_decision(model: LinearModel, queries) -> np.ndarray:
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if Q.shape[1] != model.n_features:
        raise DimMismatch(f"query dim {Q.shape[1]} vs model dim {model.n_features}")
    return model.standardizer.transform(Q) @ model.weights.T + model.bias


def linear_predict_batch(model: LinearModel, queries) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class
    return model.classes[np.argmax(linear_decision(model, queries), axis=1)]


def linear_predict(model: LinearModel, query) -> int:
    return int(linear_predict_batch(model, np.asarray(query)[None, :])[0])


# LIN1: magic, u32 K, u32 d, f64 chosen_c, i32[K] classes, then binary32
# standardizer mean[d], scale[d], weights[K*d], bias[K]
_LIN_HEAD = struct.Struct("<4sIId")


def save_linear(model: LinearModel, path) -> None:
    K, d = model.weights.shape
    buf = _LIN_HEAD.pack(b"LIN1", K, d, model.chosen_c)
    buf += np.asarray(model.classes, dtype="<i4").tobytes()
    for arr in (model.standardizer.mean, model.standardizer.scale, model.weights, model.bias):
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    try:
        Path(path).write_bytes(buf)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_linear(path) -> LinearModel:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if buf[:4] != b"LIN1":
        raise BadMagic(f"expected magic b'LIN1', got {buf[:4]!r}")
    if len(buf) < _LIN_HEAD.size:
        raise TruncatedFile("linear model header is incomplete")
    _, K, d, c = _LIN_HEAD.unpack_from(buf)
    offset = _LIN_HEAD.size
    if len(buf) != offset + 4 * K + 4 * (2 * d + K * d + K):
        raise TruncatedFile("linear model payload has the wrong length")
    classes = np.frombuffer(buf, "<i4", K, offset).astype(np.int64)
    offset += 4 * K
    out = []
    for size in (d, d, K * d, K):
        out.append(np.frombuffer(buf, "<f4", size, offset).astype(np.float32))
        offset += 4 * size
    mean, scale, W, b = out
    return LinearModel(W.reshape(K, d), b, Standardizer(mean, scale), c, classes)
