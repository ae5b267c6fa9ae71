import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from poolbench.errors import DimMismatch, EmptyInput, LeakageError, LengthMismatch, SingularInput
from poolbench.pooling import PooledMatrix, PoolingMethodSpec
from poolbench.probes import (
    LinearModel,
    Standardizer,
    accuracy,
    cosine_distance,
    fit_knn,
    fit_linear,
    knn_predict,
    knn_predict_batch,
    linear_predict,
    linear_predict_batch,
    load_linear,
    logistic_objective,
    save_linear,
    solve_logistic,
    stratified_folds,
)
from poolbench.splits import SplitAssignment


def one_hot(y, K):
    Y = np.zeros((len(y), K))
    Y[np.arange(len(y)), y] = 1.0
    return Y


# ------------------------------------------------------------------- cosine


def test_cosine_examples():
    assert cosine_distance([1.0, 2.0], [1.0, 2.0]) == pytest.approx(0.0, abs=1e-15)
    assert cosine_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert cosine_distance([1.0, -2.0, 3.0], [3.0, -6.0, 9.0]) == pytest.approx(0.0, abs=1e-15)
    assert cosine_distance([0.0, 0.0], [1.0, 1.0]) == 1.0
    assert cosine_distance([1.0, 0.0], [-1.0, 0.0]) == 2.0
    with pytest.raises(DimMismatch):
        cosine_distance([1.0], [1.0, 2.0])


# ---------------------------------------------------------------------- kNN


def test_knn_single_point():
    model = fit_knn(np.array([[1.0, 2.0]]), [3], k=1)
    assert knn_predict(model, [5.0, -1.0]) == 3


def test_knn_query_equals_training_point(rng):
    X = rng.standard_normal((20, 4))
    y = rng.integers(0, 3, 20)
    model = fit_knn(X, y, k=1)
    for i in range(20):
        assert knn_predict(model, X[i]) == y[i]


def test_knn_matches_exhaustive_oracle(rng):
    for trial in range(5):
        X = rng.standard_normal((50, 6))
        y = rng.integers(0, 4, 50)
        Q = rng.standard_normal((50, 6))
        model = fit_knn(X, y, k=5)
        got = knn_predict_batch(model, Q).tolist()
        want = [oracles.knn_predict(X.tolist(), y.tolist(), q.tolist(), 5) for q in Q]
        assert got == want


def test_knn_vote_tie_goes_to_closest_class():
    # neighbors by distance: class 1, class 0, class 0, class 1 -> tie 2-2, class 1 is nearest
    X = np.array([[1.0, 0.05], [1.0, 0.1], [1.0, 0.2], [1.0, 0.3]])
    model = fit_knn(X, [1, 0, 0, 1], k=4)
    assert knn_predict(model, [1.0, 0.0]) == 1


def test_knn_distance_tie_goes_to_lower_index():
    X = np.array([[2.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    model = fit_knn(X, [7, 8, 9], k=1)
    assert knn_predict(model, [3.0, 0.0]) == 7


@given(st.integers(0, 1000), st.floats(1e-3, 1e3))
def test_knn_query_scale_invariance(seed, scale):
    r = np.random.default_rng(seed)
    X = r.standard_normal((30, 5))
    y = r.integers(0, 3, 30)
    q = r.standard_normal(5)
    model = fit_knn(X, y, k=5)
    assert knn_predict(model, q) == knn_predict(model, q * scale)


def test_knn_zero_vectors_do_not_crash():
    model = fit_knn(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), [0, 1, 2], k=1)
    assert knn_predict(model, [0.0, 0.0]) == 0  # all distances 1.0, lowest index wins


def test_knn_leakage_guard():
    split = SplitAssignment("random", ["a"], ["b"])
    pm = PooledMatrix(["a", "b"], np.eye(2), PoolingMethodSpec("mean"))
    with pytest.raises(LeakageError):
        fit_knn(pm, [0, 1], k=1, split=split)


# ------------------------------------------------------------------- linear


def test_gradient_matches_central_differences(rng):
    h = 1e-5
    for _ in range(20):
        n, d, K = rng.integers(5, 15), rng.integers(2, 6), rng.integers(2, 5)
        X = rng.standard_normal((n, d))
        Y = one_hot(rng.integers(0, K, n), K)
        c = 10 ** rng.uniform(-1, 1)
        p = rng.standard_normal(K * (d + 1))
        _, g = logistic_objective(p, X, Y, c)
        num = np.empty_like(p)
        for i in range(len(p)):
            e = np.zeros_like(p)
            e[i] = h
            num[i] = (logistic_objective(p + e, X, Y, c)[0] - logistic_objective(p - e, X, Y, c)[0]) / (2 * h)
        rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
        assert rel.max() <= 1e-4


def test_separable_blobs_every_c(rng):
    X = np.vstack([rng.normal([5, 0], 0.3, (100, 2)), rng.normal([-5, 0], 0.3, (100, 2))])
    y = np.array([0] * 100 + [1] * 100)
    for c in (0.01, 0.1, 1.0, 10.0, 100.0):
        model = fit_linear(X, y, c_grid=[c])
        assert accuracy(linear_predict_batch(model, X), y) == 1.0


def test_objective_monotone_and_converges(rng):
    X = rng.standard_normal((60, 4))
    y = (X[:, 0] + 0.5 * rng.standard_normal(60) > 0).astype(int) + (X[:, 1] > 1).astype(int)
    res = solve_logistic(Standardizer.fit(X).transform(X), y, 3, 1.0)
    trace = np.array(res.objective_trace)
    assert np.all(np.diff(trace) <= 1e-10)
    assert res.converged and res.grad_norm <= 1e-6


def test_weight_norm_shrinks_with_regularization(rng):
    X = Standardizer.fit(rng.standard_normal((80, 5))).transform(rng.standard_normal((80, 5)))
    y = rng.integers(0, 3, 80)
    norms = [np.linalg.norm(solve_logistic(X, y, 3, c).weights) for c in (0.01, 0.1, 1.0, 10.0, 100.0)]
    assert all(a <= b + 1e-6 for a, b in zip(norms, norms[1:]))


def test_duplicated_features_large_c_runs(rng):
    base = rng.standard_normal((60, 3))
    X = np.hstack([base, base, base[:, :1]])
    y = (base[:, 0] > 0).astype(int)
    model = fit_linear(X, y, c_grid=[0.01, 1.0, 100.0])
    assert model.chosen_c in (0.01, 1.0, 100.0)
    assert [row["c"] for row in model.cv_table] == [0.01, 1.0, 100.0]
    assert all(0.0 <= row["mean_accuracy"] <= 1.0 for row in model.cv_table)


def test_cv_ties_pick_smallest_c(rng):
    X = np.vstack([rng.normal([5, 0], 0.3, (30, 2)), rng.normal([-5, 0], 0.3, (30, 2))])
    y = np.array([0] * 30 + [1] * 30)
    model = fit_linear(X, y, c_grid=[10.0, 0.1, 1.0])
    assert model.chosen_c == 0.1  # every C scores 1.0 in CV


def test_folds_partition_and_stratify():
    y = np.array([0] * 10 + [1] * 7 + [2] * 5)
    fold_of = stratified_folds(y, 3, seed=4)
    assert set(fold_of.tolist()) == {0, 1, 2}
    for cls in (0, 1, 2):
        counts = np.bincount(fold_of[y == cls], minlength=3)
        assert counts.max() - counts.min() <= 1
    assert np.array_equal(fold_of, stratified_folds(y, 3, seed=4))


def test_single_class_rejected():
    with pytest.raises(SingularInput):
        fit_linear(np.zeros((9, 2)), [1] * 9)


def test_linear_leakage_guard():
    split = SplitAssignment("random", ["a", "b"], ["c"])
    pm = PooledMatrix(["a", "b", "c"], np.eye(3), PoolingMethodSpec("mean"))
    with pytest.raises(LeakageError):
        fit_linear(pm, [0, 1, 0], split=split)


def test_standardizer_properties(rng):
    X = rng.standard_normal((200, 6)) * [1, 10, 0.1, 5, 1e3, 1] + 7
    X[:, 5] = 3.0
    s = Standardizer.fit(X)
    Z = s.transform(X)
    assert np.all(np.abs(Z.mean(axis=0)) <= 1e-8)
    np.testing.assert_allclose(Z[:, :5].std(axis=0), 1.0, atol=1e-6)
    assert s.scale[5] == 1.0
    assert np.all(s.scale >= 1e-12)


def identity_model(K):
    return LinearModel(np.eye(K), np.zeros(K), Standardizer(np.zeros(K), np.ones(K)), 1.0, np.arange(K))


def test_linear_predict_rules():
    m = identity_model(4)
    for j in range(4):
        assert linear_predict(m, np.eye(4)[j]) == j
    zero = LinearModel(np.zeros((3, 2)), np.zeros(3), Standardizer(np.zeros(2), np.ones(2)), 1.0, np.arange(3))
    assert linear_predict(zero, [4.0, -2.0]) == 0
    with pytest.raises(DimMismatch):
        linear_predict(m, [1.0, 2.0])


def test_linear_scale_invariance(rng):
    X = rng.standard_normal((90, 4))
    y = (X @ rng.standard_normal((4, 3))).argmax(axis=1)
    scale = rng.uniform(0.1, 10, 4)
    a = fit_linear(X, y, c_grid=[1.0])
    b = fit_linear(X * scale, y, c_grid=[1.0])
    Q = rng.standard_normal((100, 4))
    assert np.array_equal(linear_predict_batch(a, Q), linear_predict_batch(b, Q * scale))


def test_linear_model_file_round_trip(tmp_path, rng):
    X = rng.standard_normal((60, 3))
    y = rng.integers(0, 3, 60)
    model = fit_linear(X, y, c_grid=[1.0])
    save_linear(model, tmp_path / "m.lin")
    back = load_linear(tmp_path / "m.lin")
    save_linear(back, tmp_path / "m2.lin")
    assert (tmp_path / "m.lin").read_bytes() == (tmp_path / "m2.lin").read_bytes()
    assert (tmp_path / "m.lin").read_bytes()[:4] == b"LIN1"
    assert back.chosen_c == 1.0 and back.classes.tolist() == model.classes.tolist()


# ----------------------------------------------------------------- accuracy


def test_accuracy():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([1] * 87 + [0] * 13, [1] * 100) == 0.87
    with pytest.raises(LengthMismatch):
        accuracy([1], [1, 2])
    with pytest.raises(EmptyInput):
        accuracy([], [])
