import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dirprune.nn import (Dataset, DimensionError, MinibatchStream, Mlp, NetworkSpec, NonFiniteError,
                         QuadraticLoss, forward, grad_check, gradient, init_params, make_synthetic,
                         next_batch)

LINEAR = NetworkSpec((2, 1), activation="identity")
X1 = np.array([[1.0, 1.0]])
Y1 = np.array([[2.0]])


def test_linear_forward_by_hand():
    assert forward(LINEAR, np.array([1.0, 2.0]), (X1, Y1)) == 1.0


def test_zero_weights_zero_targets():
    spec = NetworkSpec((3, 4, 2), activation="tanh")
    X = np.random.default_rng(0).normal(size=(5, 3))
    assert forward(spec, np.zeros(spec.dim), (X, np.zeros((5, 2)))) == 0.0


def test_uniform_softmax_cross_entropy():
    spec = NetworkSpec((1, 2), activation="identity", loss="cross_entropy")
    loss = forward(spec, np.zeros(spec.dim), (np.array([[0.7]]), np.array([0])))
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_linear_gradient_by_hand():
    np.testing.assert_array_equal(gradient(LINEAR, np.array([1.0, 2.0]), (X1, Y1)), [2.0, 2.0])


def test_quadratic_gradient_is_exact():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(4, 4))
    H = A @ A.T
    ws = rng.normal(size=4)
    q = QuadraticLoss(H, ws)
    w = rng.normal(size=4)
    np.testing.assert_array_equal(q.grad(w), H @ (w - ws))


def test_tanh_mlp_gradient_vs_finite_differences():
    spec = NetworkSpec((2, 8, 2), activation="tanh")
    rng = np.random.default_rng(2)
    w = rng.normal(size=spec.dim)
    batch = (rng.normal(size=(6, 2)), rng.normal(size=(6, 2)))
    assert grad_check(spec, w, batch, eps=1e-5) <= 1e-5


def test_grad_check_linear_is_tight():
    assert grad_check(LINEAR, np.array([1.0, 2.0]), (X1, Y1), eps=1e-5) <= 1e-8


def test_grad_check_dead_relu_is_finite():
    spec = NetworkSpec((1, 2, 1), activation="relu")
    # first hidden unit has a large negative pre-activation: dead
    w = np.array([-5.0, 1.0, 0.3, 0.7])
    err = grad_check(spec, w, (np.array([[1.0]]), np.array([[0.5]])))
    assert np.isfinite(err)
    g = gradient(spec, w, (np.array([[1.0]]), np.array([[0.5]])))
    assert g[0] == 0.0 and g[2] == 0.0


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(LINEAR, np.ones(2), (X1, Y1), eps=0)


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        forward(LINEAR, np.ones(3), (X1, Y1))


def test_non_finite_reported():
    with pytest.raises(NonFiniteError):
        forward(LINEAR, np.array([np.inf, 1.0]), (X1, Y1))


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec((3,))
    with pytest.raises(ValueError):
        NetworkSpec((3, 0))
    with pytest.raises(ValueError):
        NetworkSpec((3, 1), loss="cross_entropy")
    with pytest.raises(ValueError):
        NetworkSpec((3, 1), activation="sigmoid")


def test_bias_dimension():
    assert NetworkSpec((3, 4, 2)).dim == 20
    assert NetworkSpec((3, 4, 2), bias=True).dim == 26


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), act=st.sampled_from(["tanh", "identity"]),
       loss=st.sampled_from(["squared_error", "cross_entropy"]), bias=st.booleans())
def test_gradient_matches_finite_differences(seed, act, loss, bias):
    rng = np.random.default_rng(seed)
    widths = [int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(2, 4))]
    spec = NetworkSpec(widths, act, loss, bias)
    w = rng.normal(size=spec.dim)
    X = rng.normal(size=(4, widths[0]))
    Y = rng.integers(0, widths[-1], size=4) if loss == "cross_entropy" else rng.normal(size=(4, widths[-1]))
    assert grad_check(spec, w, (X, Y)) <= 1e-5


def test_forward_and_gradient_are_pure():
    spec = NetworkSpec((3, 5, 2), activation="tanh")
    rng = np.random.default_rng(4)
    w = rng.normal(size=spec.dim)
    batch = (rng.normal(size=(7, 3)), rng.normal(size=(7, 2)))
    assert forward(spec, w, batch) == forward(spec, w.copy(), batch)
    np.testing.assert_array_equal(gradient(spec, w, batch), gradient(spec, w, batch))


def test_per_example_grads_average_to_gradient():
    spec = NetworkSpec((3, 4, 3), activation="tanh", loss="cross_entropy", bias=True)
    rng = np.random.default_rng(5)
    w = rng.normal(size=spec.dim)
    X, Y = rng.normal(size=(9, 3)), rng.integers(0, 3, size=9)
    m = Mlp(spec)
    np.testing.assert_allclose(m.per_example_grads(w, X, Y).mean(axis=0), m.grad(w, X, Y),
                               rtol=1e-12, atol=1e-14)


def test_stream_replay():
    a = MinibatchStream(42, 100, 4)
    b = MinibatchStream(42, 100, 4)
    seq_a = np.array([next_batch(a) for _ in range(10_000)])
    seq_b = np.array([next_batch(b) for _ in range(10_000)])
    np.testing.assert_array_equal(seq_a, seq_b)
    assert a.position == 10_000


def test_stream_random_access_matches_sequential():
    s = MinibatchStream(9, 50, 3)
    seq = [next_batch(s) for _ in range(70_000)]
    fresh = MinibatchStream(9, 50, 3)
    for k in (0, 1, 21844, 21845, 69_999):
        np.testing.assert_array_equal(fresh.indices_at(k), seq[k])


def test_full_batch_draw_with_replacement():
    s = MinibatchStream(1, 10, 10)
    idx = next_batch(s)
    assert idx.shape == (10,) and idx.min() >= 0 and idx.max() < 10


def test_stream_frequencies_uniform():
    n = 20
    s = MinibatchStream(123, n, 1000)
    counts = np.zeros(n)
    for _ in range(1000):
        counts += np.bincount(next_batch(s), minlength=n)
    chi2 = np.sum((counts - 1e6 / n) ** 2 / (1e6 / n))
    assert stats.chi2.sf(chi2, n - 1) > 0.0027  # 3 sigma


def test_shuffle_covers_each_epoch():
    s = MinibatchStream(3, 23, 5, shuffle=True)
    assert s.steps_per_epoch == 5
    for _ in range(3):
        idx = np.concatenate([next_batch(s) for _ in range(5)])
        np.testing.assert_array_equal(np.sort(idx), np.arange(23))


def test_rank_one_null_space():
    ds = make_synthetic("rank_deficient_regression", 0, 50, 2, rank=1)
    H = 2.0 / len(ds) * ds.inputs.T @ ds.inputs
    null = ds.meta["null_basis"][:, 0]
    assert np.linalg.norm(H @ null) <= 1e-10
    assert abs(null @ ds.meta["row_basis"][:, 0]) <= 1e-12


def test_full_rank_has_empty_null_space():
    ds = make_synthetic("rank_deficient_regression", 0, 50, 5, rank=5)
    assert ds.meta["null_basis"].shape == (5, 0)


def test_invalid_rank():
    with pytest.raises(ValueError):
        make_synthetic("rank_deficient_regression", 0, 10, 3, rank=4)


def test_blobs_replay():
    a = make_synthetic("blobs", 7, 40, (2, 2))
    b = make_synthetic("blobs", 7, 40, (2, 2))
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.targets, b.targets)
    assert a.is_classification


def test_dataset_csv_roundtrip(tmp_path):
    ds = make_synthetic("rank_deficient_regression", 2, 6, 3, rank=2)
    ds.to_csv(tmp_path / "d.csv")
    back = Dataset.from_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.targets, ds.targets)
    lab = make_synthetic("blobs", 2, 6, (2, 3))
    lab.to_csv(tmp_path / "l.csv")
    back = Dataset.from_csv(tmp_path / "l.csv")
    np.testing.assert_array_equal(back.targets, lab.targets)


def test_dataset_rejects_mismatched_rows():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros((2, 1)))


def test_init_params_deterministic():
    spec = NetworkSpec((4, 3, 2), bias=True)
    np.testing.assert_array_equal(init_params(spec, 5), init_params(spec, 5))
    assert init_params(spec, 5).size == spec.dim
