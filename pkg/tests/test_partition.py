import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fliu.dataset import LabeledDataset
from fliu.partition import (
    Partition,
    PartitionError,
    RetryBudgetExhausted,
    SinkhornConvergenceError,
    allocate_counts,
    build_partition,
    check_partition,
    partition_iid,
    partition_label_skew,
    partition_lsqs,
    partition_pathological,
    partition_quantity_skew,
    sample_dirichlet,
    sinkhorn_knopp,
    support_sizes,
)


def ipf_oracle(matrix, row_target, col_target, tol=1e-10):
    """Plain-Python alternating normalisation, independent of the package code."""
    m = [list(map(float, r)) for r in matrix]
    for _ in range(100_000):
        for r in m:
            s = sum(r)
            r[:] = [v * row_target / s for v in r]
        for j in range(len(m[0])):
            s = sum(r[j] for r in m)
            for r in m:
                r[j] *= col_target / s
        if all(abs(sum(r) - row_target) < tol for r in m):
            return m
    raise AssertionError("oracle did not converge")


def labels_dataset(counts, name="d"):
    labels = np.concatenate([np.full(c, j) for j, c in enumerate(counts)])
    return LabeledDataset(np.zeros((len(labels), 1)), labels, len(counts), name)


# --- Dirichlet -------------------------------------------------------------

def test_dirichlet_on_simplex(rng):
    for alpha in ([0.01] * 5, [1.0] * 10, [1e-4, 1e-4], [3.0]):
        p = sample_dirichlet(alpha, rng)
        assert np.all(p > 0)
        assert abs(p.sum() - 1.0) < 1e-12


def test_dirichlet_concentrated(rng):
    for _ in range(100):
        p = sample_dirichlet([1e6, 1e6], rng)
        assert np.all(np.abs(p - 0.5) < 0.01)


def test_dirichlet_symmetric_mean(rng):
    draws = np.stack([sample_dirichlet(np.ones(10), rng) for _ in range(10_000)])
    assert np.all(np.abs(draws.mean(0) - 0.1) < 0.01)


def test_dirichlet_rejects_nonpositive(rng):
    with pytest.raises(PartitionError):
        sample_dirichlet([1.0, 0.0], rng)


# --- Sinkhorn-Knopp --------------------------------------------------------

def test_sinkhorn_fixed_point():
    m = np.array([[0.2, 0.3], [0.8, 0.7]])
    fit = sinkhorn_knopp(m, [0.5, 1.5], 1.0)
    assert fit.iterations == 1
    assert np.max(np.abs(fit.entries - m)) < 1e-12


def test_sinkhorn_uniform_two_by_two():
    fit = sinkhorn_knopp(np.ones((2, 2)), 1.0, 1.0)
    assert np.allclose(fit.entries, 0.5, atol=1e-12)


def test_sinkhorn_matches_oracle():
    oracle = np.array(ipf_oracle([[2, 1], [1, 2]], 1.0, 1.0))
    fit = sinkhorn_knopp(np.array([[2.0, 1.0], [1.0, 2.0]]), 1.0, 1.0)
    assert np.max(np.abs(fit.entries - oracle)) < 1e-8
    # symmetry pins the limit to (2/3, 1/3)
    assert np.allclose(oracle, [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-9)


def test_sinkhorn_errors():
    with pytest.raises(PartitionError):
        sinkhorn_knopp(np.ones((2, 3)), 1.0, 1.0)  # 2*1 != 3*1
    with pytest.raises(PartitionError):
        sinkhorn_knopp(np.array([[1.0, 0.0], [1.0, 1.0]]), 1.0, 1.0)
    with pytest.raises(SinkhornConvergenceError) as info:
        sinkhorn_knopp(np.array([[1.0, 1e-6], [1e-6, 1.0]]), [1.5, 0.5], 1.0, max_iter=2)
    assert info.value.result.deviation >= 1e-8


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(2, 30), L=st.integers(2, 12))
def test_sinkhorn_marginals_property(seed, K, L):
    m = np.random.default_rng(seed).uniform(0.01, 1.0, size=(K, L))
    fit = sinkhorn_knopp(m, L / K, 1.0)
    assert fit.deviation < 1e-8
    assert np.all(np.abs(fit.col_sums() - 1.0) < 1e-8)
    assert np.all(np.abs(fit.row_sums() - L / K) < 1e-8)


# --- allocate_counts -------------------------------------------------------

def test_allocate_tie_break_lower_client():
    counts = allocate_counts(np.array([[0.5], [0.5]]), [101])
    assert counts[:, 0].tolist() == [51, 50]


def test_allocate_degenerate_column():
    assert allocate_counts(np.array([[1.0], [0.0]]), [7])[:, 0].tolist() == [7, 0]


def test_allocate_random_columns_exact(rng):
    for _ in range(100):
        fitted = sinkhorn_knopp(rng.uniform(0.01, 1, (10, 10)), 1.0, 1.0)
        counts = allocate_counts(fitted, np.full(10, 6000))
        assert counts.sum(axis=0).tolist() == [6000] * 10
        assert np.all(np.abs(counts - fitted.entries * 6000) < 1)


def test_allocate_rebalance_keeps_cell_bound(rng):
    fitted = sinkhorn_knopp(rng.uniform(0.01, 1, (7, 5)), 5 / 7, 1.0)
    class_counts = np.array([101, 99, 100, 103, 97])
    row_totals = fitted.entries @ class_counts
    counts = allocate_counts(fitted, class_counts, row_totals=row_totals)
    assert counts.sum(axis=0).tolist() == class_counts.tolist()
    assert np.all(np.abs(counts - fitted.entries * class_counts) < 1)
    assert np.all(np.abs(counts.sum(axis=1) - row_totals) <= 1.0 + 1e-9)


# --- environments ----------------------------------------------------------

@pytest.fixture(scope="module")
def mnist_shaped():
    """Balanced 10-class labels at MNIST scale (features irrelevant for partitioning)."""
    train = labels_dataset([6000] * 10, "train")
    test = labels_dataset([1000] * 10, "test")
    return train, test


def test_iid_exact_mnist_shape(mnist_shaped, rng):
    train, test = mnist_shaped
    part = partition_iid(train, test, 100, rng)
    check_partition(part, len(train), len(test))
    hist = part.label_histograms(train)
    assert np.all(hist == 60)
    assert part.train_sizes().tolist() == [600] * 100


def test_iid_single_client(small_split, rng):
    train, test = small_split
    part = partition_iid(train, test, 1, rng)
    assert np.array_equal(part.train[0], np.arange(len(train)))
    assert np.array_equal(part.test[0], np.arange(len(test)))


def test_iid_remainders():
    train = labels_dataset([11] * 5)
    part = partition_iid(train, train, 2, np.random.default_rng(0))
    hist = part.label_histograms(train)
    assert set(hist.ravel().tolist()) <= {5, 6}
    assert abs(int(np.diff(part.train_sizes())[0])) <= 1


def test_iid_class_smaller_than_k():
    train = labels_dataset([3, 10])
    with pytest.raises(PartitionError):
        partition_iid(train, train, 5, np.random.default_rng(0))


def test_path_two_classes_each(mnist_shaped, rng):
    train, test = mnist_shaped
    part = partition_pathological(train, test, 100, rng)
    check_partition(part, len(train), len(test))
    assert set(support_sizes(part, train)) == {2}
    assert set(support_sizes(part, test, "test")) == {2}


def test_path_single_client_cannot_cover(small_split):
    train, test = small_split
    with pytest.raises(RetryBudgetExhausted):
        partition_pathological(train, test, 1, np.random.default_rng(0))


def _covering_count(K, L):
    return sum((-1) ** j * math.comb(L, j) * math.comb(L - j, 2) ** K for j in range(L + 1))


def test_path_covering_count_formula_brute_force():
    pairs = list(itertools.combinations(range(6), 2))
    brute = sum(1 for combo in itertools.product(pairs, repeat=3) if len(set().union(*combo)) == 6)
    assert brute == _covering_count(3, 6) == 15 * 6


def test_path_five_clients_ten_classes(small_split):
    # 113400 of the 45**5 ordered pair draws cover all ten classes
    assert _covering_count(5, 10) == 113400
    train, test = small_split
    successes = 0
    for seed in range(4):
        try:
            part = partition_pathological(train, test, 5, np.random.default_rng(seed))
        except RetryBudgetExhausted:
            continue
        successes += 1
        check_partition(part, len(train), len(test))
        assert set(support_sizes(part, train)) == {2}
    assert successes >= 1


def test_ls_constant_sizes_mnist_shape(mnist_shaped, rng):
    train, test = mnist_shaped
    part = partition_label_skew(train, test, 10, 1.0, rng)
    check_partition(part, len(train), len(test))
    sizes = part.train_sizes()
    assert np.all(np.abs(sizes - 6000) <= 10)
    hist = part.label_histograms(train)
    assert hist.sum(axis=0).tolist() == [6000] * 10


def test_ls_unequal_class_counts_still_constant():
    # MNIST train class counts
    counts = [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]
    train = labels_dataset(counts)
    test = labels_dataset([980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009])
    part = partition_label_skew(train, test, 10, 1.0, np.random.default_rng(1))
    check_partition(part, len(train), len(test))
    assert np.all(np.abs(part.train_sizes() - 6000) <= 10)


def test_ls_large_alpha_near_uniform(small_split, rng):
    train, test = small_split
    part = partition_label_skew(train, test, 10, 1e6, rng)
    hist = part.label_histograms(train)
    assert hist.max() / hist.min() < 1.2


def test_qs_sizes(mnist_shaped, rng):
    train, test = mnist_shaped
    part = partition_quantity_skew(train, test, 10, 1.0, rng)
    check_partition(part, len(train), len(test))
    sizes = part.train_sizes()
    assert sizes.sum() == len(train)
    assert sizes.min() >= 10
    hist = part.label_histograms(train)
    assert np.all(hist.max(axis=1) - hist.min(axis=1) <= 1)
    q = np.asarray(part.meta["quantities"])
    assert np.all(np.abs(sizes - q * len(train)) <= 10 + 1)


def test_qs_large_alpha(mnist_shaped, rng):
    train, test = mnist_shaped
    sizes = partition_quantity_skew(train, test, 10, 1e6, rng).train_sizes()
    assert np.all(np.abs(sizes - 6000) <= 0.05 * 6000)


def test_qs_small_alpha_enforces_minimum(small_split):
    train, test = small_split
    part = partition_quantity_skew(train, test, 10, 0.05, np.random.default_rng(4))
    check_partition(part, len(train), len(test))
    assert part.train_sizes().min() >= train.num_classes
    assert part.test_sizes().min() >= 1


def test_lsqs_cover_and_totals(mnist_shaped, rng):
    train, test = mnist_shaped
    part = partition_lsqs(train, test, 10, 1.0, 1.0, rng)
    check_partition(part, len(train), len(test))
    target = np.asarray(part.meta["target_sizes"])
    assert np.all(np.abs(part.train_sizes() - target) <= 10)
    assert part.train_sizes().sum() == len(train)


def test_lsqs_large_alphas_approach_iid(mnist_shaped, rng):
    train, test = mnist_shaped
    lsqs = partition_lsqs(train, test, 10, 1e6, 1e6, rng).label_histograms(train)
    iid = partition_iid(train, test, 10, rng).label_histograms(train)
    assert np.abs(lsqs - iid).max() <= 0.05 * iid.mean()


@pytest.mark.parametrize("env", ["IID", "PATH", "LS", "QS", "LSQS"])
def test_constructors_deterministic(env, small_split):
    train, test = small_split
    a = build_partition(env, train, test, 10, np.random.default_rng(9), alpha_label=0.5, alpha_quantity=0.5)
    b = build_partition(env, train, test, 10, np.random.default_rng(9), alpha_label=0.5, alpha_quantity=0.5)
    assert a.same_assignment(b)


def test_partition_json_round_trip(small_split, tmp_path):
    train, test = small_split
    part = build_partition("LSQS", train, test, 10, np.random.default_rng(2), 1.0, 1.0)
    part.seed = 2
    part.save(tmp_path / "p.json")
    back = Partition.load(tmp_path / "p.json")
    assert back.same_assignment(part)
    assert (back.environment, back.alpha_label, back.alpha_quantity, back.seed) == ("LSQS", 1.0, 1.0, 2)
    doc = json.loads((tmp_path / "p.json").read_text())
    assert doc["schema"] == "fliu.partition/1"


def test_unknown_environment(small_split, rng):
    with pytest.raises(PartitionError):
        build_partition("FEATURE", *small_split, 10, rng)
