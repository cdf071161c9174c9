"""
Client data environments: IID, pathological two-class (PATH), Dirichlet
label skew (LS), quantity skew (QS) and the combination (LSQS).

Every constructor returns a :class:`Partition` whose train and test index
sets are disjoint and together cover the respective dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import LabeledDataset

ENVIRONMENTS = ("IID", "PATH", "LS", "QS", "LSQS")

DIRICHLET_FLOOR = 1e-9
SINKHORN_TOL = 1e-8
SINKHORN_MAX_ITER = 10_000
PATH_RETRIES = 1000
PARTITION_SCHEMA = "fliu.partition/1"


class PartitionError(ValueError):
    pass


class SinkhornConvergenceError(PartitionError):
    def __init__(self, message: str, result: "DistributionMatrix"):
        super().__init__(message)
        self.result = result


class RetryBudgetExhausted(PartitionError):
    pass


@dataclass(frozen=True)
class DistributionMatrix:
    entries: np.ndarray  # K x L, nonnegative
    row_target: np.ndarray  # length K
    col_target: np.ndarray  # length L
    tolerance: float
    deviation: float
    iterations: int

    def row_sums(self) -> np.ndarray:
        return self.entries.sum(axis=1)

    def col_sums(self) -> np.ndarray:
        return self.entries.sum(axis=0)


@dataclass
class Partition:
    train: list[np.ndarray]
    test: list[np.ndarray]
    environment: str
    alpha_label: float | None = None
    alpha_quantity: float | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.train)

    def train_sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.train], dtype=np.int64)

    def test_sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.test], dtype=np.int64)

    def label_histograms(self, dataset: LabeledDataset, side: str = "train") -> np.ndarray:
        sets = self.train if side == "train" else self.test
        return np.stack([np.bincount(dataset.labels[ix], minlength=dataset.num_classes) for ix in sets])

    def to_dict(self) -> dict:
        return {
            "schema": PARTITION_SCHEMA,
            "environment": self.environment,
            "num_clients": self.num_clients,
            "alpha_label": self.alpha_label,
            "alpha_quantity": self.alpha_quantity,
            "seed": self.seed,
            "meta": self.meta,
            "train": [ix.tolist() for ix in self.train],
            "test": [ix.tolist() for ix in self.test],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Partition":
        if doc.get("schema") != PARTITION_SCHEMA:
            raise PartitionError(f"unsupported partition schema {doc.get('schema')!r}")
        return cls(
            train=[np.asarray(ix, dtype=np.int64) for ix in doc["train"]],
            test=[np.asarray(ix, dtype=np.int64) for ix in doc["test"]],
            environment=doc["environment"],
            alpha_label=doc.get("alpha_label"),
            alpha_quantity=doc.get("alpha_quantity"),
            seed=doc.get("seed"),
            meta=doc.get("meta", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")))

    @classmethod
    def load(cls, path) -> "Partition":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def same_assignment(self, other: "Partition") -> bool:
        if self.num_clients != other.num_clients:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.train, other.train)) and all(
            np.array_equal(a, b) for a, b in zip(self.test, other.test)
        )


def sample_dirichlet(alpha, rng: np.random.Generator) -> np.ndarray:
    """Draw from Dir(alpha), strictly positive even for tiny concentrations.

    Gamma variates are drawn in log space (Gamma(a) = Gamma(a+1) * U**(1/a))
    so that small alphas do not underflow to exact zeros.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or len(alpha) == 0:
        raise PartitionError("alpha must be a non-empty vector")
    if not np.all(alpha > 0):
        raise PartitionError("Dirichlet concentrations must be positive")
    log_g = np.log(rng.standard_gamma(alpha + 1.0)) + np.log(rng.uniform(size=len(alpha))) / alpha
    w = np.exp(log_g - log_g.max())
    w = np.maximum(w, np.finfo(np.float64).tiny)
    return w / w.sum()


def _as_target(value, size: int, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(size, float(arr))
    if arr.shape != (size,):
        raise PartitionError(f"{what} target has shape {arr.shape}, expected ({size},)")
    return arr


def sinkhorn_knopp(
    matrix,
    row_target,
    col_target,
    tol: float = SINKHORN_TOL,
    max_iter: int = SINKHORN_MAX_ITER,
) -> DistributionMatrix:
    """Alternately rescale rows and columns until both marginals match.

    Targets may be scalars (every row/column the same) or vectors. One sweep
    is a row scaling followed by a column scaling, so after any sweep the
    column sums are exact up to rounding and the reported deviation is the
    larger of the row and column errors.
    """
    m = np.array(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise PartitionError("matrix must be 2-D")
    if not np.all(m > 0):
        raise PartitionError("Sinkhorn-Knopp requires a strictly positive matrix")
    K, L = m.shape
    rows = _as_target(row_target, K, "row")
    cols = _as_target(col_target, L, "column")
    if abs(rows.sum() - cols.sum()) > 1e-9 * max(1.0, cols.sum()):
        raise PartitionError(
            f"inconsistent targets: rows total {rows.sum()!r}, columns total {cols.sum()!r}"
        )

    deviation = np.inf
    it = 0
    while it < max_iter:
        it += 1
        m *= (rows / m.sum(axis=1))[:, None]
        m *= (cols / m.sum(axis=0))[None, :]
        deviation = max(
            np.abs(m.sum(axis=1) - rows).max(),
            np.abs(m.sum(axis=0) - cols).max(),
        )
        if deviation < tol:
            break
    result = DistributionMatrix(m, rows, cols, tol, float(deviation), it)
    if not deviation < tol:
        raise SinkhornConvergenceError(
            f"Sinkhorn-Knopp reached deviation {deviation:.3e} after {it} iterations (tol {tol:.1e})",
            result,
        )
    return result


def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of ``total`` following ``shares``; ties go to lower index."""
    exact = shares / shares.sum() * total
    counts = np.floor(exact).astype(np.int64)
    frac = exact - counts
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-frac, kind="stable")
        counts[order[:short]] += 1
    elif short < 0:
        order = [i for i in np.argsort(frac, kind="stable") if counts[i] > 0]
        counts[order[: -short]] -= 1
    return counts


def _find_move(counts: np.ndarray, exact: np.ndarray, dev: np.ndarray):
    for a in np.argsort(-dev, kind="stable"):
        for b in np.argsort(dev, kind="stable"):
            if dev[a] - dev[b] <= 1.0 + 1e-9:
                break
            cols = np.flatnonzero((counts[a] > exact[a]) & (counts[b] < exact[b]))
            if len(cols):
                return a, b, cols[0]
    return None


def _rebalance_rows(counts: np.ndarray, exact: np.ndarray, row_totals: np.ndarray) -> None:
    """Move single units between rows, inside a column, to pull row sums to targets.

    A unit only moves from a cell that was rounded up to one that was rounded
    down, so every cell stays within one of its exact value and column sums
    are untouched. Each move strictly lowers the squared row error.
    """
    for _ in range(int(counts.sum()) + 1):
        move = _find_move(counts, exact, counts.sum(axis=1) - row_totals)
        if move is None:
            return
        a, b, j = move
        counts[a, j] -= 1
        counts[b, j] += 1


def allocate_counts(fitted, class_counts, row_totals=None) -> np.ndarray:
    """Turn a column-stochastic K x L matrix into integer per-client class counts.

    Each column is apportioned by largest remainder (ties to the lower client
    id), so column ``j`` sums exactly to ``class_counts[j]`` and every cell is
    within one of ``fitted[k, j] * class_counts[j]``. If ``row_totals`` is
    given, units are then shifted between rounded-up and rounded-down cells to
    bring per-client totals as close to those targets as that bound allows.
    """
    entries = fitted.entries if isinstance(fitted, DistributionMatrix) else np.asarray(fitted, dtype=np.float64)
    class_counts = np.asarray(class_counts, dtype=np.int64)
    K, L = entries.shape
    if class_counts.shape != (L,):
        raise PartitionError(f"expected {L} class counts, got {class_counts.shape}")
    col_sums = entries.sum(axis=0)
    if np.any(col_sums <= 0):
        raise PartitionError("every column of the fitted matrix needs positive mass")
    stochastic = entries / col_sums
    counts = np.zeros((K, L), dtype=np.int64)
    for j in range(L):
        counts[:, j] = _largest_remainder(stochastic[:, j], int(class_counts[j]))
    if row_totals is not None:
        _rebalance_rows(counts, stochastic * class_counts, np.asarray(row_totals, dtype=np.float64))
    return counts


def _fill_empty_rows(counts: np.ndarray, weights: np.ndarray) -> None:
    """Give every all-zero row one sample, taken from the largest holder of its heaviest class."""
    for k in np.flatnonzero(counts.sum(axis=1) == 0):
        for j in np.argsort(-weights[k], kind="stable"):
            donors = np.flatnonzero((counts[:, j] > 1) | ((counts[:, j] == 1) & (counts.sum(axis=1) > 1)))
            if len(donors):
                donor = donors[np.argmax(counts[donors, j])]
                counts[donor, j] -= 1
                counts[k, j] += 1
                break


def _assign_by_counts(labels: np.ndarray, counts: np.ndarray, rng: np.random.Generator) -> list[np.ndarray]:
    K, L = counts.shape
    parts: list[list[np.ndarray]] = [[] for _ in range(K)]
    for j in range(L):
        idx = rng.permutation(np.flatnonzero(labels == j))
        bounds = np.concatenate([[0], np.cumsum(counts[:, j])])
        for k in range(K):
            parts[k].append(idx[bounds[k] : bounds[k + 1]])
    return [np.sort(np.concatenate(p)).astype(np.int64) for p in parts]


def _require_classes(ds: LabeledDataset, minimum: int = 1) -> np.ndarray:
    counts = ds.class_counts()
    if counts.min() < minimum:
        raise PartitionError(
            f"{ds.name}: class {int(np.argmin(counts))} has {counts.min()} samples, need >= {minimum}"
        )
    return counts


def _check_alpha(alpha, name="alpha") -> float:
    if alpha is None or not alpha > 0:
        raise PartitionError(f"{name} must be positive")
    return float(alpha)


def _balanced_split(labels: np.ndarray, K: int, L: int, rng: np.random.Generator) -> list[np.ndarray]:
    # remainders rotate across clients so per-client totals also differ by <= 1
    parts: list[list[np.ndarray]] = [[] for _ in range(K)]
    offset = 0
    for j in range(L):
        idx = rng.permutation(np.flatnonzero(labels == j))
        chunks = np.array_split(idx, K)
        for i, chunk in enumerate(chunks):
            parts[(i + offset) % K].append(chunk)
        offset += len(idx) % K
    return [np.sort(np.concatenate(p)).astype(np.int64) for p in parts]


def partition_iid(train: LabeledDataset, test: LabeledDataset, K: int, rng: np.random.Generator) -> Partition:
    if K < 1:
        raise PartitionError("K must be >= 1")
    _require_classes(train, K)
    _require_classes(test, K)
    L = train.num_classes
    return Partition(
        _balanced_split(train.labels, K, L, rng),
        _balanced_split(test.labels, K, L, rng),
        "IID",
    )


def _draw_covering_pairs(K: int, L: int, per_client: int, rng: np.random.Generator) -> np.ndarray:
    for _ in range(PATH_RETRIES):
        choice = np.stack([rng.choice(L, size=per_client, replace=False) for _ in range(K)])
        if len(np.unique(choice)) == L:
            return np.sort(choice, axis=1)
    raise RetryBudgetExhausted(
        f"no class assignment covering all {L} classes with {K} clients x {per_client} classes "
        f"after {PATH_RETRIES} draws"
    )


def _split_among_holders(labels: np.ndarray, holders: list[list[int]], K: int, rng: np.random.Generator) -> list[np.ndarray]:
    parts: list[list[np.ndarray]] = [[] for _ in range(K)]
    for j, owners in enumerate(holders):
        idx = rng.permutation(np.flatnonzero(labels == j))
        for owner, chunk in zip(owners, np.array_split(idx, len(owners))):
            parts[owner].append(chunk)
    return [np.sort(np.concatenate(p)).astype(np.int64) if p else np.zeros(0, np.int64) for p in parts]


def partition_pathological(
    train: LabeledDataset, test: LabeledDataset, K: int, rng: np.random.Generator, classes_per_client: int = 2
) -> Partition:
    """Each client holds exactly two classes; each class is split evenly among its holders."""
    L = train.num_classes
    if K < 1:
        raise PartitionError("K must be >= 1")
    if L < 2:
        raise PartitionError("pathological partition needs at least two classes")
    per_client = min(classes_per_client, L)
    pairs = _draw_covering_pairs(K, L, per_client, rng)
    holders = [[k for k in range(K) if j in pairs[k]] for j in range(L)]
    n_holders = np.array([len(h) for h in holders])
    _require_classes(train, int(n_holders.max()))
    test_counts = test.class_counts()
    if np.any(test_counts < n_holders):
        raise PartitionError(f"{test.name}: too few test samples per class for the holder count")
    part = Partition(
        _split_among_holders(train.labels, holders, K, rng),
        _split_among_holders(test.labels, holders, K, rng),
        "PATH",
    )
    part.meta["classes"] = pairs.tolist()
    return part


def _fit_label_matrix(P: np.ndarray, class_counts: np.ndarray, row_samples: np.ndarray) -> DistributionMatrix:
    """Fit Dirichlet rows so per-client sample totals follow ``row_samples``.

    Columns are weighted by relative class size (mean weight 1); with balanced
    classes this is exactly fitting column sums 1 and row sums L * n_k / n.
    The returned matrix is column-stochastic.
    """
    K, L = P.shape
    n = class_counts.sum()
    w = class_counts * L / n
    fitted = sinkhorn_knopp(np.maximum(P, DIRICHLET_FLOOR) * w, row_samples * L / n, w)
    return DistributionMatrix(
        fitted.entries / w,
        fitted.row_target,
        fitted.col_target / w,
        fitted.tolerance,
        fitted.deviation,
        fitted.iterations,
    )


def _label_skew(
    train: LabeledDataset,
    test: LabeledDataset,
    K: int,
    alpha: float,
    quantities: np.ndarray,
    rng: np.random.Generator,
) -> tuple[list[np.ndarray], list[np.ndarray], DistributionMatrix]:
    L = train.num_classes
    train_counts = _require_classes(train)
    test_counts = _require_classes(test)
    P = np.stack([sample_dirichlet(np.full(L, alpha), rng) for _ in range(K)])
    row_samples = quantities / quantities.sum() * train_counts.sum()
    fitted = _fit_label_matrix(P, train_counts, row_samples)
    train_alloc = allocate_counts(fitted, train_counts, row_totals=row_samples)
    test_alloc = allocate_counts(fitted, test_counts, row_totals=quantities / quantities.sum() * test_counts.sum())
    _fill_empty_rows(train_alloc, fitted.entries)
    _fill_empty_rows(test_alloc, fitted.entries)
    return (
        _assign_by_counts(train.labels, train_alloc, rng),
        _assign_by_counts(test.labels, test_alloc, rng),
        fitted,
    )


def partition_label_skew(
    train: LabeledDataset, test: LabeledDataset, K: int, alpha: float, rng: np.random.Generator
) -> Partition:
    """LS: Dirichlet class mix per client, equal client sizes."""
    alpha = _check_alpha(alpha)
    if K < 2:
        raise PartitionError("label skew needs K >= 2")
    tr, te, fitted = _label_skew(train, test, K, alpha, np.ones(K), rng)
    part = Partition(tr, te, "LS", alpha_label=alpha)
    part.meta["sinkhorn_deviation"] = fitted.deviation
    return part


def _quantity_draw(n: int, K: int, alpha: float, minimum: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    q = sample_dirichlet(np.full(K, alpha), rng)
    sizes = _largest_remainder(q, n)
    if K * minimum > n:
        raise PartitionError(f"cannot give {K} clients at least {minimum} of {n} samples")
    while sizes.min() < minimum:
        sizes[np.argmax(sizes)] -= 1
        sizes[np.argmin(sizes)] += 1
    return q, sizes


def _scaled_sizes(sizes: np.ndarray, total: int, minimum: int) -> np.ndarray:
    out = _largest_remainder(sizes.astype(np.float64), total)
    while out.min() < minimum:
        out[np.argmax(out)] -= 1
        out[np.argmin(out)] += 1
    return out


def partition_quantity_skew(
    train: LabeledDataset, test: LabeledDataset, K: int, alpha: float, rng: np.random.Generator
) -> Partition:
    """QS: Dirichlet client sizes with a balanced class mix inside every client."""
    alpha = _check_alpha(alpha)
    if K < 2:
        raise PartitionError("quantity skew needs K >= 2")
    L = train.num_classes
    train_counts = _require_classes(train)
    test_counts = _require_classes(test)
    q, sizes = _quantity_draw(len(train), K, alpha, L, rng)
    test_sizes = _scaled_sizes(sizes, len(test), min(L, len(test) // K))

    def alloc(sizes_, class_counts):
        shares = np.repeat((sizes_ / sizes_.sum())[:, None], L, axis=1)
        return allocate_counts(shares, class_counts, row_totals=sizes_)

    train_alloc = alloc(sizes, train_counts)
    test_alloc = alloc(test_sizes, test_counts)
    _fill_empty_rows(test_alloc, np.ones((K, L)))
    part = Partition(
        _assign_by_counts(train.labels, train_alloc, rng),
        _assign_by_counts(test.labels, test_alloc, rng),
        "QS",
        alpha_quantity=alpha,
    )
    part.meta["quantities"] = q.tolist()
    return part


def partition_lsqs(
    train: LabeledDataset,
    test: LabeledDataset,
    K: int,
    alpha_label: float,
    alpha_quantity: float,
    rng: np.random.Generator,
) -> Partition:
    """LSQS: Dirichlet client sizes and Dirichlet class mixes at once."""
    alpha_label = _check_alpha(alpha_label, "alpha_label")
    alpha_quantity = _check_alpha(alpha_quantity, "alpha_quantity")
    if K < 2:
        raise PartitionError("label/quantity skew needs K >= 2")
    L = train.num_classes
    q, sizes = _quantity_draw(len(train), K, alpha_quantity, L, rng)
    tr, te, fitted = _label_skew(train, test, K, alpha_label, sizes.astype(np.float64), rng)
    part = Partition(tr, te, "LSQS", alpha_label=alpha_label, alpha_quantity=alpha_quantity)
    part.meta["quantities"] = q.tolist()
    part.meta["target_sizes"] = sizes.tolist()
    part.meta["sinkhorn_deviation"] = fitted.deviation
    return part


def build_partition(
    environment: str,
    train: LabeledDataset,
    test: LabeledDataset,
    K: int,
    rng: np.random.Generator,
    alpha_label: float | None = None,
    alpha_quantity: float | None = None,
) -> Partition:
    env = environment.upper()
    if env == "IID":
        return partition_iid(train, test, K, rng)
    if env == "PATH":
        return partition_pathological(train, test, K, rng)
    if env == "LS":
        return partition_label_skew(train, test, K, alpha_label, rng)
    if env == "QS":
        return partition_quantity_skew(train, test, K, alpha_quantity, rng)
    if env == "LSQS":
        return partition_lsqs(train, test, K, alpha_label, alpha_quantity, rng)
    raise PartitionError(f"unknown environment {environment!r}; expected one of {ENVIRONMENTS}")


def check_partition(part: Partition, n_train: int, n_test: int) -> None:
    """Raise if the assignment is not a disjoint cover of both datasets."""
    for side, sets, n in (("train", part.train, n_train), ("test", part.test, n_test)):
        merged = np.concatenate(sets) if sets else np.zeros(0, np.int64)
        if len(merged) != n or not np.array_equal(np.sort(merged), np.arange(n)):
            raise PartitionError(f"{side} assignment is not a disjoint cover of {n} indices")
    if any(len(ix) == 0 for ix in part.train):
        raise PartitionError("a client has no training samples")


def support_sizes(part: Partition, dataset: LabeledDataset, side: str = "train") -> Sequence[int]:
    hist = part.label_histograms(dataset, side)
    return [int((row > 0).sum()) for row in hist]
