"""
Stage-wise evaluation of local performance Acc(L), out-of-distribution
generalization Acc(G), their sum, and the threshold count rho.

Accuracies are fractions in [0, 1]; emitters scale them to percent.
Means over clients are unweighted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import LabeledDataset
from .model import ModelSpec, predict

STAGES = ("G", "L1", "L2")
DEFAULT_EPSILONS = (0.85, 0.90, 0.95)


class MetricsError(ValueError):
    pass


def rho_key(epsilon: float) -> str:
    return f"rho_{epsilon:g}"


def rho(per_client_local: Sequence[float], epsilon: float) -> int:
    """Number of clients whose local accuracy is strictly above ``epsilon``."""
    if not 0.0 <= epsilon <= 1.0:
        raise MetricsError("epsilon must lie in [0, 1]")
    return int(sum(1 for a in per_client_local if a > epsilon))


def client_mean(values: Sequence[float]) -> float:
    """Unweighted mean; returns the shared value bit-exactly when all entries agree."""
    values = list(values)
    if not values:
        raise MetricsError("mean of no clients")
    if all(v == values[0] for v in values):
        return float(values[0])
    return math.fsum(values) / len(values)


def _union(test_sets: Sequence[np.ndarray]) -> np.ndarray:
    if any(len(ix) == 0 for ix in test_sets):
        raise MetricsError("every client needs a nonempty test set")
    return np.sort(np.concatenate(test_sets))


def _correct_on(spec: ModelSpec, params: np.ndarray, test: LabeledDataset, union: np.ndarray) -> np.ndarray:
    """Boolean hit vector over the whole test set (False outside ``union``)."""
    hits = np.zeros(len(test), dtype=bool)
    hits[union] = predict(spec, params, test.features[union]) == test.labels[union]
    return hits


def _client_accuracies(models, test_sets, test, spec):
    union = _union(test_sets)
    local, general = [], []
    cache: dict[int, np.ndarray] = {}
    for params, ix in zip(models, test_sets):
        # identical model objects (FedAvg at L1) are scored once
        hits = cache.get(id(params))
        if hits is None:
            hits = cache[id(params)] = _correct_on(spec, params, test, union)
        local.append(float(hits[ix].mean()))
        general.append(float(hits[union].mean()))
    return local, general


def local_accuracy(models, test_sets, test: LabeledDataset, spec: ModelSpec) -> tuple[list[float], float]:
    """Client k's model scored on client k's own test indices."""
    local, _ = _client_accuracies(models, test_sets, test, spec)
    return local, client_mean(local)


def generalization_accuracy(models, test_sets, test: LabeledDataset, spec: ModelSpec) -> tuple[list[float], float]:
    """Client k's model scored on the union of all clients' test indices."""
    _, general = _client_accuracies(models, test_sets, test, spec)
    return general, client_mean(general)


@dataclass(frozen=True)
class StageSnapshot:
    stage: str
    per_client_local: tuple[float, ...] | None = None
    per_client_global: tuple[float, ...] | None = None
    global_model_global: float | None = None
    epsilons: tuple[float, ...] = DEFAULT_EPSILONS

    def metrics(self) -> dict[str, float]:
        """Derived scalars for this stage, keyed by metric name."""
        if self.stage == "G":
            return {"acc_global": float(self.global_model_global)}
        acc_l = client_mean(self.per_client_local)
        acc_g = client_mean(self.per_client_global)
        out = {"acc_local": acc_l, "acc_global": acc_g, "acc": acc_l + acc_g}
        for eps in self.epsilons:
            out[rho_key(eps)] = float(rho(self.per_client_local, eps))
        return out

    def relabel(self, stage: str) -> "StageSnapshot":
        return StageSnapshot(stage, self.per_client_local, self.per_client_global, self.global_model_global, self.epsilons)


def evaluate_stage(
    stage: str,
    models,
    test_sets: Sequence[np.ndarray],
    test: LabeledDataset,
    spec: ModelSpec,
    epsilons: Sequence[float] = DEFAULT_EPSILONS,
) -> StageSnapshot:
    """Score a stage. ``models`` is one global vector for G, else one vector per client."""
    epsilons = tuple(float(e) for e in epsilons)
    if stage == "G":
        if not isinstance(models, np.ndarray) or models.ndim != 1:
            raise MetricsError("stage G takes a single global parameter vector")
        union = _union(test_sets)
        hits = _correct_on(spec, models, test, union)
        return StageSnapshot("G", global_model_global=float(hits[union].mean()), epsilons=epsilons)
    if stage not in ("L1", "L2"):
        raise MetricsError(f"unknown stage {stage!r}")
    if len(models) != len(test_sets):
        raise MetricsError("need one model per client")
    local, general = _client_accuracies(models, test_sets, test, spec)
    return StageSnapshot(stage, tuple(local), tuple(general), epsilons=epsilons)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    snapshots: dict[str, StageSnapshot] = field(default_factory=dict)

    def metrics(self) -> dict[tuple[str, str], float]:
        out = {}
        for stage in STAGES:
            snap = self.snapshots.get(stage)
            if snap is not None:
                for name, value in snap.metrics().items():
                    out[(stage, name)] = value
        return out
