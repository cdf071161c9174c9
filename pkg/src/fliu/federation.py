"""
Synchronous federated training rounds for CLT, FedAvg and FLIU.

A round trains every client locally (stage L2), averages the client models
on the server (stage G) and then hands each client the interpolation
``gamma * own + (1 - gamma) * global`` (stage L1). FedAvg is the gamma = 0
case and runs through exactly the same code. CLT skips the server entirely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import LabeledDataset
from .metrics import DEFAULT_EPSILONS, RoundRecord, evaluate_stage
from .model import (
    ModelSpec,
    OptimizerState,
    decay_learning_rate,
    load_params,
    save_params,
    train_epochs,
)
from .partition import Partition


class FederationError(ValueError):
    pass


@dataclass(frozen=True)
class Strategy:
    kind: str  # "clt" | "fliu_fixed" | "fliu_adaptive"
    gamma: float | None = None
    aggregation: str = "uniform"  # "uniform" | "sample_weighted"
    label: str | None = None

    def __post_init__(self):
        if self.kind not in ("clt", "fliu_fixed", "fliu_adaptive"):
            raise FederationError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "fliu_fixed" and (self.gamma is None or not 0.0 <= self.gamma <= 1.0):
            raise FederationError("fixed gamma must lie in [0, 1]")
        if self.aggregation not in ("uniform", "sample_weighted"):
            raise FederationError(f"unknown aggregation mode {self.aggregation!r}")

    @classmethod
    def clt(cls, **kw) -> "Strategy":
        return cls("clt", label=kw.pop("label", "clt"), **kw)

    @classmethod
    def fedavg(cls, **kw) -> "Strategy":
        return cls("fliu_fixed", 0.0, label=kw.pop("label", "fedavg"), **kw)

    @classmethod
    def fliu_fixed(cls, gamma: float, **kw) -> "Strategy":
        return cls("fliu_fixed", float(gamma), label=kw.pop("label", f"fliu_fixed_{gamma:g}"), **kw)

    @classmethod
    def fliu_adaptive(cls, **kw) -> "Strategy":
        return cls("fliu_adaptive", label=kw.pop("label", "fliu_adaptive"), **kw)

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        return self.kind if self.gamma is None else f"{self.kind}_{self.gamma:g}"

    def gamma_for(self, n_k: int, n: int, K: int) -> float:
        if self.kind == "clt":
            return 1.0
        if self.kind == "fliu_fixed":
            return float(self.gamma)
        return gamma_adaptive(n_k, n, K)


def gamma_adaptive(n_k: int, n: int, K: int) -> float:
    """Personalization factor from the client's share of the data, thresholds strict."""
    if K < 1 or not 0 < n_k <= n:
        raise FederationError(f"invalid counts n_k={n_k}, n={n}, K={K}")
    # n_k > c*n/K  <=>  n_k*K > c*n, compared in integers to avoid rounding at the edges
    if 2 * n_k * K > 20 * n:
        return 0.9
    if 2 * n_k * K > 10 * n:
        return 0.75
    if 2 * n_k * K > 2 * n:
        return 0.5
    if 2 * n_k * K > n:
        return 0.25
    return 0.1


def individualized_update(theta_k: np.ndarray, global_params: np.ndarray, gamma: float) -> np.ndarray:
    if theta_k.shape != global_params.shape:
        raise FederationError("client and global parameter vectors differ in length")
    if not 0.0 <= gamma <= 1.0:
        raise FederationError("gamma must lie in [0, 1]")
    # endpoints return the operand itself so FedAvg/CLT equivalence is bit-exact
    if gamma == 0.0:
        return global_params
    if gamma == 1.0:
        return theta_k
    # written as a correction to the global vector so theta_k == global stays exact
    return global_params + gamma * (theta_k - global_params)


def _stack(client_params: Sequence[np.ndarray]) -> np.ndarray:
    if len(client_params) == 0:
        raise FederationError("nothing to aggregate")
    shape = client_params[0].shape
    if any(p.shape != shape for p in client_params):
        raise FederationError("client parameter vectors differ in length")
    return shape


def aggregate_uniform(client_params: Sequence[np.ndarray]) -> np.ndarray:
    _stack(client_params)
    # sequential sum in client-id order keeps the result scheduling independent
    total = np.zeros_like(client_params[0])
    for p in client_params:
        total += p
    return total / len(client_params)


def aggregate_weighted(client_params: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    _stack(client_params)
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(client_params) or np.any(weights < 0) or weights.sum() <= 0:
        raise FederationError("need one nonnegative weight per client with positive total")
    n = weights.sum()
    total = np.zeros_like(client_params[0])
    for p, w in zip(client_params, weights):
        if w:
            total += (w / n) * p
    return total


@dataclass(frozen=True)
class ClientState:
    id: int
    train_indices: np.ndarray
    test_indices: np.ndarray
    params: np.ndarray
    optimizer: OptimizerState
    gamma: float
    shuffle_seed: int

    @property
    def n_k(self) -> int:
        return len(self.train_indices)

    def rng_for_round(self, round_index: int) -> np.random.Generator:
        return np.random.default_rng([self.shuffle_seed, round_index])


@dataclass(frozen=True)
class ServerState:
    global_params: np.ndarray
    round: int = 0


@dataclass(frozen=True)
class RoundHyper:
    local_epochs: int = 5
    batch_size: int = 50
    lr_decay: float = 0.99
    epsilons: tuple[float, ...] = DEFAULT_EPSILONS
    reset_optimizer_on_update: bool = False
    clt_pseudo_global: bool = False


@dataclass(frozen=True)
class FederatedData:
    spec: ModelSpec
    train: LabeledDataset
    test: LabeledDataset


def init_clients(
    partition: Partition,
    theta0: np.ndarray,
    strategy: Strategy,
    learning_rate: float,
    shuffle_seeds: Sequence[int],
) -> list[ClientState]:
    """Every client starts from the same initial model with a fresh optimizer."""
    sizes = partition.train_sizes()
    n, K = int(sizes.sum()), partition.num_clients
    return [
        ClientState(
            id=k,
            train_indices=partition.train[k],
            test_indices=partition.test[k],
            params=theta0,
            optimizer=OptimizerState.fresh(len(theta0), learning_rate),
            gamma=strategy.gamma_for(int(sizes[k]), n, K),
            shuffle_seed=int(shuffle_seeds[k]),
        )
        for k in range(K)
    ]


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    strategy: Strategy,
    hyper: RoundHyper,
    data: FederatedData,
) -> tuple[ServerState, list[ClientState], RoundRecord]:
    t = server.round + 1
    test_sets = [c.test_indices for c in clients]

    trained = []
    for c in clients:
        params, opt = train_epochs(
            data.spec, c.params, c.optimizer, data.train, c.train_indices,
            hyper.local_epochs, hyper.batch_size, c.rng_for_round(t),
        )
        trained.append(replace(c, params=params, optimizer=opt))

    l2 = evaluate_stage("L2", [c.params for c in trained], test_sets, data.test, data.spec, hyper.epsilons)
    snapshots = {"L2": l2}

    if strategy.kind == "clt":
        updated = trained
        snapshots["L1"] = l2.relabel("L1")
        global_params = server.global_params
        if hyper.clt_pseudo_global:
            global_params = aggregate_uniform([c.params for c in trained])
            snapshots["G"] = evaluate_stage("G", global_params, test_sets, data.test, data.spec, hyper.epsilons)
    else:
        if strategy.aggregation == "uniform":
            global_params = aggregate_uniform([c.params for c in trained])
        else:
            global_params = aggregate_weighted([c.params for c in trained], [c.n_k for c in trained])
        snapshots["G"] = evaluate_stage("G", global_params, test_sets, data.test, data.spec, hyper.epsilons)
        updated = []
        for c in trained:
            new_params = individualized_update(c.params, global_params, c.gamma)
            opt = c.optimizer
            if hyper.reset_optimizer_on_update and new_params is not c.params:
                opt = opt.reset_moments()
            updated.append(replace(c, params=new_params, optimizer=opt))
        snapshots["L1"] = evaluate_stage(
            "L1", [c.params for c in updated], test_sets, data.test, data.spec, hyper.epsilons
        )

    updated = [replace(c, optimizer=decay_learning_rate(c.optimizer, hyper.lr_decay)) for c in updated]
    return ServerState(global_params, t), updated, RoundRecord(t, snapshots)


def run_training(
    server: ServerState,
    clients: Sequence[ClientState],
    strategy: Strategy,
    hyper: RoundHyper,
    data: FederatedData,
    rounds: int,
) -> tuple[ServerState, list[ClientState], list[RoundRecord]]:
    if rounds < 0:
        raise FederationError("rounds must be >= 0")
    clients = list(clients)
    records = []
    for _ in range(rounds):
        server, clients, record = run_round(server, clients, strategy, hyper, data)
        records.append(record)
    return server, clients, records


# Checkpoint directory layout:
#   state.json            round, strategy, per-client optimizer scalars and index sets
#   server.bin            global parameter blob
#   client_<k>.bin        client parameters
#   client_<k>_m1.bin     Adam first moment
#   client_<k>_m2.bin     Adam second moment
# All .bin files use the parameter blob format from fliu.model.


def save_checkpoint(path, spec: ModelSpec, server: ServerState, clients: Sequence[ClientState], strategy: Strategy) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    save_params(root / "server.bin", spec, server.global_params)
    entries = []
    for c in clients:
        save_params(root / f"client_{c.id}.bin", spec, c.params)
        save_params(root / f"client_{c.id}_m1.bin", spec, c.optimizer.first_moment)
        save_params(root / f"client_{c.id}_m2.bin", spec, c.optimizer.second_moment)
        o = c.optimizer
        entries.append(
            {
                "id": c.id,
                "gamma": c.gamma,
                "shuffle_seed": c.shuffle_seed,
                "learning_rate": o.learning_rate,
                "step_count": o.step_count,
                "beta1": o.beta1,
                "beta2": o.beta2,
                "epsilon": o.epsilon,
                "train_indices": c.train_indices.tolist(),
                "test_indices": c.test_indices.tolist(),
            }
        )
    state = {
        "round": server.round,
        "strategy": {"kind": strategy.kind, "gamma": strategy.gamma,
                     "aggregation": strategy.aggregation, "label": strategy.label},
        "model": {"architecture": spec.architecture, "input_dim": spec.input_dim,
                  "hidden_sizes": list(spec.hidden_sizes), "num_classes": spec.num_classes},
        "clients": entries,
    }
    (root / "state.json").write_text(json.dumps(state))


def load_checkpoint(path) -> tuple[ModelSpec, ServerState, list[ClientState], Strategy]:
    root = Path(path)
    state = json.loads((root / "state.json").read_text())
    spec = ModelSpec(**state["model"])
    server = ServerState(load_params(root / "server.bin", spec), state["round"])
    clients = []
    for e in state["clients"]:
        k = e["id"]
        opt = OptimizerState(
            load_params(root / f"client_{k}_m1.bin", spec),
            load_params(root / f"client_{k}_m2.bin", spec),
            e["learning_rate"], e["step_count"], e["beta1"], e["beta2"], e["epsilon"],
        )
        clients.append(
            ClientState(
                k,
                np.asarray(e["train_indices"], dtype=np.int64),
                np.asarray(e["test_indices"], dtype=np.int64),
                load_params(root / f"client_{k}.bin", spec),
                opt,
                e["gamma"],
                e["shuffle_seed"],
            )
        )
    return spec, server, clients, Strategy(**state["strategy"])
