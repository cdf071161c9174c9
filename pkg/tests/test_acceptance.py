"""
Acceptance criteria 1-11. Each test appends one PASS/FAIL line that the
conftest hook prints at the end of the session.

Real MNIST is used when FLIU_MNIST_ROOT points at a directory with the four
IDX files; otherwise a full-size Gaussian surrogate (6000 train / 1000 test per
class, 10 classes) stands in.
"""

import os
import statistics

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from fliu.experiment import config_from_dict, emit_results, load_datasets, replay, run_experiment
from fliu.federation import (
    FederatedData,
    RoundHyper,
    ServerState,
    Strategy,
    gamma_adaptive,
    init_clients,
    run_training,
)
from fliu.metrics import rho
from fliu.model import ModelSpec, init_params, params_to_bytes
from fliu.partition import ENVIRONMENTS, build_partition, check_partition, sinkhorn_knopp, support_sizes
from test_model import fd_relative_error, random_triple
from test_partition import ipf_oracle

MNIST_ROOT = os.environ.get("FLIU_MNIST_ROOT")


def report(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def dataset_section(train_per_class=6000, test_per_class=1000, train_subset=None):
    if MNIST_ROOT:
        doc = {"name": "mnist", "root": MNIST_ROOT}
        if train_subset:
            doc["train_subset"] = train_subset
        return doc
    return {"name": "synthetic", "num_classes": 10, "dim": 20, "separation": 5.0,
            "train_per_class": train_per_class, "test_per_class": test_per_class, "seed": 0}


def base_config(environment, strategies, rounds, dataset):
    return config_from_dict({
        "dataset": dataset,
        "environment": environment,
        "clients": 10,
        "strategies": strategies,
        "model": {"architecture": "mlp", "hidden_sizes": [64]},
        "local_epochs": 5,
        "batch_size": 50,
        "rounds": rounds,
        "learning_rate": 0.01,
        "lr_decay": 0.99,
        "repetitions": 1,
        "seed": 0,
    })


@pytest.fixture(scope="module")
def path_run():
    cfg = base_config("PATH", ["clt", "fedavg", "fliu_adaptive"], 30, dataset_section())
    return run_experiment(cfg)


# 1 -------------------------------------------------------------------------

def _trajectory(strategy, data, part, theta0, rounds):
    """Client and server parameter bytes plus metrics after every round."""
    clients = init_clients(part, theta0, strategy, 0.01, [1000 + k for k in range(part.num_clients)])
    server = ServerState(theta0)
    out = []
    for _ in range(rounds):
        server, clients, recs = run_training(server, clients, strategy, RoundHyper(), data, 1)
        out.append((
            params_to_bytes(data.spec, server.global_params),
            [params_to_bytes(data.spec, c.params) for c in clients],
            {s: snap.metrics() for s, snap in recs[0].snapshots.items()},
        ))
    return out


def test_criterion_01_equivalence_oracles():
    train, test = load_datasets(config_from_dict(
        {"dataset": dataset_section(200, 50), "environment": "LS"}).dataset)
    part = build_partition("LS", train, test, 10, np.random.default_rng(7), alpha_label=0.5)
    spec = ModelSpec("mlp", train.dim, train.num_classes, (16,))
    data = FederatedData(spec, train, test)
    theta0 = init_params(spec, np.random.default_rng(3))

    fedavg = _trajectory(Strategy.fedavg(), data, part, theta0, 5)
    fliu0 = _trajectory(Strategy.fliu_fixed(0.0), data, part, theta0, 5)
    a_ok = fedavg == fliu0

    clt = _trajectory(Strategy.clt(), data, part, theta0, 5)
    fliu1 = _trajectory(Strategy.fliu_fixed(1.0), data, part, theta0, 5)
    b_ok = all(
        c[1] == f[1] and c[2]["L1"] == f[2]["L1"] and c[2]["L2"] == f[2]["L2"]
        for c, f in zip(clt, fliu1)
    )
    report(1, a_ok and b_ok, f"FLIU(0)==FedAvg bit-exact: {a_ok}; FLIU(1)==CLT bit-exact: {b_ok} (T=5, K=10)")


# 2 -------------------------------------------------------------------------

def test_criterion_02_gamma_table():
    n, K = 60000, 100
    cases = [(601, 0.5), (600, 0.25), (100, 0.1), (300, 0.1), (301, 0.25),
             (3000, 0.5), (3001, 0.75), (6000, 0.75), (6001, 0.9)]
    bad = [(n_k, g, gamma_adaptive(n_k, n, K)) for n_k, g in cases if gamma_adaptive(n_k, n, K) != g]
    branches = {gamma_adaptive(n_k, n, K) for n_k, _ in cases}
    report(2, not bad and branches == {0.1, 0.25, 0.5, 0.75, 0.9},
           f"{len(cases)} boundary cases, mismatches {bad}, branches hit {sorted(branches)}")


# 3 -------------------------------------------------------------------------

def test_criterion_03_gradients():
    rng = np.random.default_rng(2024)
    worst = {}
    for arch in ("logistic", "mlp"):
        worst[arch] = max(fd_relative_error(*random_triple(rng, arch)) for _ in range(50))
    report(3, max(worst.values()) < 1e-4,
           f"max rel. error logistic {worst['logistic']:.2e}, mlp {worst['mlp']:.2e} (limit 1e-4, 50 triples each)")


# 4 -------------------------------------------------------------------------

def test_criterion_04_sinkhorn():
    rng = np.random.default_rng(99)
    worst, most_iters = 0.0, 0
    for K in (10, 100):
        for _ in range(100):
            fit = sinkhorn_knopp(rng.uniform(1e-3, 1.0, (K, 10)), 10 / K, 1.0)
            dev = max(np.abs(fit.row_sums() - 10 / K).max(), np.abs(fit.col_sums() - 1.0).max())
            worst, most_iters = max(worst, dev), max(most_iters, fit.iterations)
    oracle = np.array(ipf_oracle([[2, 1], [1, 2]], 1.0, 1.0))
    two = sinkhorn_knopp(np.array([[2.0, 1.0], [1.0, 2.0]]), 1.0, 1.0).entries
    diff = float(np.abs(two - oracle).max())
    report(4, worst < 1e-8 and most_iters <= 10_000 and diff < 1e-8,
           f"max marginal deviation {worst:.3e}, max iterations {most_iters}, 2x2 vs oracle {diff:.1e}")


# 5 -------------------------------------------------------------------------

def test_criterion_05_partition_invariants():
    cfg = config_from_dict({"dataset": dataset_section(600, 100), "environment": "IID"})
    train, test = load_datasets(cfg.dataset)
    L, K, failures = train.num_classes, 10, []
    for env in ENVIRONMENTS:
        for seed in range(20):
            part = build_partition(env, train, test, K, np.random.default_rng(seed), 1.0, 1.0)
            try:
                check_partition(part, len(train), len(test))
            except Exception as exc:  # noqa: BLE001 - collect every failure
                failures.append(f"{env}/{seed}: {exc}")
            sizes = part.train_sizes()
            if env == "PATH" and set(support_sizes(part, train)) != {2}:
                failures.append(f"PATH/{seed}: support {support_sizes(part, train)}")
            if env == "LS" and sizes.max() - sizes.min() > L:
                failures.append(f"LS/{seed}: spread {sizes.max() - sizes.min()}")
            if env in ("QS", "LSQS") and sizes.sum() != len(train):
                failures.append(f"{env}/{seed}: total {sizes.sum()}")
    hist = build_partition("LS", train, test, K, np.random.default_rng(0), alpha_label=1e6).label_histograms(train)
    ratio = hist.max() / hist.min()
    if not ratio < 1.2:
        failures.append(f"alpha=1e6 ratio {ratio:.3f}")
    report(5, not failures, f"5 environments x 20 seeds, alpha=1e6 LS ratio {ratio:.3f}, failures {failures[:3]}")


# 6 -------------------------------------------------------------------------

def test_criterion_06_path_clt(path_run):
    acc_g = path_run.final("clt", "L2", "acc_global")[0]
    acc_l = path_run.final("clt", "L2", "acc_local")[0]
    ok = abs(acc_g - 0.20) <= 0.05 and acc_l > 0.90
    report(6, ok, f"CLT L2 Acc(G) {100 * acc_g:.2f} (target 20 +/- 5), Acc(L) {100 * acc_l:.2f} (> 90)")


# 7 -------------------------------------------------------------------------

def test_criterion_07_fliu_tradeoff(path_run):
    fliu_l1 = path_run.final("fliu_adaptive", "L1", "acc_local")[0]
    fedavg_l1 = path_run.final("fedavg", "L1", "acc_local")[0]
    fliu_g = path_run.final("fliu_adaptive", "G", "acc_global")[0]
    clt_g = path_run.final("clt", "L2", "acc_global")[0]
    ok = fliu_l1 >= fedavg_l1 + 0.05 and fliu_g >= clt_g + 0.20
    report(7, ok, f"L1 Acc(L) FLIU {100 * fliu_l1:.2f} vs FedAvg {100 * fedavg_l1:.2f}; "
                  f"G Acc(G) FLIU {100 * fliu_g:.2f} vs CLT {100 * clt_g:.2f}")


# 8 -------------------------------------------------------------------------

def test_criterion_08_iid_sanity():
    cfg = base_config("IID", ["fedavg"], 20, dataset_section(600, 200, train_subset=6000))
    result = run_experiment(cfg)
    acc_g = result.final("fedavg", "G", "acc_global")[0]
    gap = abs(result.final("fedavg", "L1", "acc_local")[0] - result.final("fedavg", "L1", "acc_global")[0])
    report(8, acc_g >= 0.90 and gap < 0.05,
           f"FedAvg G Acc(G) {100 * acc_g:.2f} (>= 90), L1 |Acc(L)-Acc(G)| {100 * gap:.2f} (< 5)")


# 9 -------------------------------------------------------------------------

def test_criterion_09_rho(path_run):
    series = path_run.series("fliu_adaptive", "L2", "rho_0.95")[0]
    window = 10
    moving = [series[t - window + 1 : t + 1].mean() for t in range(len(series) - window, len(series))]
    monotone = all(b >= a for a, b in zip(moving, moving[1:]))
    final = int(series[-1])
    report(9, monotone and final >= 8,
           f"FLIU L2 rho_0.95 last 10 rounds {series[-10:].astype(int).tolist()}, "
           f"10-round moving average non-decreasing: {monotone}, final {final} (>= 8)")


# 10 ------------------------------------------------------------------------

def test_criterion_10_determinism_and_replay(tmp_path):
    doc = {
        "dataset": dataset_section(100, 30) if not MNIST_ROOT else {**dataset_section(), "train_subset": 2000},
        "environment": {"name": "LSQS", "alpha": 0.5},
        "clients": 10,
        "strategies": ["clt", "fedavg", "fliu_adaptive"],
        "model": {"architecture": "mlp", "hidden_sizes": [16]},
        "local_epochs": 1,
        "rounds": 3,
        "repetitions": 2,
        "seed": 17,
    }
    cfg = config_from_dict(doc)
    emit_results(run_experiment(cfg), tmp_path / "a")
    emit_results(run_experiment(cfg), tmp_path / "b")
    same_csv = (tmp_path / "a" / "rounds.csv").read_bytes() == (tmp_path / "b" / "rounds.csv").read_bytes()
    _, identical = replay(tmp_path / "a" / "partition_2.json", cfg, out_dir=tmp_path / "r")
    report(10, same_csv and identical, f"rounds.csv byte-identical: {same_csv}; replayed partition identical: {identical}")


# 11 ------------------------------------------------------------------------

def test_criterion_11_metric_algebra(path_run):
    problems = []
    for name in path_run.strategy_names:
        for rec in path_run.histories[name][1]:
            for stage in ("L1", "L2"):
                m = rec.snapshots[stage].metrics()
                if m["acc"] != m["acc_local"] + m["acc_global"]:
                    problems.append(f"{name} {stage} round {rec.round}: Acc identity")
                locals_ = rec.snapshots[stage].per_client_local
                counts = [rho(locals_, e) for e in np.linspace(0.0, 1.0, 41)]
                if any(b > a for a, b in zip(counts, counts[1:])):
                    problems.append(f"{name} {stage} round {rec.round}: rho not monotone")
    for rec in path_run.histories["fedavg"][1]:
        l1 = rec.snapshots["L1"]
        if statistics.pvariance(l1.per_client_global) != 0.0:
            problems.append(f"fedavg round {rec.round}: L1 Acc(G) variance nonzero")
        if l1.metrics()["acc_global"] != rec.snapshots["G"].metrics()["acc_global"]:
            problems.append(f"fedavg round {rec.round}: L1 Acc(G) != G Acc(G)")
    report(11, not problems, f"checked {sum(len(h[1]) for h in path_run.histories.values())} round records; "
                             f"problems {problems[:3]}")
