"""
Experiment harness: config parsing, seed derivation, the repetition loop and
result files.

Within one repetition every strategy sees the same partition, the same
initial model and the same per-client shuffle streams, so strategy
differences are paired.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .dataset import LabeledDataset, generate_synthetic, load_cifar10, load_idx, split_per_class
from .federation import (
    FederatedData,
    RoundHyper,
    ServerState,
    Strategy,
    init_clients,
    run_training,
)
from .metrics import STAGES, RoundRecord, rho_key
from .model import ModelSpec, init_params
from .partition import ENVIRONMENTS, Partition, build_partition

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "FLIU_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


class MissingFieldError(ConfigError):
    pass


class UnknownKeyError(ConfigError):
    pass


class ConstraintError(ConfigError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str  # "mnist" | "cifar10" | "synthetic"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_batches: tuple[str, ...] = ()
    test_batches: tuple[str, ...] = ()
    num_classes: int = 10
    dim: int = 20
    separation: float = 5.0
    noise: float = 1.0
    train_per_class: int = 600
    test_per_class: int = 200
    seed: int = 0
    train_subset: int | None = None
    test_subset: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    environment: str
    alpha_label: float | None = None
    alpha_quantity: float | None = None
    clients: int = 100
    strategies: tuple[Strategy, ...] = ()
    architecture: str = "mlp"
    hidden_sizes: tuple[int, ...] = (128,)
    local_epochs: int = 5
    batch_size: int = 50
    rounds: int = 100
    learning_rate: float = 0.01
    lr_decay: float = 0.99
    repetitions: int = 3
    seed: int = 0
    epsilons: tuple[float, ...] = (0.85, 0.90, 0.95)
    output_dir: str = "results"
    aggregation: str = "uniform"
    reset_optimizer_on_update: bool = False
    clt_pseudo_global: bool = False

    def hyper(self) -> RoundHyper:
        return RoundHyper(
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            lr_decay=self.lr_decay,
            epsilons=self.epsilons,
            reset_optimizer_on_update=self.reset_optimizer_on_update,
            clt_pseudo_global=self.clt_pseudo_global,
        )

    def model_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        hidden = self.hidden_sizes if self.architecture == "mlp" else ()
        return ModelSpec(self.architecture, input_dim, num_classes, hidden)


_DATASET_KEYS = {f for f in DatasetConfig.__dataclass_fields__ if f != "kind"} | {"name", "root"}
_TOP_KEYS = {
    "dataset", "environment", "clients", "strategies", "model", "local_epochs", "batch_size",
    "rounds", "learning_rate", "lr_decay", "repetitions", "seed", "epsilons", "output_dir",
    "aggregation", "reset_optimizer_on_update", "clt_pseudo_global",
}
_ENV_KEYS = {"name", "alpha", "alpha_label", "alpha_quantity"}
_MODEL_KEYS = {"architecture", "hidden_sizes"}
DEFAULT_STRATEGIES = ("clt", "fedavg", "fliu_adaptive")


def _reject_unknown(section: str, doc: dict, allowed: set[str]) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise UnknownKeyError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def parse_strategy(entry, aggregation: str = "uniform") -> Strategy:
    """Accepts ``clt``, ``fedavg``, ``fliu_adaptive`` (alias ``fliu``) or ``{fliu_fixed: gamma}``."""
    if isinstance(entry, str):
        text = entry.strip().lower()
        if ":" in text:
            key, value = text.split(":", 1)
            return parse_strategy({key.strip(): float(value)}, aggregation)
        if text == "clt":
            return Strategy.clt(aggregation=aggregation)
        if text == "fedavg":
            return Strategy.fedavg(aggregation=aggregation)
        if text in ("fliu", "fliu_adaptive"):
            return Strategy.fliu_adaptive(aggregation=aggregation)
        raise ConstraintError(f"unknown strategy {entry!r}")
    if isinstance(entry, dict) and len(entry) == 1:
        (key, value), = entry.items()
        if str(key).lower() == "fliu_fixed":
            try:
                return Strategy.fliu_fixed(float(value), aggregation=aggregation)
            except ValueError as exc:
                raise ConstraintError(str(exc)) from exc
    raise ConstraintError(f"cannot parse strategy entry {entry!r}")


def _parse_dataset(doc) -> DatasetConfig:
    if isinstance(doc, str):
        doc = {"name": doc}
    if not isinstance(doc, dict) or "name" not in doc:
        raise MissingFieldError("dataset.name is required")
    _reject_unknown("dataset", doc, _DATASET_KEYS)
    kind = str(doc["name"]).lower()
    if kind not in ("mnist", "cifar10", "synthetic"):
        raise ConstraintError(f"dataset.name must be mnist, cifar10 or synthetic, got {kind!r}")
    fields: dict[str, Any] = {k: v for k, v in doc.items() if k not in ("name", "root")}
    root = doc.get("root")
    if kind == "mnist":
        defaults = {
            "train_images": "train-images-idx3-ubyte", "train_labels": "train-labels-idx1-ubyte",
            "test_images": "t10k-images-idx3-ubyte", "test_labels": "t10k-labels-idx1-ubyte",
        }
        for key, fname in defaults.items():
            if key not in fields:
                if root is None:
                    raise MissingFieldError(f"dataset.{key} (or dataset.root) is required for mnist")
                fields[key] = str(Path(root) / fname)
    if kind == "cifar10":
        if "train_batches" not in fields:
            if root is None:
                raise MissingFieldError("dataset.train_batches (or dataset.root) is required for cifar10")
            fields["train_batches"] = [str(Path(root) / f"data_batch_{i}.bin") for i in range(1, 6)]
        if "test_batches" not in fields:
            if root is None:
                raise MissingFieldError("dataset.test_batches (or dataset.root) is required for cifar10")
            fields["test_batches"] = [str(Path(root) / "test_batch.bin")]
    for key in ("train_batches", "test_batches"):
        if key in fields:
            fields[key] = tuple(str(p) for p in fields[key])
    cfg = DatasetConfig(kind=kind, **fields)
    if kind == "synthetic":
        if cfg.num_classes < 2 or cfg.dim < 1 or cfg.train_per_class < 1 or cfg.test_per_class < 1:
            raise ConstraintError("synthetic dataset sizes must be positive (num_classes >= 2)")
        if not cfg.separation > 0:
            raise ConstraintError("dataset.separation must be positive")
    return cfg


def _parse_environment(doc) -> tuple[str, float | None, float | None]:
    if isinstance(doc, str):
        doc = {"name": doc}
    if not isinstance(doc, dict) or "name" not in doc:
        raise MissingFieldError("environment.name is required")
    _reject_unknown("environment", doc, _ENV_KEYS)
    name = str(doc["name"]).upper()
    if name not in ENVIRONMENTS:
        raise ConstraintError(f"environment.name must be one of {ENVIRONMENTS}, got {name!r}")
    alpha = doc.get("alpha", 1.0)
    a_label = float(doc.get("alpha_label", alpha)) if name in ("LS", "LSQS") else None
    a_quant = float(doc.get("alpha_quantity", alpha)) if name in ("QS", "LSQS") else None
    for label, value in (("alpha_label", a_label), ("alpha_quantity", a_quant)):
        if value is not None and not value > 0:
            raise ConstraintError(f"environment.{label} must be positive")
    return name, a_label, a_quant


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    _reject_unknown("config", doc, _TOP_KEYS)
    for key in ("dataset", "environment"):
        if key not in doc:
            raise MissingFieldError(f"{key} is required")
    dataset = _parse_dataset(doc["dataset"])
    env, a_label, a_quant = _parse_environment(doc["environment"])
    model = doc.get("model", {}) or {}
    _reject_unknown("model", model, _MODEL_KEYS)
    aggregation = doc.get("aggregation", "uniform")
    if aggregation not in ("uniform", "sample_weighted"):
        raise ConstraintError("aggregation must be uniform or sample_weighted")
    strategies = tuple(parse_strategy(s, aggregation) for s in doc.get("strategies", DEFAULT_STRATEGIES))
    if not strategies:
        raise ConstraintError("at least one strategy is required")
    names = [s.name for s in strategies]
    if len(set(names)) != len(names):
        raise ConstraintError(f"duplicate strategies: {names}")
    default_lr = 0.001 if dataset.kind == "cifar10" else 0.01
    architecture = model.get("architecture", "mlp")
    hidden = model.get("hidden_sizes", [128] if architecture == "mlp" else [])
    cfg = ExperimentConfig(
        dataset=dataset,
        environment=env,
        alpha_label=a_label,
        alpha_quantity=a_quant,
        clients=int(doc.get("clients", 100)),
        strategies=strategies,
        architecture=architecture,
        hidden_sizes=tuple(int(h) for h in hidden),
        local_epochs=int(doc.get("local_epochs", 5)),
        batch_size=int(doc.get("batch_size", 50)),
        rounds=int(doc.get("rounds", 100)),
        learning_rate=float(doc.get("learning_rate", default_lr)),
        lr_decay=float(doc.get("lr_decay", 0.99)),
        repetitions=int(doc.get("repetitions", 3)),
        seed=int(doc.get("seed", 0)),
        epsilons=tuple(float(e) for e in doc.get("epsilons", (0.85, 0.90, 0.95))),
        output_dir=str(doc.get("output_dir", os.environ.get(OUTPUT_DIR_ENV, "results"))),
        aggregation=aggregation,
        reset_optimizer_on_update=bool(doc.get("reset_optimizer_on_update", False)),
        clt_pseudo_global=bool(doc.get("clt_pseudo_global", False)),
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    checks = [
        (cfg.clients >= 1, "clients must be >= 1"),
        (cfg.rounds >= 0, "rounds must be >= 0"),
        (cfg.local_epochs >= 1, "local_epochs must be >= 1"),
        (cfg.batch_size >= 1, "batch_size must be >= 1"),
        (cfg.repetitions >= 1, "repetitions must be >= 1"),
        (cfg.learning_rate > 0, "learning_rate must be positive"),
        (0 < cfg.lr_decay <= 1, "lr_decay must lie in (0, 1]"),
        (all(0 <= e <= 1 for e in cfg.epsilons), "epsilons must lie in [0, 1]"),
        (cfg.architecture in ("logistic", "mlp"), "model.architecture must be logistic or mlp"),
        (cfg.architecture == "logistic" or len(cfg.hidden_sizes) > 0, "mlp needs hidden_sizes"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConstraintError(message)


def parse_config(path) -> ExperimentConfig:
    with open(path) as f:
        doc = yaml.safe_load(f)
    return config_from_dict(doc or {})


def config_to_dict(cfg: ExperimentConfig) -> dict:
    ds = {k: v for k, v in asdict(cfg.dataset).items() if k != "kind"}
    ds = {"name": cfg.dataset.kind, **{k: (list(v) if isinstance(v, tuple) else v) for k, v in ds.items()}}
    env: dict[str, Any] = {"name": cfg.environment}
    if cfg.alpha_label is not None:
        env["alpha_label"] = cfg.alpha_label
    if cfg.alpha_quantity is not None:
        env["alpha_quantity"] = cfg.alpha_quantity
    strategies: list[Any] = []
    for s in cfg.strategies:
        if s.kind == "clt":
            strategies.append("clt")
        elif s.kind == "fliu_adaptive":
            strategies.append("fliu_adaptive")
        elif s.label == "fedavg":
            strategies.append("fedavg")
        else:
            strategies.append({"fliu_fixed": s.gamma})
    return {
        "dataset": ds,
        "environment": env,
        "clients": cfg.clients,
        "strategies": strategies,
        "model": {"architecture": cfg.architecture, "hidden_sizes": list(cfg.hidden_sizes)},
        "local_epochs": cfg.local_epochs,
        "batch_size": cfg.batch_size,
        "rounds": cfg.rounds,
        "learning_rate": cfg.learning_rate,
        "lr_decay": cfg.lr_decay,
        "repetitions": cfg.repetitions,
        "seed": cfg.seed,
        "epsilons": list(cfg.epsilons),
        "output_dir": cfg.output_dir,
        "aggregation": cfg.aggregation,
        "reset_optimizer_on_update": cfg.reset_optimizer_on_update,
        "clt_pseudo_global": cfg.clt_pseudo_global,
    }


def derive_seed(master_seed: int, *labels) -> int:
    """Stable 64-bit stream seed: SHA-256 over the JSON encoding of (master_seed, *labels)."""
    payload = json.dumps([int(master_seed), *labels], separators=(",", ":")).encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


def load_datasets(ds: DatasetConfig) -> tuple[LabeledDataset, LabeledDataset]:
    if ds.kind == "mnist":
        train = load_idx(ds.train_images, ds.train_labels, name="mnist-train")
        test = load_idx(ds.test_images, ds.test_labels, name="mnist-test")
    elif ds.kind == "cifar10":
        train = load_cifar10(ds.train_batches, name="cifar10-train")
        test = load_cifar10(ds.test_batches, name="cifar10-test")
    else:
        full = generate_synthetic(
            ds.num_classes, ds.train_per_class + ds.test_per_class, ds.dim, ds.separation, ds.seed, ds.noise
        )
        train, test = split_per_class(full, ds.train_per_class)
    if ds.train_subset is not None:
        train = train.subset(np.arange(min(ds.train_subset, len(train))))
    if ds.test_subset is not None:
        test = test.subset(np.arange(min(ds.test_subset, len(test))))
    return train, test


def make_partition(cfg: ExperimentConfig, train: LabeledDataset, test: LabeledDataset, repetition: int,
                   seed: int | None = None) -> Partition:
    seed = derive_seed(cfg.seed, repetition, "partition") if seed is None else seed
    part = build_partition(
        cfg.environment, train, test, cfg.clients, np.random.default_rng(seed),
        alpha_label=cfg.alpha_label, alpha_quantity=cfg.alpha_quantity,
    )
    part.seed = seed
    part.meta.update(
        {
            "repetition": repetition,
            "master_seed": cfg.seed,
            "train_histogram": part.label_histograms(train, "train").tolist(),
            "test_histogram": part.label_histograms(test, "test").tolist(),
        }
    )
    return part


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (divisor N-1; zero for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return mean, std


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    histories: dict[str, dict[int, list[RoundRecord]]] = field(default_factory=dict)
    partitions: dict[int, Partition] = field(default_factory=dict)

    @property
    def strategy_names(self) -> list[str]:
        return [s.name for s in self.config.strategies if s.name in self.histories]

    def metric_names(self) -> list[str]:
        return ["acc_local", "acc_global", "acc"] + [rho_key(e) for e in self.config.epsilons]

    def series(self, strategy: str, stage: str, metric: str) -> np.ndarray:
        """(repetitions, rounds) array; NaN where a stage does not report the metric."""
        reps = self.histories[strategy]
        rows = []
        for rep in sorted(reps):
            rows.append([rec.metrics().get((stage, metric), np.nan) for rec in reps[rep]])
        return np.asarray(rows, dtype=np.float64)

    def aggregate(self, strategy: str, stage: str, metric: str) -> list[tuple[float, float]] | None:
        arr = self.series(strategy, stage, metric)
        if arr.size == 0 or np.isnan(arr).any():
            return None
        return [mean_std(arr[:, t]) for t in range(arr.shape[1])]

    def final(self, strategy: str, stage: str, metric: str) -> tuple[float, float] | None:
        agg = self.aggregate(strategy, stage, metric)
        return agg[-1] if agg else None


def run_experiment(
    cfg: ExperimentConfig,
    partitions: dict[int, Partition] | None = None,
    datasets: tuple[LabeledDataset, LabeledDataset] | None = None,
    out_dir=None,
) -> ExperimentResult:
    """Run every strategy for every repetition.

    ``partitions`` maps repetition index (1-based) to a fixed partition and
    restricts the run to those repetitions. If ``out_dir`` is given and a run
    fails, whatever finished is written there before the error propagates.
    """
    train, test = datasets if datasets is not None else load_datasets(cfg.dataset)
    spec = cfg.model_spec(train.dim, train.num_classes)
    data = FederatedData(spec, train, test)
    hyper = cfg.hyper()
    result = ExperimentResult(cfg)
    reps = sorted(partitions) if partitions else list(range(1, cfg.repetitions + 1))
    try:
        for rep in reps:
            part = partitions[rep] if partitions else make_partition(cfg, train, test, rep)
            result.partitions[rep] = part
            theta0 = init_params(spec, np.random.default_rng(derive_seed(cfg.seed, rep, "init")))
            shuffle = [derive_seed(cfg.seed, rep, k, "shuffle") for k in range(part.num_clients)]
            for strategy in cfg.strategies:
                log.info("repetition %d strategy %s", rep, strategy.name)
                clients = init_clients(part, theta0, strategy, cfg.learning_rate, shuffle)
                _, _, records = run_training(ServerState(theta0), clients, strategy, hyper, data, cfg.rounds)
                result.histories.setdefault(strategy.name, {})[rep] = records
    except BaseException:
        if out_dir is not None:
            emit_results(result, out_dir)
        raise
    return result


def _fmt(value: float) -> str:
    # shortest repr that round-trips; locale independent
    return repr(float(value)) if value == value else ""


def _scale(metric: str, value: float) -> float:
    return value * 100.0 if metric.startswith("acc") else value


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def emit_results(result: ExperimentResult, out_dir) -> Path:
    """Write rounds.csv, summary.csv, curves/, partition_<rep>.json and config.resolved.

    Accuracies are written in percent, rho values as client counts.
    """
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    cfg = result.config

    rows = []
    for name in result.strategy_names:
        for rep in sorted(result.histories[name]):
            for rec in result.histories[name][rep]:
                for (stage, metric), value in rec.metrics().items():
                    rows.append((rep, name, rec.round, stage, metric, _fmt(_scale(metric, value))))
    _write_csv(out / "rounds.csv", ("repetition", "strategy", "round", "stage", "metric", "value"), rows)

    summary = []
    for name in result.strategy_names:
        for stage in STAGES:
            for metric in result.metric_names():
                agg = result.aggregate(name, stage, metric)
                if agg:
                    mean, std = agg[-1]
                    summary.append((name, stage, metric, _fmt(_scale(metric, mean)), _fmt(_scale(metric, std))))
                    _write_csv(
                        out / "curves" / f"{name}_{stage}_{metric}.csv",
                        ("round", "mean", "std"),
                        [(t + 1, _fmt(_scale(metric, m)), _fmt(_scale(metric, s))) for t, (m, s) in enumerate(agg)],
                    )
                else:
                    summary.append((name, stage, metric, "", ""))
    _write_csv(out / "summary.csv", ("strategy", "stage", "metric", "mean", "std"), summary)

    for rep, part in sorted(result.partitions.items()):
        part.save(out / f"partition_{rep}.json")
    (out / "config.resolved").write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))
    return out


def replay(partition_path, cfg: ExperimentConfig, out_dir=None) -> tuple[ExperimentResult, bool]:
    """Re-run one repetition on a stored partition.

    Returns the result and whether rebuilding the partition from its recorded
    environment and seed reproduces the stored assignment exactly.
    """
    stored = Partition.load(partition_path)
    if stored.num_clients != cfg.clients:
        raise ConstraintError(f"partition has {stored.num_clients} clients, config says {cfg.clients}")
    rep = int(stored.meta.get("repetition", 1))
    cfg = replace(
        cfg,
        environment=stored.environment,
        alpha_label=stored.alpha_label,
        alpha_quantity=stored.alpha_quantity,
        seed=int(stored.meta.get("master_seed", cfg.seed)),
    )
    train, test = load_datasets(cfg.dataset)
    rebuilt = make_partition(cfg, train, test, rep, seed=stored.seed)
    identical = rebuilt.same_assignment(stored)
    result = run_experiment(cfg, partitions={rep: stored}, datasets=(train, test), out_dir=out_dir)
    if out_dir is not None:
        emit_results(result, out_dir)
    return result, identical
