"""In-process federated learning simulation: FedAvg vs universe-space merging."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .matching import MatchConfig
from .merging import c2m3_merge, map_to_universe, naive_merge, repair
from .model import Dataset, MlpParams, loss_and_accuracy
from .training import TrainConfig, init_mlp, train_mlp

log = logging.getLogger(__name__)

AGGREGATORS = ("fedavg", "c2m3")


@dataclass(frozen=True)
class FedConfig:
    n_clients: int = 5
    rounds: int = 10
    local_epochs: int = 5
    same_init: bool = False
    aggregator: str = "c2m3"
    partition_seed: int = 0
    init_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    repair: bool = True
    # fraction of the training pool held out on the server for REPAIR statistics
    probe_fraction: float = 0.1

    def __post_init__(self):
        if self.n_clients < 2:
            raise ValueError("n_clients must be >= 2")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}; choose from {AGGREGATORS}")
        if not 0.0 < self.probe_fraction < 1.0:
            raise ValueError("probe_fraction must lie in (0, 1)")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class RoundRecord:
    round: int
    aggregator: str
    accuracy: float
    loss: float
    identity_perms: bool = True
    repaired: bool = False
    global_model: MlpParams | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {"round": self.round, "aggregator": self.aggregator, "accuracy": self.accuracy,
                "loss": self.loss, "identity_perms": self.identity_perms, "repaired": self.repaired}


def partition_data(data: Dataset, n_clients: int, seed: int) -> list[Dataset]:
    """Seeded IID shuffle-and-split; shard sizes differ by at most one."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if len(data) < n_clients:
        raise ValueError(f"{len(data)} samples cannot feed {n_clients} clients")
    if n_clients == 1:
        return [data]
    order = np.random.default_rng(seed).permutation(len(data))
    return [data.subset(np.sort(part), f"{data.name}-client{i}")
            for i, part in enumerate(np.array_split(order, n_clients))]


def _server_split(train: Dataset, cfg: FedConfig):
    rng = np.random.default_rng([cfg.partition_seed, 1])
    order = rng.permutation(len(train))
    n_probe = max(1, int(round(cfg.probe_fraction * len(train))))
    return train.subset(np.sort(order[n_probe:])), train.subset(np.sort(order[:n_probe]), "server-probe")


def aggregate(models: Sequence[MlpParams], cfg: FedConfig, probe: Dataset | None = None):
    """One aggregation step; returns ``(global_model, identity_perms, repaired)``.

    When joint matching returns identity maps for every client the models
    already share a basin and the c2m3 aggregator reduces to plain averaging.
    """
    models = list(models)
    if cfg.aggregator == "fedavg":
        return naive_merge(models), True, False
    merged, match = c2m3_merge(models, cfg.match)
    identity = all(p.is_identity() for stack in match.perms for p in stack)
    if identity:
        return naive_merge(models), True, False
    if cfg.repair and probe is not None:
        universe = [map_to_universe(m, p) for m, p in zip(models, match.perms)]
        return repair(merged, universe, probe), False, True
    return merged, False, False


def run_simulation(train: Dataset, test: Dataset, dims: Sequence[int], cfg: FedConfig) -> list[RoundRecord]:
    """Each round every client trains ``local_epochs`` from the global model
    (from its own or a shared init in round 1), then the server aggregates."""
    pool, probe = _server_split(train, cfg)
    shards = partition_data(pool, cfg.n_clients, cfg.partition_seed)
    if cfg.same_init:
        starts = [init_mlp(dims, cfg.init_seed, cfg.train.init_scale)] * cfg.n_clients
    else:
        starts = [init_mlp(dims, cfg.init_seed + 1000 * (i + 1), cfg.train.init_scale)
                  for i in range(cfg.n_clients)]
    records = []
    for rnd in range(1, cfg.rounds + 1):
        clients = []
        for i, shard in enumerate(shards):
            tcfg = TrainConfig(cfg.local_epochs, cfg.train.batch_size, cfg.train.lr, cfg.train.momentum,
                               cfg.train.weight_decay, cfg.train.seed + 7919 * rnd + i, cfg.train.init_scale)
            clients.append(train_mlp(shard, dims, tcfg, init=starts[i]))
        global_model, identity, repaired = aggregate(clients, cfg, probe)
        ev = loss_and_accuracy(global_model, test)
        records.append(RoundRecord(rnd, cfg.aggregator, ev.accuracy, ev.loss, identity, repaired, global_model))
        log.info("round %d %s acc=%.4f loss=%.4f", rnd, cfg.aggregator, ev.accuracy, ev.loss)
        starts = [global_model] * cfg.n_clients
    return records


def rounds_to_csv(records: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["round", "aggregator", "accuracy", "loss"])
    for r in records:
        writer.writerow([r.round, r.aggregator, repr(r.accuracy), repr(r.loss)])
    return buf.getvalue()
