"""Round loop: client sampling, dispatch, weighted FedAvg and run bookkeeping."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor
from .client import Client, ClientDataset, ClientUpdate, TrainHyper
from .errors import ConfigError, ProtocolError, RoundError
from .model import GlobalModel, ModelSpec

log = logging.getLogger(__name__)

# stream tags keep sampling, client training and evaluation draws independent
SAMPLE_STREAM, CLIENT_STREAM, EVAL_STREAM, INIT_STREAM = 0, 1, 2, 3


def stream_seed(seed: int, *keys: int) -> np.random.SeedSequence:
    """Deterministic child seed for ``(seed, *keys)``, independent of scheduling order."""
    return np.random.SeedSequence([int(seed), *[int(k) for k in keys]])


def stream_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, *keys))


@dataclass(frozen=True)
class FederationConfig:
    rounds: int
    clients_per_round: int
    seed: int = 0
    eval_every: int = 0
    eval_clients: int = 0
    eval_split: str = "valid"
    workers: int = 1
    failure_policy: str = "drop-client"
    variant: str = "flow"
    checkpoint_every: int = 0

    def validate(self, population: int):
        if self.rounds < 0:
            raise ConfigError("rounds must be non-negative")
        if not 1 <= self.clients_per_round <= population:
            raise ConfigError(
                f"clients_per_round must lie in [1, {population}], got {self.clients_per_round}"
            )
        if self.eval_every and not 1 <= self.eval_clients <= population:
            raise ConfigError(f"eval_clients must lie in [1, {population}]")
        if self.failure_policy not in ("drop-client", "fail-round"):
            raise ConfigError(f"unknown failure policy {self.failure_policy!r}")
        if self.variant not in ("flow", "global_only", "local_only", "fedavg_plain"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.eval_split not in ("valid", "test"):
            raise ConfigError("eval_split must be 'valid' or 'test'")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")


@dataclass
class RoundReport:
    round: int
    sampled: list
    n: list
    total_n: int
    dropped: list = field(default_factory=list)
    mean_r1: float | None = None
    eval: dict | None = None
    wall_clock: float = 0.0

    def to_dict(self, with_timing: bool = False) -> dict:
        d = asdict(self)
        if not with_timing:
            d.pop("wall_clock")
        return d


def sample_clients(population: Sequence[int], k: int, round_index: int, rng: np.random.Generator) -> list:
    """``k`` distinct client ids for one round; rounds are independent draws."""
    ids = list(population)
    if not 1 <= k <= len(ids):
        raise ConfigError(f"cannot sample {k} clients from a population of {len(ids)}")
    picks = rng.choice(len(ids), size=k, replace=False)
    return [ids[i] for i in picks]


def aggregate_fedavg(updates: Sequence[ClientUpdate]) -> GlobalModel:
    """Parameter-wise mean of client models weighted by instance counts.

    Computed as ``lo + sum_c w_c * (W_c - lo)`` with ``lo`` the elementwise
    minimum, summing the terms in sorted order.  The result is independent of
    the update order, exact for identical updates, and kept inside the
    elementwise [min, max] envelope.
    """
    if not updates:
        raise RoundError("no client updates to aggregate")
    first = updates[0].global_model
    names = list(first.params)
    for u in updates[1:]:
        gm = u.global_model
        if list(gm.params) != names:
            raise ProtocolError("client update parameter names differ")
        for k in names:
            if gm.params[k].shape != first.params[k].shape:
                raise ProtocolError(f"client update shape mismatch for {k}")
    counts = np.array([u.n for u in updates], dtype=np.float64)
    if (counts < 0).any() or counts.sum() <= 0:
        raise RoundError("instance counts must be non-negative with a positive total")
    weights = counts / counts.sum()
    out = {}
    for k in names:
        stack = np.stack([u.global_model.params[k].value for u in updates])
        lo = stack.min(axis=0)
        hi = stack.max(axis=0)
        terms = weights.reshape((-1,) + (1,) * (stack.ndim - 1)) * (stack - lo)
        mean = lo + np.sort(terms, axis=0).sum(axis=0)
        out[k] = Tensor(np.minimum(mean, hi))
    return GlobalModel.from_tensors(first.spec, out)


def _train_one(args):
    client, model, seed = args
    return client.train(model, seed)


class Federation:
    """Server state for one training run: population, settings and worker pool."""

    def __init__(
        self,
        datasets: Sequence[ClientDataset],
        spec: ModelSpec,
        hyper: TrainHyper,
        config: FederationConfig,
        persistent_clients: bool = True,
        evaluator: Callable | None = None,
    ):
        self.datasets = {d.client_id: d for d in datasets}
        self.spec = spec
        self.hyper = hyper
        self.config = config
        self.persistent_clients = persistent_clients
        self.evaluator = evaluator
        config.validate(len(self.datasets))
        self._clients = {cid: self._make_client(cid) for cid in self.datasets} if persistent_clients else None

    @property
    def population(self) -> list:
        return sorted(self.datasets)

    def _make_client(self, cid) -> Client:
        return Client(self.datasets[cid], self.hyper, plain=self.config.variant == "fedavg_plain")

    def client(self, cid) -> Client:
        if self._clients is not None:
            return self._clients[cid]
        return self._make_client(cid)

    def initial_model(self) -> GlobalModel:
        return GlobalModel.initialize(self.spec, stream_rng(self.config.seed, INIT_STREAM))

    def run_round(self, global_model: GlobalModel, round_index: int, pool=None):
        """Train the sampled clients on ``global_model`` and aggregate their updates."""
        cfg = self.config
        start = time.perf_counter()
        rng = stream_rng(cfg.seed, SAMPLE_STREAM, round_index)
        sampled = sample_clients(self.population, cfg.clients_per_round, round_index, rng)
        jobs = [
            (self.client(cid), global_model.copy(), stream_seed(cfg.seed, CLIENT_STREAM, round_index, cid))
            for cid in sampled
        ]
        if pool is not None:
            futures = [pool.submit(_train_one, job) for job in jobs]
            outcomes = []
            for f in futures:
                try:
                    outcomes.append(f.result())
                except Exception as exc:  # noqa: BLE001
                    outcomes.append(exc)
        else:
            outcomes = []
            for job in jobs:
                try:
                    outcomes.append(_train_one(job))
                except Exception as exc:  # noqa: BLE001
                    outcomes.append(exc)
        updates, dropped = [], []
        for cid, res in zip(sampled, outcomes):
            if isinstance(res, Exception):
                if cfg.failure_policy == "fail-round":
                    raise RoundError(f"client {cid} failed in round {round_index}: {res}") from res
                log.warning("dropping client %s in round %d: %s", cid, round_index, res)
                dropped.append(cid)
            else:
                updates.append(res)
        # merge in client-id order, not completion or sampling order
        updates.sort(key=lambda u: u.client_id)
        new_model = aggregate_fedavg(updates)
        r1 = [u.metrics["mean_r1"] for u in updates if "mean_r1" in u.metrics]
        report = RoundReport(
            round=round_index,
            sampled=[int(c) for c in sampled],
            n=[int(u.n) for u in updates],
            total_n=int(sum(u.n for u in updates)),
            dropped=[int(c) for c in dropped],
            mean_r1=float(np.mean(r1)) if r1 else None,
        )
        report.wall_clock = time.perf_counter() - start
        return new_model, report

    def evaluate_round(self, global_model: GlobalModel, round_index: int) -> dict:
        cfg = self.config
        rng = stream_rng(cfg.seed, EVAL_STREAM, round_index)
        ids = sample_clients(self.population, cfg.eval_clients, round_index, rng)
        return self.evaluator(
            [self.datasets[c] for c in ids],
            global_model,
            self.hyper,
            lambda cid: stream_seed(cfg.seed, EVAL_STREAM, round_index, cid),
            split=cfg.eval_split,
        )

    def run_training(self, global_model: GlobalModel | None = None, on_round: Callable | None = None):
        """Run all rounds; returns ``(final model, reports)``."""
        cfg = self.config
        model = global_model if global_model is not None else self.initial_model()
        reports = []
        pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
        try:
            for i in range(1, cfg.rounds + 1):
                model, report = self.run_round(model, i, pool)
                if cfg.eval_every and self.evaluator is not None and i % cfg.eval_every == 0:
                    report.eval = self.evaluate_round(model, i)
                reports.append(report)
                if on_round is not None:
                    on_round(model, report)
        finally:
            if pool is not None:
                pool.shutdown()
        return model, reports


def run_round(global_model, datasets, spec, hyper, config, round_index, pool=None):
    return Federation(datasets, spec, hyper, config).run_round(global_model, round_index, pool)


def run_training(datasets, spec, hyper, config, evaluator=None, global_model=None, persistent_clients=True):
    fed = Federation(datasets, spec, hyper, config, persistent_clients, evaluator)
    return fed.run_training(global_model)
