"""Per-round client procedures: dataset split, local finetuning, gate and global training,
pre-inference and hard inference.

Every procedure is a pure function of its inputs and seed.  The global model
passed in is never mutated; training happens on a private copy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .errors import ParameterError
from .model import (
    GLOBAL,
    LOCAL,
    Bound,
    DynamicPersonalizedModel,
    GlobalModel,
    LocalParams,
    RoutingPolicy,
    batch_loss,
    forward_batch,
    make_batch,
)

log = logging.getLogger(__name__)


@dataclass
class ClientDataset:
    """Train/valid/test instances of one client.

    Sequence instances are tuples of token ids; classification instances are
    ``(features, label)`` pairs.
    """

    client_id: int
    kind: str
    train: list
    valid: list = field(default_factory=list)
    test: list = field(default_factory=list)


@dataclass
class SplitPair:
    d_local: list
    d_global: list


@dataclass(frozen=True)
class TrainHyper:
    local_epochs: int = 1
    global_epochs: int = 1
    lr_local: float = 0.3
    lr_global: float = 0.3
    tau: float = 0.75
    gamma: float = 1e-2
    batch_size: int = 16
    grad_clip: float | None = None
    preinference_global_epochs: int | None = None

    def __post_init__(self):
        if self.local_epochs < 0 or self.global_epochs < 0:
            raise ParameterError("epochs must be non-negative")
        if self.preinference_global_epochs is not None and self.preinference_global_epochs < 0:
            raise ParameterError("epochs must be non-negative")
        if not (self.lr_local > 0 and self.lr_global > 0):
            raise ParameterError("learning rates must be positive")
        if not self.tau > 0:
            raise ParameterError("temperature must be positive")
        if self.gamma < 0:
            raise ParameterError("gamma must be non-negative")
        if self.batch_size < 1:
            raise ParameterError("batch size must be at least 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ParameterError("grad_clip must be positive when set")

    @classmethod
    def for_task(cls, kind: str, **overrides) -> "TrainHyper":
        """Reference settings: sequence tasks use lr 0.3 and gamma 1e-2, classification lr 0.05,
        five local epochs and gamma 0.05."""
        if kind == "sequence":
            base = dict(local_epochs=1, lr_local=0.3, lr_global=0.3, tau=0.75, gamma=1e-2, batch_size=16)
        else:
            base = dict(local_epochs=5, lr_local=0.05, lr_global=0.05, tau=0.75, gamma=0.05, batch_size=20)
        base.update(overrides)
        return cls(**base)

    @property
    def pre_epochs(self) -> int:
        if self.preinference_global_epochs is None:
            return self.global_epochs
        return self.preinference_global_epochs


@dataclass
class ClientUpdate:
    """What a client returns to the server: its instance count and trained global model.

    ``metrics`` holds scalar training diagnostics kept server-side for
    reporting; they are not part of :meth:`payload`.
    """

    n: int
    global_model: GlobalModel
    client_id: int | None = None
    metrics: dict = field(default_factory=dict)

    def payload(self) -> dict:
        return {
            "n": self.n,
            "tensors": {
                k: {"shape": list(t.shape), "values": t.values()}
                for k, t in self.global_model.tensors().items()
            },
        }


def split_dataset(train: Sequence, kind: str, rng: np.random.Generator | None = None) -> SplitPair:
    """Split training data into the local-finetuning half and the gate/global half.

    Sequences are cut vertically: the first ``ceil(len/2)`` tokens go to
    ``d_local`` and the rest to ``d_global``.  A single-token sequence is
    placed in both.  Classification instances are shuffled (when ``rng`` is
    given) and halved, with a lone instance again placed in both halves.
    """
    if kind == "sequence":
        d_local, d_global = [], []
        for seq in train:
            seq = tuple(seq)
            if len(seq) < 2:
                d_local.append(seq)
                d_global.append(seq)
                continue
            cut = math.ceil(len(seq) / 2)
            d_local.append(seq[:cut])
            d_global.append(seq[cut:])
        return SplitPair(d_local, d_global)
    items = list(train)
    if len(items) < 2:
        return SplitPair(items, list(items))
    order = rng.permutation(len(items)) if rng is not None else np.arange(len(items))
    cut = math.ceil(len(items) / 2)
    return SplitPair([items[i] for i in order[:cut]], [items[i] for i in order[cut:]])


def minibatches(data: Sequence, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(len(data)) if rng is not None else np.arange(len(data))
    for start in range(0, len(data), batch_size):
        yield [data[i] for i in order[start : start + batch_size]]


def _run_pass(model, data, groups, params, lr, gamma, hyper, rng):
    spec = model.spec
    losses = []
    for chunk in minibatches(data, hyper.batch_size, rng):
        tape = Tape()
        loss, _ = batch_loss(Bound(model, tape, groups), make_batch(spec, chunk), gamma)
        ad.backward(loss)
        ad.sgd_step(params, lr, hyper.grad_clip)
        losses.append(float(loss.value))
    return losses


def derive_local_params(
    global_model: GlobalModel,
    d_local: Sequence,
    epochs: int,
    lr: float,
    *,
    policy: RoutingPolicy | None = None,
    rng: np.random.Generator | None = None,
    hyper: TrainHyper | None = None,
) -> LocalParams:
    """Copy the global encoder and finetune only that copy on ``d_local``.

    The forward pass goes through the blended model with ``policy`` (the
    freshly initialized gate) and plain task loss.  Without a policy the local
    encoder is finetuned on its own.
    """
    hyper = hyper or TrainHyper()
    local = LocalParams.from_global(global_model)
    if not d_local:
        local.warning = "empty local split; encoder copy left unfinetuned"
        log.warning(local.warning)
        return local
    if epochs == 0:
        return local
    route = None
    if policy is None:
        policy = RoutingPolicy.constant(global_model.spec.gate_dim, hyper.tau)
        route = LOCAL
    model = DynamicPersonalizedModel(global_model, local, policy, "soft", route)
    params = list(local.encoder.values())
    for _ in range(epochs):
        _run_pass(model, d_local, (LOCAL,), params, lr, 0.0, hyper, rng)
    return local


def train_policy_and_global(
    model: DynamicPersonalizedModel,
    d_global: Sequence,
    epochs: int,
    lr: float,
    gamma: float,
    *,
    rng: np.random.Generator | None = None,
    hyper: TrainHyper | None = None,
    update_global: bool = True,
) -> GlobalModel:
    """Alternate a gate-only pass and a global-only pass per epoch over ``d_global``.

    Updates ``model.policy`` and ``model.global_model`` in place and returns the
    latter.  With ``update_global=False`` only the gate is trained.
    """
    hyper = hyper or TrainHyper()
    if model.mode != "soft":
        raise ParameterError("gate and global training run in soft mode")
    if not d_global:
        log.warning("empty global split; model returned unchanged")
        return model.global_model
    policy_params = model.policy.params()
    global_params = list(model.global_model.params.values())
    for _ in range(epochs):
        if model.route is None:
            _run_pass(model, d_global, ("policy",), policy_params, lr, gamma, hyper, rng)
        if update_global:
            _run_pass(model, d_global, (GLOBAL,), global_params, lr, gamma, hyper, rng)
    return model.global_model


def mean_route_prob(model: DynamicPersonalizedModel, data: Sequence, batch_size: int = 64) -> float:
    """Mean global-route probability over all valid decision points of ``data``."""
    total = count = 0.0
    soft = model.with_mode("soft")
    for start in range(0, len(data), batch_size):
        batch = make_batch(model.spec, data[start : start + batch_size])
        fwd = forward_batch(Bound(soft, Tape()), batch)
        total += float((fwd.r1 * batch.mask).sum())
        count += float(batch.mask.sum())
    return total / count if count else float("nan")


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _build(client: ClientDataset, global_model: GlobalModel, hyper: TrainHyper, seed):
    rng = _rng(seed)
    spec = global_model.spec
    policy = RoutingPolicy.initialize(spec.gate_dim, hyper.tau, rng)
    work = global_model.copy()
    split = split_dataset(client.train, client.kind, rng)
    local = derive_local_params(
        work, split.d_local, hyper.local_epochs, hyper.lr_local, policy=policy, rng=rng, hyper=hyper
    )
    return DynamicPersonalizedModel(work, local, policy, "soft"), split, rng


def client_train(client: ClientDataset, global_model: GlobalModel, hyper: TrainHyper, seed) -> ClientUpdate:
    """One participating round: split, finetune the local encoder, then train gate and global model."""
    model, split, rng = _build(client, global_model, hyper, seed)
    new_global = train_policy_and_global(
        model, split.d_global, hyper.global_epochs, hyper.lr_global, hyper.gamma, rng=rng, hyper=hyper
    )
    metrics = {}
    if split.d_global:
        metrics["mean_r1"] = mean_route_prob(model, split.d_global)
    return ClientUpdate(len(client.train), new_global, client.client_id, metrics)


def client_train_plain(client: ClientDataset, global_model: GlobalModel, hyper: TrainHyper, seed) -> ClientUpdate:
    """FedAvg baseline round: every training instance trains the whole global model, no routing."""
    rng = _rng(seed)
    spec = global_model.spec
    work = global_model.copy()
    policy = RoutingPolicy.constant(spec.gate_dim, hyper.tau)
    model = DynamicPersonalizedModel(work, LocalParams.from_global(work), policy, "soft", GLOBAL)
    params = list(work.params.values())
    data = [tuple(s) for s in client.train] if client.kind == "sequence" else list(client.train)
    for _ in range(hyper.global_epochs):
        _run_pass(model, data, (GLOBAL,), params, hyper.lr_global, 0.0, hyper, rng)
    return ClientUpdate(len(client.train), work, client.client_id, {"mean_r1": 1.0})


def client_pre_inference(
    client: ClientDataset, global_model: GlobalModel, hyper: TrainHyper, seed
) -> DynamicPersonalizedModel:
    """Build the personalized model for inference: local finetuning and gate training only."""
    model, split, rng = _build(client, global_model, hyper, seed)
    train_policy_and_global(
        model,
        split.d_global,
        hyper.pre_epochs,
        hyper.lr_global,
        hyper.gamma,
        rng=rng,
        hyper=hyper,
        update_global=False,
    )
    return model.with_mode("hard")


class Client:
    """A federation participant.  Holds its data and settings, nothing learned."""

    def __init__(self, dataset: ClientDataset, hyper: TrainHyper, plain: bool = False):
        self.dataset = dataset
        self.hyper = hyper
        self.plain = plain

    @property
    def client_id(self) -> int:
        return self.dataset.client_id

    def train(self, global_model: GlobalModel, seed) -> ClientUpdate:
        fn = client_train_plain if self.plain else client_train
        return fn(self.dataset, global_model, self.hyper, seed)

    def pre_inference(self, global_model: GlobalModel, seed) -> DynamicPersonalizedModel:
        return client_pre_inference(self.dataset, global_model, self.hyper, seed)


# ------------------------------------------------------------------ inference


@dataclass
class Predictions:
    """Per-instance outputs of one model over a list of instances.

    For sequences each entry is an array over timesteps; for classification a
    length-1 array.
    """

    predicted: list
    labels: list
    p_true: list
    r1: list
    routes: list

    def correct(self) -> np.ndarray:
        return np.concatenate([p == y for p, y in zip(self.predicted, self.labels)])

    def accuracy(self) -> float:
        return float(self.correct().mean())


def predict(model: DynamicPersonalizedModel, instances: Sequence, batch_size: int = 64) -> Predictions:
    spec = model.spec
    out = Predictions([], [], [], [], [])
    for start in range(0, len(instances), batch_size):
        chunk = list(instances[start : start + batch_size])
        batch = make_batch(spec, chunk)
        fwd = forward_batch(Bound(model, Tape()), batch)
        logits = fwd.logits.value
        probs = ad.softmax_np(logits)
        rows = np.arange(logits.shape[0])
        p_true = probs[rows, batch.targets]
        pred = logits.argmax(axis=1)
        r1 = fwd.r1
        B = batch.size
        for i in range(B):
            if spec.sequential:
                L = len(chunk[i])
                idx = np.arange(L) * B + i
            else:
                idx = np.array([i])
            out.predicted.append(pred[idx])
            out.labels.append(batch.targets[idx])
            out.p_true.append(p_true[idx])
            out.r1.append(r1[idx])
            out.routes.append(np.where(r1[idx] > 0.5, GLOBAL, LOCAL))
    return out


def infer(model: DynamicPersonalizedModel, instance, soft: bool = False):
    """Predict one instance; returns ``(prediction, route_trace)``.

    Hard mode is the default.  ``soft=True`` runs the blended model instead and
    the trace then records which route the gate favoured.
    """
    if soft:
        model = model.with_mode("soft")
    elif model.mode != "hard":
        model = model.with_mode("hard")
    preds = predict(model, [instance])
    pred = preds.predicted[0]
    value = [int(v) for v in pred] if model.spec.sequential else int(pred[0])
    return value, [str(r) for r in preds.routes[0]]
