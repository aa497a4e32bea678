"""Encoders, shared decoder, routing gate and the dynamic personalized model.

A :class:`GlobalModel` owns the embedding (sequence tasks), encoder and
decoder parameters.  :class:`LocalParams` is a finetuned copy of the encoder
only.  :class:`DynamicPersonalizedModel` puts both encoders behind a two-way
temperature-softmax gate; route index 0 is the global encoder and index 1 the
local one.

Weights are stored ``[in, out]`` so every layer is ``x @ W + b``; the gate
weight keeps its ``[2, n_gate]`` layout and is transposed on the tape.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor, Var
from .errors import ParameterError, ShapeError, UsageError, VocabularyError

CHECKPOINT_FORMAT = "routefl.checkpoint"
CHECKPOINT_VERSION = 1

LOG_FLOOR = 1e-12
GLOBAL, LOCAL = "global", "local"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of one experiment.

    ``input_dim`` is the embedding width ``m`` for sequence tasks and the
    flattened feature size ``n`` for classification.  For sequence tasks the
    output classes are the data vocabulary and one extra embedding row is
    reserved as the begin-of-sequence token.
    """

    kind: str
    input_dim: int
    hidden_dim: int
    num_classes: int
    cell: str = "gru"
    encoder_hidden: tuple = ()
    decoder_hidden: tuple = ()
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in ("sequence", "classify"):
            raise ParameterError(f"unknown task kind {self.kind!r}")
        if self.cell not in ("gru", "rnn"):
            raise ParameterError(f"unknown recurrent cell {self.cell!r}")
        if self.activation not in ("tanh", "relu"):
            raise ParameterError(f"unknown activation {self.activation!r}")
        for name in ("input_dim", "hidden_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive")
        object.__setattr__(self, "encoder_hidden", tuple(self.encoder_hidden))
        object.__setattr__(self, "decoder_hidden", tuple(self.decoder_hidden))

    @property
    def sequential(self) -> bool:
        return self.kind == "sequence"

    @property
    def vocab_size(self) -> int:
        return self.num_classes

    @property
    def bos_id(self) -> int:
        return self.num_classes

    @property
    def embedding_rows(self) -> int:
        return self.num_classes + 1

    @property
    def gate_dim(self) -> int:
        if self.sequential:
            return self.input_dim + self.hidden_dim
        return self.input_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _encoder_shapes(spec: ModelSpec) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) for every encoder tensor."""
    d = spec.hidden_dim
    if spec.sequential:
        m = spec.input_dim
        if spec.cell == "gru":
            return [
                ("encoder.wx", (m, 3 * d), m),
                ("encoder.wh", (d, 3 * d), d),
                ("encoder.bx", (3 * d,), m),
                ("encoder.bh", (3 * d,), d),
            ]
        return [("encoder.wx", (m, d), m), ("encoder.wh", (d, d), d), ("encoder.b", (d,), m)]
    widths = [spec.input_dim, *spec.encoder_hidden, d]
    out = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        out += [(f"encoder.{i}.w", (a, b), a), (f"encoder.{i}.b", (b,), a)]
    return out


def _decoder_shapes(spec: ModelSpec) -> list[tuple[str, tuple, int]]:
    widths = [spec.hidden_dim, *spec.decoder_hidden, spec.num_classes]
    out = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        out += [(f"decoder.{i}.w", (a, b), a), (f"decoder.{i}.b", (b,), a)]
    return out


def fingerprint(params: dict[str, Parameter]) -> str:
    h = hashlib.sha256()
    for name, p in params.items():
        h.update(name.encode())
        h.update(repr(p.shape).encode())
        h.update(p.value.tobytes())
    return h.hexdigest()


class GlobalModel:
    """The server-held parameter set; the only state exchanged with clients."""

    def __init__(self, spec: ModelSpec, params: dict[str, Parameter]):
        self.spec = spec
        self.params = params
        expected = self.expected_shapes()
        if list(params) != list(expected):
            raise ShapeError(f"parameter names {list(params)} do not match {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: shape {params[name].shape} != {shape}")

    @classmethod
    def initialize(cls, spec: ModelSpec, rng: np.random.Generator) -> "GlobalModel":
        params = {}
        if spec.sequential:
            # N(0,1) embeddings; the fan-in rule would shrink inputs to ~1/sqrt(V).
            params["embedding"] = Parameter(
                Tensor(rng.standard_normal((spec.embedding_rows, spec.input_dim))), "embedding"
            )
        for name, shape, fan_in in _encoder_shapes(spec) + _decoder_shapes(spec):
            params[name] = Parameter(ad.uniform_init(rng, shape, fan_in), name)
        return cls(spec, params)

    def expected_shapes(self) -> dict[str, tuple]:
        out = {}
        if self.spec.sequential:
            out["embedding"] = (self.spec.embedding_rows, self.spec.input_dim)
        for name, shape, _ in _encoder_shapes(self.spec) + _decoder_shapes(self.spec):
            out[name] = shape
        return out

    def encoder(self) -> dict[str, Parameter]:
        return {k: v for k, v in self.params.items() if k.startswith("encoder.")}

    def decoder(self) -> dict[str, Parameter]:
        return {k: v for k, v in self.params.items() if k.startswith("decoder.")}

    def copy(self) -> "GlobalModel":
        return GlobalModel(self.spec, {k: p.copy() for k, p in self.params.items()})

    def tensors(self) -> dict[str, Tensor]:
        return {k: p.tensor for k, p in self.params.items()}

    @classmethod
    def from_tensors(cls, spec: ModelSpec, tensors: dict[str, Tensor]) -> "GlobalModel":
        return cls(spec, {k: Parameter(t, k) for k, t in tensors.items()})

    def num_params(self) -> int:
        return sum(p.tensor.size for p in self.params.values())

    def fingerprint(self) -> str:
        return fingerprint(self.params)

    def to_record(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "spec": self.spec.to_dict(),
            "params": {
                k: {"shape": list(p.shape), "values": p.tensor.values()} for k, p in self.params.items()
            },
        }

    @classmethod
    def from_record(cls, record: dict) -> "GlobalModel":
        if record.get("format") != CHECKPOINT_FORMAT:
            raise ShapeError("not a model checkpoint")
        if record.get("version") != CHECKPOINT_VERSION:
            raise ShapeError(f"unsupported checkpoint version {record.get('version')}")
        spec = ModelSpec.from_dict(record["spec"])
        tensors = {k: Tensor(v["values"], v["shape"]) for k, v in record["params"].items()}
        return cls.from_tensors(spec, tensors)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_record()))

    @classmethod
    def load(cls, path) -> "GlobalModel":
        return cls.from_record(json.loads(Path(path).read_text()))


@dataclass
class LocalParams:
    """Per-round finetuned encoder copy; never sent to the server."""

    encoder: dict[str, Parameter]
    warning: str | None = None

    @classmethod
    def from_global(cls, model: GlobalModel) -> "LocalParams":
        return cls({k: p.copy() for k, p in model.encoder().items()})

    def fingerprint(self) -> str:
        return fingerprint(self.encoder)


class RoutingPolicy:
    """Affine two-way gate followed by a temperature softmax."""

    def __init__(self, weight: Parameter, bias: Parameter, tau: float):
        if not tau > 0:
            raise ParameterError(f"temperature must be positive, got {tau}")
        if weight.shape[0] != 2 or bias.shape != (2,):
            raise ShapeError("gate weight must be [2, n] and bias [2]")
        self.weight = weight
        self.bias = bias
        self.tau = float(tau)

    @classmethod
    def initialize(cls, n_gate: int, tau: float, rng: np.random.Generator) -> "RoutingPolicy":
        w = Parameter(ad.uniform_init(rng, (2, n_gate), n_gate), "policy.w")
        b = Parameter(ad.uniform_init(rng, (2,), n_gate), "policy.b")
        return cls(w, b, tau)

    @classmethod
    def constant(cls, n_gate: int, tau: float, bias=(0.0, 0.0)) -> "RoutingPolicy":
        return cls(
            Parameter(Tensor(np.zeros((2, n_gate))), "policy.w"),
            Parameter(Tensor(np.array(bias, dtype=float)), "policy.b"),
            tau,
        )

    @property
    def n_gate(self) -> int:
        return self.weight.shape[1]

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def probs(self, gate_input: np.ndarray) -> np.ndarray:
        """Route probabilities for raw inputs, outside any tape."""
        logits = gate_input @ self.weight.value.T + self.bias.value
        return ad.softmax_np(logits, self.tau)

    def fingerprint(self) -> str:
        return fingerprint({"w": self.weight, "b": self.bias})


@dataclass
class DynamicPersonalizedModel:
    """Global encoder, local encoder and gate sharing one decoder.

    ``route`` forces every decision to one encoder (the global-route-only and
    local-route-only variants); ``None`` lets the gate decide.
    ``encoder_calls`` counts per-instance encoder evaluations.
    """

    global_model: GlobalModel
    local: LocalParams
    policy: RoutingPolicy
    mode: str = "soft"
    route: str | None = None
    encoder_calls: dict = field(default_factory=lambda: {GLOBAL: 0, LOCAL: 0})

    def __post_init__(self):
        if self.mode not in ("soft", "hard"):
            raise UsageError(f"unknown mode {self.mode!r}")
        if self.route not in (None, GLOBAL, LOCAL):
            raise UsageError(f"unknown forced route {self.route!r}")
        if self.policy.n_gate != self.spec.gate_dim:
            raise ShapeError(f"gate input size {self.policy.n_gate} != {self.spec.gate_dim}")

    @property
    def spec(self) -> ModelSpec:
        return self.global_model.spec

    def with_mode(self, mode: str, route: str | None = "keep") -> "DynamicPersonalizedModel":
        return DynamicPersonalizedModel(
            self.global_model,
            self.local,
            self.policy,
            mode,
            self.route if route == "keep" else route,
        )

    def reset_counters(self):
        self.encoder_calls = {GLOBAL: 0, LOCAL: 0}


# ------------------------------------------------------------- tape binding


class Bound:
    """Parameters of a personalized model bound to one tape.

    ``train`` names the groups that receive gradients: any of
    ``"policy"``, ``"global"``, ``"local"``.
    """

    def __init__(self, model: DynamicPersonalizedModel, tape: Tape, train: Sequence[str] = ()):
        unknown = set(train) - {"policy", GLOBAL, LOCAL}
        if unknown:
            raise UsageError(f"unknown parameter groups {sorted(unknown)}")
        self.model = model
        self.tape = tape
        g = GLOBAL in train
        gm = model.global_model
        self.embedding = tape.watch(gm.params["embedding"], g) if gm.spec.sequential else None
        self.genc = {k: tape.watch(p, g) for k, p in gm.encoder().items()}
        self.lenc = {k: tape.watch(p, LOCAL in train) for k, p in model.local.encoder.items()}
        self.dec = [tape.watch(p, g) for p in gm.decoder().values()]
        self.pw = tape.watch(model.policy.weight, "policy" in train)
        self.pb = tape.watch(model.policy.bias, "policy" in train)


def _act(spec: ModelSpec, x: Var) -> Var:
    return ad.tanh(x) if spec.activation == "tanh" else ad.relu(x)


def encoder_step(spec: ModelSpec, enc: dict[str, Var], h: Var, x: Var) -> Var:
    """One recurrent cell update ``f(h_prev, x_t)`` for a batch of rows."""
    if spec.cell == "rnn":
        pre = ad.affine(x, enc["encoder.wx"], enc["encoder.b"]) + ad.matmul(h, enc["encoder.wh"])
        return ad.tanh(pre)
    return ad.gru_cell(x, h, enc["encoder.wx"], enc["encoder.wh"], enc["encoder.bx"], enc["encoder.bh"])


def encoder_ff(spec: ModelSpec, enc: dict[str, Var], x: Var) -> Var:
    layers = len(spec.encoder_hidden) + 1
    for i in range(layers):
        x = _act(spec, ad.affine(x, enc[f"encoder.{i}.w"], enc[f"encoder.{i}.b"]))
    return x


def decode(spec: ModelSpec, dec: list[Var], h: Var) -> Var:
    n_layers = len(dec) // 2
    for i in range(n_layers):
        h = ad.affine(h, dec[2 * i], dec[2 * i + 1])
        if i < n_layers - 1:
            h = _act(spec, h)
    return h


def route_probs(b: Bound, gate_input: Var) -> Var:
    """Gate probabilities ``softmax_tau(theta_w @ g + theta_b)`` for a batch of gate inputs."""
    model = b.model
    rows = gate_input.value.shape[0]
    if model.route is not None:
        onehot = np.zeros((rows, 2))
        onehot[:, 0 if model.route == GLOBAL else 1] = 1.0
        return b.tape.constant(onehot)
    if gate_input.value.shape[1] != model.policy.n_gate:
        raise ShapeError(f"gate input width {gate_input.value.shape[1]} != {model.policy.n_gate}")
    logits = ad.add_bias(ad.matmul(gate_input, ad.transpose(b.pw)), b.pb)
    return ad.softmax_temperature(logits, model.policy.tau)


def route_probs_recurrent(policy: RoutingPolicy, x_t, h_prev) -> np.ndarray:
    """``r_t`` for one timestep from embedded token ``x_t`` and previous hidden state."""
    x_t, h_prev = np.asarray(x_t, float), np.asarray(h_prev, float)
    g = np.concatenate([x_t, h_prev])
    if g.shape[0] != policy.n_gate:
        raise ShapeError(f"[x_t; h_prev] has {g.shape[0]} entries, gate expects {policy.n_gate}")
    return policy.probs(g)


def route_probs_feedforward(policy: RoutingPolicy, x) -> np.ndarray:
    x = np.asarray(x, float).ravel()
    if x.shape[0] != policy.n_gate:
        raise ShapeError(f"input has {x.shape[0]} entries, gate expects {policy.n_gate}")
    return policy.probs(x)


def _count(model, route, rows):
    model.encoder_calls[route] += int(rows)


def _blend(b: Bound, r: Var, out_g: Var, out_l: Var) -> Var:
    return ad.mul_rows(out_g, ad.column(r, 0)) + ad.mul_rows(out_l, ad.column(r, 1))


def _soft(b: Bound, r: Var, run, active_rows):
    out_g = run(b.genc, None)
    out_l = run(b.lenc, None)
    _count(b.model, GLOBAL, active_rows)
    _count(b.model, LOCAL, active_rows)
    return _blend(b, r, out_g, out_l)


def _hard(b: Bound, r: Var, run, active):
    """Evaluate each row with exactly one encoder: global iff ``r1 > 0.5``."""
    take_global = r.value[:, 0] > 0.5
    gi = np.flatnonzero(take_global)
    li = np.flatnonzero(~take_global)
    out_g = run(b.genc, gi) if gi.size else None
    out_l = run(b.lenc, li) if li.size else None
    _count(b.model, GLOBAL, active[gi].sum())
    _count(b.model, LOCAL, active[li].sum())
    if out_l is None:
        return out_g
    if out_g is None:
        return out_l
    return ad.merge_rows(out_g, out_l, take_global)


def blended_step(b: Bound, h_prev: Var, x_t: Var, active=None) -> tuple[Var, Var]:
    """Soft recurrent update: convex blend of both encoders weighted by the gate."""
    if b.model.mode != "soft":
        raise UsageError("blended_step requires soft mode")
    spec = b.model.spec
    r = route_probs(b, ad.concat_cols([x_t, h_prev]))
    rows = h_prev.value.shape[0] if active is None else int(np.sum(active))

    def run(enc, idx):
        return encoder_step(spec, enc, h_prev, x_t)

    return _soft(b, r, run, rows), r


def hard_step(b: Bound, h_prev: Var, x_t: Var, active=None) -> tuple[Var, Var]:
    """Hard recurrent update; returns the new state and the (pre-threshold) gate output."""
    if b.model.mode != "hard":
        raise UsageError("hard_step requires hard mode")
    spec = b.model.spec
    r = route_probs(b, ad.concat_cols([x_t, h_prev]))
    active = np.ones(h_prev.value.shape[0], bool) if active is None else np.asarray(active, bool)

    def run(enc, idx):
        return encoder_step(spec, enc, ad.take_rows(h_prev, idx), ad.take_rows(x_t, idx))

    return _hard(b, r, run, active), r


def blended_encode(b: Bound, x: Var) -> tuple[Var, Var]:
    if b.model.mode != "soft":
        raise UsageError("blended_encode requires soft mode")
    spec = b.model.spec
    r = route_probs(b, x)

    def run(enc, idx):
        return encoder_ff(spec, enc, x)

    return _soft(b, r, run, x.value.shape[0]), r


def hard_encode(b: Bound, x: Var) -> tuple[Var, Var]:
    if b.model.mode != "hard":
        raise UsageError("hard_encode requires hard mode")
    spec = b.model.spec
    r = route_probs(b, x)

    def run(enc, idx):
        return encoder_ff(spec, enc, ad.take_rows(x, idx))

    return _hard(b, r, run, np.ones(x.value.shape[0], bool)), r


# ------------------------------------------------------------ batched forward


@dataclass
class Batch:
    """Padded model inputs for a list of instances.

    Sequence batches are time-major after flattening: row ``t * B + i`` is
    timestep ``t`` of instance ``i``.
    """

    kind: str
    size: int
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    steps: int = 1


def make_batch(spec: ModelSpec, instances: Sequence) -> Batch:
    if not instances:
        raise ShapeError("empty batch")
    if not spec.sequential:
        x = np.stack([np.asarray(inst[0], float).ravel() for inst in instances])
        if x.shape[1] != spec.input_dim:
            raise ShapeError(f"feature width {x.shape[1]} != {spec.input_dim}")
        y = np.array([int(inst[1]) for inst in instances])
        if y.min() < 0 or y.max() >= spec.num_classes:
            raise IndexError("label outside the class range")
        return Batch("classify", len(instances), x, y, np.ones(len(instances)))
    lengths = [len(s) for s in instances]
    if min(lengths) < 1:
        raise ShapeError("sequences must contain at least one token")
    steps = max(lengths)
    B = len(instances)
    inputs = np.full((B, steps), spec.bos_id, dtype=np.int64)
    targets = np.zeros((B, steps), dtype=np.int64)
    mask = np.zeros((B, steps))
    for i, seq in enumerate(instances):
        toks = np.asarray(seq, dtype=np.int64)
        if toks.min() < 0 or toks.max() >= spec.vocab_size:
            raise VocabularyError(f"token id outside [0, {spec.vocab_size})")
        inputs[i, 1 : len(toks)] = toks[:-1]
        targets[i, : len(toks)] = toks
        mask[i, : len(toks)] = 1.0
    # time-major flattening
    return Batch(
        "sequence", B, inputs, targets.T.reshape(-1), mask.T.reshape(-1), steps
    )


@dataclass
class Forward:
    logits: Var
    route: Var
    losses: Var
    batch: Batch

    @property
    def r1(self) -> np.ndarray:
        return self.route.value[:, 0]


def forward_batch(b: Bound, batch: Batch) -> Forward:
    """Run the personalized model (soft or hard per ``b.model.mode``) over a batch."""
    model = b.model
    spec = model.spec
    hard = model.mode == "hard"
    tape = b.tape
    if not spec.sequential:
        x = tape.constant(batch.inputs)
        feats, r = hard_encode(b, x) if hard else blended_encode(b, x)
        logits = decode(spec, b.dec, feats)
        return Forward(logits, r, ad.cross_entropy(logits, batch.targets), batch)
    B = batch.size
    step = hard_step if hard else blended_step
    h = tape.constant(np.zeros((B, spec.hidden_dim)))
    mask = batch.mask.reshape(batch.steps, B)
    hs, rs = [], []
    for t in range(batch.steps):
        x_t = ad.gather_rows(b.embedding, batch.inputs[:, t])
        h, r = step(b, h, x_t, mask[t] > 0)
        hs.append(h)
        rs.append(r)
    H = ad.stack_rows(hs) if len(hs) > 1 else hs[0]
    R = ad.stack_rows(rs) if len(rs) > 1 else rs[0]
    logits = decode(spec, b.dec, H)
    return Forward(logits, R, ad.cross_entropy(logits, batch.targets), batch)


def regularized_loss(losses: Var, r1: Var, gamma: float, mask=None) -> Var:
    """Mean over valid positions of ``loss - gamma * log(r1)``; ``r1`` is clamped at 1e-12."""
    if losses.value.shape != r1.value.shape:
        raise ShapeError("per-step losses and route probabilities must align")
    if gamma < 0:
        raise ParameterError("gamma must be non-negative")
    if gamma == 0:
        per_step = losses
    else:
        per_step = losses - gamma * ad.log_clamped(r1, LOG_FLOOR)
    if mask is None:
        return ad.mean(per_step)
    return ad.masked_mean(per_step, mask)


def batch_loss(b: Bound, batch: Batch, gamma: float) -> tuple[Var, Forward]:
    fwd = forward_batch(b, batch)
    return regularized_loss(fwd.losses, ad.column(fwd.route, 0), gamma, batch.mask), fwd


def forward_sequence(model: DynamicPersonalizedModel, tokens: Sequence[int], mode: str | None = None):
    """Per-step next-token logits and global-route probabilities for one sequence.

    Step ``t`` consumes the previous token (a begin-of-sequence marker at
    ``t = 0``) and predicts ``tokens[t]``.
    """
    if mode is not None and mode != model.mode:
        model = model.with_mode(mode)
    spec = model.spec
    if not spec.sequential:
        raise UsageError("forward_sequence needs a sequence model")
    tape = Tape()
    fwd = forward_batch(Bound(model, tape), make_batch(spec, [list(tokens)]))
    return [row.copy() for row in fwd.logits.value], fwd.r1.tolist()


# ------------------------------------------------------------------ counting


def param_counts(model: DynamicPersonalizedModel) -> dict[str, int]:
    gm = model.global_model
    return {
        "global": gm.num_params(),
        "local": sum(p.tensor.size for p in model.local.encoder.values()),
        "policy": 2 * model.policy.n_gate + 2,
    }
