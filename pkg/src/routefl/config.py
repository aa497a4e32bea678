"""Experiment configuration: YAML loading, schema validation and overrides.

Every section maps onto a dataclass.  Unknown keys and badly typed values are
rejected with the line number of the offending key.
"""

from __future__ import annotations

import copy
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .client import TrainHyper
from .data import ClassifyTaskSpec, SequenceTaskSpec
from .errors import ConfigError, RouteFLError
from .model import ModelSpec
from .server import FederationConfig

VARIANTS = ("flow", "global_only", "local_only", "fedavg_plain")
SWEEP_AXES = {
    "gamma": ("train", "gamma"),
    "local_epochs": ("train", "local_epochs"),
    "tau": ("train", "tau"),
    "lambda": ("task", "heterogeneity"),
}


@dataclass
class ModelSection:
    input_dim: int = 16
    hidden_dim: int = 16
    cell: str = "gru"
    encoder_hidden: tuple = ()
    decoder_hidden: tuple = ()
    activation: str = "tanh"


@dataclass
class FederationSection:
    rounds: int = 50
    clients_per_round: int = 10
    eval_every: int = 0
    eval_clients: int | None = None
    eval_split: str = "valid"
    workers: int = 1
    failure_policy: str = "drop-client"
    checkpoint_every: int = 0


@dataclass
class EvalSection:
    clients: int | None = None
    split: str = "test"
    soft: bool = False


@dataclass
class SweepSection:
    axis: str = "gamma"
    values: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    name: str
    task: SequenceTaskSpec | ClassifyTaskSpec
    model: ModelSection
    train: TrainHyper
    federation: FederationSection
    eval: EvalSection
    variant: str = "flow"
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    data_seed: int | None = None
    data_file: str | None = None
    sweep: SweepSection | None = None

    @property
    def eval_clients(self) -> int:
        """Clients sampled for final evaluation; defaults to up to 20."""
        if self.eval.clients is not None:
            return self.eval.clients
        return min(20, self.task.num_clients)

    @property
    def kind(self) -> str:
        return "sequence" if isinstance(self.task, SequenceTaskSpec) else "classify"

    def model_spec(self) -> ModelSpec:
        m = self.model
        if self.kind == "sequence":
            input_dim, classes = m.input_dim, self.task.vocab_size
        else:
            input_dim, classes = self.task.input_dim, self.task.num_classes
        return ModelSpec(
            kind=self.kind,
            input_dim=input_dim,
            hidden_dim=m.hidden_dim,
            num_classes=classes,
            cell=m.cell,
            encoder_hidden=m.encoder_hidden,
            decoder_hidden=m.decoder_hidden,
            activation=m.activation,
        )

    def task_for_seed(self, seed: int):
        """Data generator settings for one run: ``data_seed`` if set, else the run seed."""
        data_seed = self.data_seed if self.data_seed is not None else seed
        return dataclasses.replace(self.task, seed=int(data_seed))

    def federation_config(self, seed: int) -> FederationConfig:
        f = self.federation
        return FederationConfig(
            rounds=f.rounds,
            clients_per_round=f.clients_per_round,
            seed=int(seed),
            eval_every=f.eval_every,
            eval_clients=f.eval_clients if f.eval_clients is not None else min(10, self.task.num_clients),
            eval_split=f.eval_split,
            workers=f.workers,
            failure_policy=f.failure_policy,
            variant=self.variant,
            checkpoint_every=f.checkpoint_every,
        )

    def to_dict(self) -> dict:
        task = dataclasses.asdict(self.task)
        task.pop("seed")
        out = {
            "name": self.name,
            "task": {"kind": self.kind, **task},
            "model": _plain(dataclasses.asdict(self.model)),
            "train": dataclasses.asdict(self.train),
            "federation": dataclasses.asdict(self.federation),
            "eval": dataclasses.asdict(self.eval),
            "variant": self.variant,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "data_seed": self.data_seed,
            "data_file": self.data_file,
        }
        if self.sweep is not None:
            out["sweep"] = dataclasses.asdict(self.sweep)
        return out


def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_plain(v) for v in d]
    return d


# ------------------------------------------------------------------ loading


def _compose(text: str, source: str):
    """Parse YAML into plain Python values plus a ``{key path: line}`` map."""
    loader = yaml.SafeLoader(text)
    try:
        node = loader.get_single_node()
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise ConfigError(f"{source}: {exc.problem}", line=line) from None
    finally:
        loader.dispose()
    lines: dict[tuple, int] = {}

    def walk(n, path):
        if isinstance(n, yaml.MappingNode):
            out = {}
            for k, v in n.value:
                key = loader.construct_object(k, deep=True)
                lines[path + (key,)] = k.start_mark.line + 1
                out[key] = walk(v, path + (key,))
            return out
        if isinstance(n, yaml.SequenceNode):
            return [walk(v, path) for v in n.value]
        return loader.construct_object(n, deep=True)

    if node is None:
        return {}, lines
    return walk(node, ()), lines


def _check_type(value, hint, where, line):
    """Coerce ``value`` to the annotated field type or raise a config error."""
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _check_type(value, a, where, line)
            except ConfigError as exc:
                errors.append(exc)
        raise errors[0]
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    elif hint in (tuple, list) or origin in (tuple, list):
        if isinstance(value, (list, tuple)):
            return tuple(value) if (hint is tuple or origin is tuple) else list(value)
    else:
        return value
    name = getattr(hint, "__name__", str(hint))
    raise ConfigError(f"{where}: expected {name}, got {value!r}", line=line)


def _build(cls, raw, path, lines, skip=()):
    """Instantiate dataclass ``cls`` from mapping ``raw``, rejecting unknown keys."""
    where = ".".join(path) or "config"
    line = lines.get(path)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping", line=line)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        key_line = lines.get(path + (key,), line)
        if key in skip:
            continue
        if key not in names:
            raise ConfigError(f"{where}: unknown key {key!r}", line=key_line)
        kwargs[key] = _check_type(value, hints[key], f"{where}.{key}", key_line)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (RouteFLError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}", line=line) from None


def from_dict(raw: dict, lines: dict | None = None) -> ExperimentConfig:
    lines = lines or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    top = {"name", "task", "model", "train", "federation", "eval", "variant", "seeds",
           "output_dir", "data_seed", "data_file", "sweep"}
    for key in raw:
        if key not in top:
            raise ConfigError(f"unknown key {key!r}", line=lines.get((key,)))
    task_raw = raw.get("task")
    if not isinstance(task_raw, dict) or "kind" not in task_raw:
        raise ConfigError("task: a mapping with a 'kind' key is required", line=lines.get(("task",)))
    kind = task_raw["kind"]
    if kind not in ("sequence", "classify"):
        raise ConfigError(f"task.kind: unknown kind {kind!r}", line=lines.get(("task", "kind")))
    if "seed" in task_raw:
        raise ConfigError("task.seed: set data_seed or seeds instead", line=lines.get(("task", "seed")))
    task_cls = SequenceTaskSpec if kind == "sequence" else ClassifyTaskSpec
    task = _build(task_cls, task_raw, ("task",), lines, skip=("kind",))
    try:
        task.validate()
    except ConfigError as exc:
        raise ConfigError(f"task: {exc}", line=lines.get(("task",))) from None

    train_raw = dict(raw.get("train") or {})
    train_defaults = dataclasses.asdict(TrainHyper.for_task(kind))
    for key in list(train_raw):
        train_defaults.pop(key, None)
    train = _build(TrainHyper, {**train_defaults, **train_raw}, ("train",), lines)

    name = raw.get("name", "experiment")
    if not isinstance(name, str) or not name or "/" in name:
        raise ConfigError("name: expected a non-empty string without '/'", line=lines.get(("name",)))
    variant = raw.get("variant", "flow")
    if variant not in VARIANTS:
        raise ConfigError(f"variant: expected one of {VARIANTS}, got {variant!r}", line=lines.get(("variant",)))
    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if (
        not isinstance(seeds, list)
        or not seeds
        or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds)
        or len(set(seeds)) != len(seeds)
    ):
        raise ConfigError("seeds: expected a non-empty list of distinct non-negative integers",
                          line=lines.get(("seeds",)))
    cfg = ExperimentConfig(
        name=name,
        task=task,
        model=_build(ModelSection, raw.get("model"), ("model",), lines),
        train=train,
        federation=_build(FederationSection, raw.get("federation"), ("federation",), lines),
        eval=_build(EvalSection, raw.get("eval"), ("eval",), lines),
        variant=variant,
        seeds=list(seeds),
        output_dir=_check_type(raw.get("output_dir", "runs"), str, "output_dir", lines.get(("output_dir",))),
        data_seed=_check_type(raw.get("data_seed"), int | None, "data_seed", lines.get(("data_seed",))),
        data_file=_check_type(raw.get("data_file"), str | None, "data_file", lines.get(("data_file",))),
        sweep=_build(SweepSection, raw["sweep"], ("sweep",), lines) if raw.get("sweep") is not None else None,
    )
    _validate(cfg, lines)
    return cfg


def _validate(cfg: ExperimentConfig, lines: dict):
    try:
        cfg.model_spec()
    except RouteFLError as exc:
        raise ConfigError(f"model: {exc}", line=lines.get(("model",))) from None
    population = cfg.task.num_clients
    fed = cfg.federation
    try:
        cfg.federation_config(0).validate(population)
    except ConfigError as exc:
        raise ConfigError(f"federation: {exc}", line=lines.get(("federation",))) from None
    if fed.rounds < 1:
        raise ConfigError("federation.rounds must be at least 1", line=lines.get(("federation", "rounds")))
    if fed.checkpoint_every < 0 or fed.eval_every < 0:
        raise ConfigError("federation: cadences must be non-negative", line=lines.get(("federation",)))
    if not 1 <= cfg.eval_clients <= population:
        raise ConfigError(f"eval.clients must lie in [1, {population}]", line=lines.get(("eval", "clients")))
    if cfg.eval.split not in ("valid", "test"):
        raise ConfigError("eval.split must be 'valid' or 'test'", line=lines.get(("eval", "split")))
    if cfg.sweep is not None:
        check_sweep(cfg, cfg.sweep.axis, cfg.sweep.values, lines.get(("sweep",)))


def check_sweep(cfg: ExperimentConfig, axis: str, values, line=None):
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep.axis: expected one of {sorted(SWEEP_AXES)}, got {axis!r}", line=line)
    if not values:
        raise ConfigError("sweep.values: the sweep axis is empty", line=line)
    if axis == "lambda" and cfg.kind != "sequence":
        raise ConfigError("sweep axis 'lambda' needs a sequence task", line=line)
    if len(set(map(str, values))) != len(values):
        raise ConfigError("sweep.values: duplicate values", line=line)
    for v in values:
        apply_axis(cfg, axis, v)


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """Copy of ``cfg`` with one sweep axis set to ``value``."""
    section, key = SWEEP_AXES[axis]
    d = cfg.to_dict()
    d.pop("sweep", None)
    d[section][key] = value
    return from_dict(d)


def parse_override(text: str) -> tuple[tuple, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, value = text.split("=", 1)
    path = tuple(p for p in key.strip().split(".") if p)
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        parsed = yaml.safe_load(value) if value.strip() else None
    except yaml.YAMLError:
        raise ConfigError(f"override {text!r}: value is not valid YAML") from None
    return path, parsed


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for text in overrides or ():
        path, value = parse_override(text)
        node = raw
        for p in path[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {text!r}: {p!r} is not a section")
            node = nxt
        node[path[-1]] = value
    return raw


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    raw, lines = _compose(text, str(path))
    if overrides:
        raw = apply_overrides(raw, overrides)
    return from_dict(raw, lines)


def loads_config(text: str, overrides=()) -> ExperimentConfig:
    raw, lines = _compose(text, "<string>")
    if overrides:
        raw = apply_overrides(raw, overrides)
    return from_dict(raw, lines)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
