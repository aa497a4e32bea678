"""Synthetic heterogeneous federations with known generating distributions.

Sequence clients emit Markov-chain text.  Client ``c`` samples from
``(1 - lam) * P_global + lam * P_client[c]`` where ``P_client[c]`` replaces a
client-specific subset of the global rows ("style" tokens) with sharp
client-specific transitions and keeps the remaining rows global.  The size of
that subset varies across clients, which spreads client divergence out.

Classification clients draw labels from ``Dirichlet(alpha)`` proportions and
features from class-conditional Gaussians.  Each client also has a mean shift
that applies to its own subset of style classes, again of varying size; the
other classes follow the shared class-conditional law.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .client import ClientDataset
from .errors import ConfigError

DATASET_FORMAT = "routefl.dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class SequenceTaskSpec:
    vocab_size: int = 24
    max_seq_len: int = 12
    min_seq_len: int = 6
    num_clients: int = 30
    min_instances: int = 30
    max_instances: int = 60
    heterogeneity: float = 0.6
    global_concentration: float = 0.5
    client_concentration: float = 0.05
    min_style_fraction: float = 0.1
    max_style_fraction: float = 0.9
    seed: int = 0

    def validate(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if not 1 <= self.min_seq_len <= self.max_seq_len:
            raise ConfigError("need 1 <= min_seq_len <= max_seq_len")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ConfigError("need 1 <= min_instances <= max_instances")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be positive")
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise ConfigError("heterogeneity must lie in [0, 1]")
        if self.global_concentration <= 0 or self.client_concentration <= 0:
            raise ConfigError("Dirichlet concentrations must be positive")
        if not 0.0 <= self.min_style_fraction <= self.max_style_fraction <= 1.0:
            raise ConfigError("style fractions must satisfy 0 <= min <= max <= 1")


@dataclass(frozen=True)
class ClassifyTaskSpec:
    input_dim: int = 16
    num_classes: int = 8
    num_clients: int = 30
    min_instances: int = 40
    max_instances: int = 80
    alpha: float = 0.3
    shift: float = 1.5
    class_separation: float = 1.5
    noise: float = 1.0
    min_style_fraction: float = 0.0
    max_style_fraction: float = 1.0
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.input_dim < 1 or self.num_clients < 1:
            raise ConfigError("input_dim and num_clients must be positive")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ConfigError("need 1 <= min_instances <= max_instances")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.noise <= 0:
            raise ConfigError("noise must be positive")
        if not 0.0 <= self.min_style_fraction <= self.max_style_fraction <= 1.0:
            raise ConfigError("style fractions must satisfy 0 <= min <= max <= 1")


def split_811(items: list, rng: np.random.Generator):
    """Shuffle and cut into train/valid/test at 8:1:1 (valid and test get at least one
    instance when there are three or more)."""
    n = len(items)
    order = rng.permutation(n)
    n_hold = int(round(0.1 * n))
    if n >= 3:
        n_hold = max(1, n_hold)
    n_train = n - 2 * n_hold
    pick = [items[i] for i in order]
    return pick[:n_train], pick[n_train : n_train + n_hold], pick[n_train + n_hold :]


# ------------------------------------------------------------------ sequences


def stationary(P: np.ndarray) -> np.ndarray:
    n = P.shape[0]
    A = np.vstack([P.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi = np.linalg.lstsq(A, b, rcond=None)[0]
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def markov_kl_rate(P_client: np.ndarray, P_global: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Per-step KL divergence ``sum_i w_i KL(P_client[i] || P_global[i])``.

    ``weights`` defaults to the stationary distribution of ``P_client``.
    """
    P_client = np.asarray(P_client, float)
    P_global = np.asarray(P_global, float)
    w = stationary(P_client) if weights is None else np.asarray(weights, float)
    live = P_client > 0
    ratio = np.where(live, P_client / np.where(live, P_global, 1.0), 1.0)
    rows = np.where(live, P_client * np.log(ratio), 0.0).sum(axis=1)
    return float(np.dot(w, rows))


@lru_cache(maxsize=32)
def sequence_chains(spec: SequenceTaskSpec):
    """Ground-truth ``(P_global, [P_client per client], [style rows per client])``."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 101]))
    V = spec.vocab_size
    P_global = rng.dirichlet(np.full(V, spec.global_concentration), size=V)
    P_global = np.maximum(P_global, 1e-12)
    P_global /= P_global.sum(axis=1, keepdims=True)
    clients, styles = [], []
    for _ in range(spec.num_clients):
        frac = rng.uniform(spec.min_style_fraction, spec.max_style_fraction)
        n_style = int(round(frac * V))
        rows = np.sort(rng.choice(V, size=n_style, replace=False))
        P = P_global.copy()
        if n_style:
            P[rows] = rng.dirichlet(np.full(V, spec.client_concentration), size=n_style)
        clients.append(P)
        styles.append(rows)
    return P_global, clients, styles


def client_transition(spec: SequenceTaskSpec, client_id: int) -> np.ndarray:
    P_global, clients, _ = sequence_chains(spec)
    if not 0 <= client_id < len(clients):
        raise KeyError(f"unknown client {client_id}")
    lam = spec.heterogeneity
    return (1.0 - lam) * P_global + lam * clients[client_id]


def sample_chain(P: np.ndarray, lengths, rng: np.random.Generator) -> list:
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    start = np.cumsum(stationary(P))
    start[-1] = 1.0
    out = []
    for L in lengths:
        toks = np.empty(L, dtype=np.int64)
        u = rng.random(L)
        toks[0] = np.searchsorted(start, u[0], side="right")
        for t in range(1, L):
            toks[t] = np.searchsorted(cum[toks[t - 1]], u[t], side="right")
        out.append(tuple(int(v) for v in toks))
    return out


def generate_sequence_federation(spec: SequenceTaskSpec) -> list[ClientDataset]:
    spec.validate()
    sequence_chains(spec)
    clients = []
    for cid in range(spec.num_clients):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 202, cid]))
        n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
        lengths = rng.integers(spec.min_seq_len, spec.max_seq_len + 1, size=n)
        seqs = sample_chain(client_transition(spec, cid), lengths, rng)
        train, valid, test = split_811(seqs, rng)
        clients.append(ClientDataset(cid, "sequence", train, valid, test))
    return clients


# ------------------------------------------------------------- classification


@lru_cache(maxsize=32)
def classify_truth(spec: ClassifyTaskSpec):
    """Ground-truth ``(class_means, [label proportions], [per-class shift matrices])``.

    Row ``y`` of a client's shift matrix is its feature offset for class ``y``:
    the client shift vector for style classes and zero otherwise.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 303]))
    K, n = spec.num_classes, spec.input_dim
    means = rng.standard_normal((K, n)) * spec.class_separation
    props, shifts = [], []
    for _ in range(spec.num_clients):
        p = rng.dirichlet(np.full(K, spec.alpha))
        p = np.maximum(p, 1e-300)
        props.append(p / p.sum())
        direction = rng.standard_normal(n)
        direction *= spec.shift / np.linalg.norm(direction)
        frac = rng.uniform(spec.min_style_fraction, spec.max_style_fraction)
        styled = rng.choice(K, size=int(round(frac * K)), replace=False)
        offsets = np.zeros((K, n))
        offsets[styled] = direction
        shifts.append(offsets)
    return means, props, shifts


def generate_classify_federation(spec: ClassifyTaskSpec) -> list[ClientDataset]:
    spec.validate()
    means, props, shifts = classify_truth(spec)
    clients = []
    for cid in range(spec.num_clients):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 404, cid]))
        n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
        labels = rng.choice(spec.num_classes, size=n, p=props[cid])
        feats = means[labels] + shifts[cid][labels] + spec.noise * rng.standard_normal((n, spec.input_dim))
        items = [(feats[i], int(labels[i])) for i in range(n)]
        train, valid, test = split_811(items, rng)
        clients.append(ClientDataset(cid, "classify", train, valid, test))
    return clients


# ------------------------------------------------------------------ divergence


def true_client_divergence(spec, client_id: int) -> float:
    """Exact KL between a client's generating distribution and the global one.

    Sequence tasks: per-step KL rate of the client chain against the global
    chain under the client's stationary distribution.  Classification: KL of
    the joint ``(x, y)`` law against uniform labels with unshifted features,
    i.e. ``KL(p_c || uniform) + sum_y p_c(y) |offset_y|^2 / (2 noise^2)``.
    """
    if isinstance(spec, SequenceTaskSpec):
        P_global, clients, _ = sequence_chains(spec)
        if not 0 <= client_id < len(clients):
            raise KeyError(f"unknown client {client_id}")
        return markov_kl_rate(client_transition(spec, client_id), P_global)
    means, props, shifts = classify_truth(spec)
    if not 0 <= client_id < len(props):
        raise KeyError(f"unknown client {client_id}")
    p = props[client_id]
    k = spec.num_classes
    label_kl = float(np.sum(p * np.log(p * k)))
    offsets = shifts[client_id]
    feature_kl = float(np.sum(p * np.einsum("ij,ij->i", offsets, offsets))) / (2.0 * spec.noise**2)
    return label_kl + feature_kl


def task_spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "sequence":
        return SequenceTaskSpec(**d)
    if kind == "classify":
        return ClassifyTaskSpec(**d)
    raise ConfigError(f"unknown task kind {kind!r}")


def task_spec_to_dict(spec) -> dict:
    kind = "sequence" if isinstance(spec, SequenceTaskSpec) else "classify"
    return {"kind": kind, **asdict(spec)}


def generate_federation(spec) -> list[ClientDataset]:
    if isinstance(spec, SequenceTaskSpec):
        return generate_sequence_federation(spec)
    return generate_classify_federation(spec)


# ---------------------------------------------------------------- persistence


def write_federation(path, clients: list[ClientDataset], task=None) -> None:
    """One JSON header line, then one JSON record per instance.

    Records: ``{"client": id, "split": "train"|"valid"|"test", "tokens": [...]}`` for
    sequences or ``{"client": id, "split": ..., "x": [...], "y": label}`` for
    classification.
    """
    kind = clients[0].kind if clients else "sequence"
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "kind": kind}
    if task is not None:
        header["task"] = task_spec_to_dict(task)
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for c in clients:
            for split in ("train", "valid", "test"):
                for inst in getattr(c, split):
                    rec = {"client": c.client_id, "split": split}
                    if kind == "sequence":
                        rec["tokens"] = list(inst)
                    else:
                        rec["x"] = np.asarray(inst[0]).tolist()
                        rec["y"] = int(inst[1])
                    fh.write(json.dumps(rec) + "\n")


def read_federation(path) -> list[ClientDataset]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ConfigError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise ConfigError(f"{path}: not a version {DATASET_VERSION} dataset file", line=1)
    kind = header["kind"]
    clients: dict[int, ClientDataset] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        rec = json.loads(line)
        cid = int(rec["client"])
        c = clients.setdefault(cid, ClientDataset(cid, kind, [], [], []))
        if kind == "sequence":
            inst = tuple(int(t) for t in rec["tokens"])
        else:
            inst = (np.asarray(rec["x"], dtype=np.float64), int(rec["y"]))
        if rec["split"] not in ("train", "valid", "test"):
            raise ConfigError(f"{path}: unknown split {rec['split']!r}", line=lineno)
        getattr(c, rec["split"]).append(inst)
    return [clients[k] for k in sorted(clients)]
