"""Accuracy, the model-based KL heterogeneity estimate, routing statistics and
client/instance comparison counts."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .client import ClientDataset, Predictions, TrainHyper, client_pre_inference, predict
from .errors import MetricError
from .model import GLOBAL, LOCAL, DynamicPersonalizedModel, GlobalModel

PROB_FLOOR = 1e-12


def accuracy(model: DynamicPersonalizedModel, instances: Sequence) -> float:
    """Per-token next-token accuracy (sequences) or per-instance accuracy."""
    if not instances:
        raise MetricError("accuracy over an empty instance list")
    return predict(model, instances).accuracy()


def kl_terms(p_local: np.ndarray, p_global: np.ndarray) -> np.ndarray:
    pl = np.clip(np.asarray(p_local, float), PROB_FLOOR, 1.0)
    pg = np.clip(np.asarray(p_global, float), PROB_FLOOR, 1.0)
    return pl * np.log(pl / pg)


@dataclass
class KLEstimate:
    value: float
    raw: float
    count: int
    clamped: bool

    @property
    def per_instance(self) -> float:
        return self.value / self.count if self.count else 0.0


def kl_estimate_detail(model: DynamicPersonalizedModel, instances: Sequence) -> KLEstimate:
    """Sum over (x, y) of ``p_l log(p_l / p_g)`` using each route's probability of the true label.

    The sum can be negative since it is not a normalized divergence; negative
    totals are reported as 0 with ``clamped`` set.
    """
    p_l = np.concatenate(predict(model.with_mode("hard", LOCAL), instances).p_true)
    p_g = np.concatenate(predict(model.with_mode("hard", GLOBAL), instances).p_true)
    raw = float(math.fsum(kl_terms(p_l, p_g)))
    return KLEstimate(max(raw, 0.0), raw, int(p_l.size), raw < 0)


def kl_estimate(model: DynamicPersonalizedModel, instances: Sequence) -> float:
    return kl_estimate_detail(model, instances).value


@dataclass
class RoutingStats:
    mean_r_local: list
    std_r_local: list
    n_local: int
    n_global: int
    local_fraction_per_instance: list = field(default_factory=list)

    @property
    def local_fraction(self) -> float:
        n = self.n_local + self.n_global
        return self.n_local / n if n else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["local_fraction"] = self.local_fraction
        return d


def routing_stats_from(preds: Predictions) -> RoutingStats:
    """Per-timestep mean/std of the local-route probability and local/global instance counts.

    An instance counts as locally routed when strictly more than half of its
    hard decisions took the local route.
    """
    steps = max(len(r) for r in preds.r1)
    mean, std = [], []
    for t in range(steps):
        r2 = np.array([1.0 - r[t] for r in preds.r1 if len(r) > t])
        mean.append(float(r2.mean()))
        std.append(float(r2.std()))
    fractions = [float(np.mean(routes == LOCAL)) for routes in preds.routes]
    n_local = sum(1 for f in fractions if f > 0.5)
    return RoutingStats(mean, std, n_local, len(fractions) - n_local, fractions)


def routing_stats(model: DynamicPersonalizedModel, instances: Sequence) -> RoutingStats:
    if model.mode != "hard":
        model = model.with_mode("hard")
    return routing_stats_from(predict(model, instances))


@dataclass
class ComparisonStats:
    c_pct: float
    i_pct: float
    clients: int
    instances: int


def comparison_from_correct(pairs: Sequence[tuple]) -> ComparisonStats:
    """``pairs`` holds one ``(personal_correct, local_correct)`` boolean array pair per client.

    C% counts clients whose personalized accuracy is strictly above local
    accuracy.  I% pools instances over clients: local right, personalized wrong.
    """
    if not pairs:
        raise MetricError("no clients to compare")
    better = bad = total = 0
    for personal, local in pairs:
        personal = np.asarray(personal, bool)
        local = np.asarray(local, bool)
        if personal.mean() > local.mean():
            better += 1
        bad += int(np.sum(local & ~personal))
        total += personal.size
    return ComparisonStats(100.0 * better / len(pairs), 100.0 * bad / total, len(pairs), total)


def comparison_stats(
    eval_clients: Sequence[ClientDataset],
    global_model: GlobalModel,
    hyper: TrainHyper,
    seed_for: Callable,
    route: str | None = None,
    split: str = "test",
) -> ComparisonStats:
    """Personalized (optionally with a forced ``route``) versus local-route-only model per client."""
    pairs = []
    for c in eval_clients:
        wp = client_pre_inference(c, global_model, hyper, seed_for(c.client_id))
        data = getattr(c, split)
        personal = predict(wp.with_mode("hard", route), data).correct()
        local = predict(wp.with_mode("hard", LOCAL), data).correct()
        pairs.append((personal, local))
    return comparison_from_correct(pairs)


def spearman(x: Sequence[float], y: Sequence[float]) -> float | None:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.size != y.size:
        raise MetricError("series lengths differ")
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(stats.spearmanr(x, y).statistic)


def divergence_routing_correlation(divergences, local_fractions, min_clients: int = 10) -> float | None:
    """Spearman rank correlation of client divergence against locally routed fraction.

    ``None`` when either series is constant.
    """
    if len(divergences) < min_clients:
        raise MetricError(f"need at least {min_clients} clients, got {len(divergences)}")
    return spearman(divergences, local_fractions)


# ------------------------------------------------------------ client evaluation


def evaluate_client(
    client: ClientDataset,
    global_model: GlobalModel,
    hyper: TrainHyper,
    seed,
    split: str = "test",
    soft: bool = False,
) -> dict:
    """Pre-inference plus every evaluation view of one client.

    Reports hard personalized, global-route-only and local-route-only accuracy,
    comparison counts against the local route, routing statistics on the
    evaluation split and the KL estimate on the training split.
    """
    data = getattr(client, split)
    wp = client_pre_inference(client, global_model, hyper, seed)
    flow = predict(wp, data)
    calls_hard = sum(wp.encoder_calls.values())
    glob = predict(wp.with_mode("hard", GLOBAL), data)
    loc = predict(wp.with_mode("hard", LOCAL), data)
    c_flow, c_glob, c_loc = flow.correct(), glob.correct(), loc.correct()
    routing = routing_stats_from(flow)
    kl = kl_estimate_detail(wp, client.train) if client.train else KLEstimate(0.0, 0.0, 0, False)
    out = {
        "client_id": int(client.client_id),
        "instances": int(c_flow.size),
        "acc_flow": float(c_flow.mean()),
        "acc_global": float(c_glob.mean()),
        "acc_local": float(c_loc.mean()),
        "bad_flow": int(np.sum(c_loc & ~c_flow)),
        "bad_global": int(np.sum(c_loc & ~c_glob)),
        "kl": kl.value,
        "kl_raw": kl.raw,
        "kl_count": kl.count,
        "kl_clamped": kl.clamped,
        "local_fraction": routing.local_fraction,
        "decision_local_fraction": float(np.mean(np.concatenate(flow.routes) == LOCAL)),
        "mean_r1": float(np.mean(np.concatenate(flow.r1))),
        "n_local": routing.n_local,
        "n_global": routing.n_global,
        "mean_r_local": routing.mean_r_local,
        "std_r_local": routing.std_r_local,
        "encoder_calls_hard": int(calls_hard),
    }
    if soft:
        soft_model = wp.with_mode("soft")
        c_soft = predict(soft_model, data).correct()
        out["acc_soft"] = float(c_soft.mean())
        out["encoder_calls_soft"] = int(sum(soft_model.encoder_calls.values()))
    return out


def summarize(per_client: Sequence[dict]) -> dict:
    """Instance-weighted accuracies, C%/I% and correlations over evaluated clients."""
    if not per_client:
        raise MetricError("no evaluated clients")
    n = np.array([c["instances"] for c in per_client], float)
    total = n.sum()

    def pooled(key):
        return float(np.sum(n * np.array([c[key] for c in per_client])) / total)

    out = {
        "clients": len(per_client),
        "instances": int(total),
        "acc_flow": pooled("acc_flow"),
        "acc_global": pooled("acc_global"),
        "acc_local": pooled("acc_local"),
        "c_pct_flow": 100.0 * float(np.mean([c["acc_flow"] > c["acc_local"] for c in per_client])),
        "c_pct_global": 100.0 * float(np.mean([c["acc_global"] > c["acc_local"] for c in per_client])),
        "i_pct_flow": 100.0 * float(sum(c["bad_flow"] for c in per_client) / total),
        "i_pct_global": 100.0 * float(sum(c["bad_global"] for c in per_client) / total),
        "mean_r1": float(np.mean([c["mean_r1"] for c in per_client])),
        "local_fraction": float(np.mean([c["local_fraction"] for c in per_client])),
        "kl_mean": float(np.mean([c["kl"] for c in per_client])),
    }
    if all("acc_soft" in c for c in per_client):
        out["acc_soft"] = pooled("acc_soft")
        out["encoder_calls_soft"] = int(sum(c["encoder_calls_soft"] for c in per_client))
        out["encoder_calls_hard"] = int(sum(c["encoder_calls_hard"] for c in per_client))
    if len(per_client) >= 10:
        per_inst = [c["kl"] / c["kl_count"] if c["kl_count"] else 0.0 for c in per_client]
        frac = [c["local_fraction"] for c in per_client]
        out["rho_kl_local"] = spearman(per_inst, frac)
        if all("true_divergence" in c for c in per_client):
            out["rho_true_local"] = spearman([c["true_divergence"] for c in per_client], frac)
    return out


def evaluate_clients(
    clients: Sequence[ClientDataset],
    global_model: GlobalModel,
    hyper: TrainHyper,
    seed_for: Callable,
    split: str = "test",
    soft: bool = False,
    truth: Callable | None = None,
) -> dict:
    per_client = []
    for c in clients:
        rec = evaluate_client(c, global_model, hyper, seed_for(c.client_id), split, soft)
        if truth is not None:
            rec["true_divergence"] = float(truth(c.client_id))
        per_client.append(rec)
    return {"summary": summarize(per_client), "clients": per_client}
