import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routefl.autodiff import Tensor
from routefl.client import ClientDataset, ClientUpdate, TrainHyper, client_train
from routefl.errors import ConfigError, ProtocolError, RoundError
from routefl.model import GlobalModel
from routefl.server import (
    CLIENT_STREAM,
    Federation,
    FederationConfig,
    aggregate_fedavg,
    run_round,
    run_training,
    sample_clients,
    stream_rng,
    stream_seed,
)

import oracles
from factories import ff_client, ff_spec, seq_client, seq_spec

SPEC = ff_spec(n=3, d=2, classes=2, hidden=())


def _model(values_fn, spec=SPEC):
    gm = GlobalModel.initialize(spec, np.random.default_rng(0))
    return GlobalModel.from_tensors(spec, {k: Tensor(values_fn(k, p.shape)) for k, p in gm.params.items()})


def _update(n, values_fn, spec=SPEC):
    return ClientUpdate(n, _model(values_fn, spec))


def _const(v):
    return lambda k, shape: np.full(shape, float(v))


def _random(rng, scale=1.0):
    return lambda k, shape: scale * rng.standard_normal(shape)


# ------------------------------------------------------------------ sampling


def test_sampling_whole_population_is_a_permutation():
    ids = list(range(10, 20))
    picked = sample_clients(ids, 10, 1, np.random.default_rng(0))
    assert sorted(picked) == ids


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.data())
def test_sampling_has_no_duplicates(pop, data):
    k = data.draw(st.integers(1, pop))
    picked = sample_clients(range(pop), k, 0, np.random.default_rng(data.draw(st.integers(0, 2**32 - 1))))
    assert len(picked) == len(set(picked)) == k


def test_sampling_more_than_population_fails():
    with pytest.raises(ConfigError):
        sample_clients(range(3), 4, 0, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        sample_clients(range(3), 0, 0, np.random.default_rng(0))


def test_single_client_rounds_are_uniform():
    pop, rounds = 10, 10_000
    counts = np.zeros(pop)
    for r in range(rounds):
        counts[sample_clients(range(pop), 1, r, stream_rng(5, 0, r))[0]] += 1
    mean = rounds / pop
    sigma = np.sqrt(rounds * (1 / pop) * (1 - 1 / pop))
    assert np.all(np.abs(counts - mean) <= 3 * sigma)


def test_stream_seeds_are_scheduling_independent():
    a = stream_rng(3, CLIENT_STREAM, 4, 7).random(3)
    stream_rng(3, CLIENT_STREAM, 4, 8).random(10)
    b = stream_rng(3, CLIENT_STREAM, 4, 7).random(3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, stream_rng(3, CLIENT_STREAM, 5, 7).random(3))


# ------------------------------------------------------------------ FedAvg


def test_single_update_is_returned_bit_exactly():
    u = _update(7, _random(np.random.default_rng(1)))
    out = aggregate_fedavg([u])
    for k, p in u.global_model.params.items():
        assert out.params[k].value.tobytes() == p.value.tobytes()


def test_weighted_average_arithmetic():
    out = aggregate_fedavg([_update(1, _const(2.0)), _update(3, _const(6.0))])
    for p in out.params.values():
        assert np.all(p.value == 5.0)


def test_identical_updates_are_a_fixed_point():
    rng = np.random.default_rng(2)
    vals = {k: rng.standard_normal(p.shape) for k, p in _model(_const(0)).params.items()}
    ups = [_update(n, lambda k, s: vals[k]) for n in (1, 5, 17, 2)]
    out = aggregate_fedavg(ups)
    for k in vals:
        assert np.array_equal(out.params[k].value, vals[k])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_aggregate_matches_scalar_oracle(seed, count):
    rng = np.random.default_rng(seed)
    ns = rng.integers(1, 200, size=count).tolist()
    ups = [_update(n, _random(rng, scale=float(rng.uniform(0.01, 100)))) for n in ns]
    out = aggregate_fedavg(ups)
    for k, p in out.params.items():
        flat = [u.global_model.params[k].value.ravel() for u in ups]
        ref = [oracles.weighted_mean([f[i] for f in flat], ns) for i in range(p.value.size)]
        np.testing.assert_allclose(p.value.ravel(), ref, rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_aggregate_is_order_invariant(seed, count):
    rng = np.random.default_rng(seed)
    ups = [_update(int(rng.integers(1, 50)), _random(rng)) for _ in range(count)]
    a = aggregate_fedavg(ups)
    b = aggregate_fedavg([ups[i] for i in rng.permutation(count)])
    for k in a.params:
        np.testing.assert_allclose(a.params[k].value, b.params[k].value, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-10, 10), st.floats(-10, 10))
def test_aggregate_is_linear_for_equal_weights(seed, a, b):
    rng = np.random.default_rng(seed)
    base = {k: rng.standard_normal(p.shape) for k, p in _model(_const(0)).params.items()}
    out = aggregate_fedavg([_update(4, lambda k, s: a * base[k]), _update(4, lambda k, s: b * base[k])])
    for k in base:
        np.testing.assert_allclose(out.params[k].value, (a + b) / 2 * base[k], rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_aggregate_stays_within_client_envelope(seed, count):
    rng = np.random.default_rng(seed)
    ups = [_update(int(rng.integers(1, 50)), _random(rng)) for _ in range(count)]
    out = aggregate_fedavg(ups)
    for k, p in out.params.items():
        stack = np.stack([u.global_model.params[k].value for u in ups])
        assert np.all(p.value >= stack.min(axis=0)) and np.all(p.value <= stack.max(axis=0))


def test_aggregate_errors():
    with pytest.raises(RoundError):
        aggregate_fedavg([])
    with pytest.raises(RoundError):
        aggregate_fedavg([_update(0, _const(1.0)), _update(0, _const(2.0))])
    other = ff_spec(n=3, d=3, classes=2, hidden=())
    with pytest.raises(ProtocolError):
        aggregate_fedavg([_update(1, _const(1.0)), _update(1, _const(1.0), other)])
    deeper = ff_spec(n=3, d=2, classes=2, hidden=(2,))
    with pytest.raises(ProtocolError):
        aggregate_fedavg([_update(1, _const(1.0)), _update(1, _const(1.0), deeper)])


# ------------------------------------------------------------------ rounds


def _clients(kind="classify", count=5):
    make = ff_client if kind == "classify" else seq_client
    return [make(cid=i, seed=i) for i in range(count)]


def _fed(config, hyper=None, clients=None, **kw):
    clients = clients or _clients()
    return Federation(clients, ff_spec(), hyper or TrainHyper(batch_size=4), config, **kw)


def test_config_validation():
    for cfg in (
        FederationConfig(rounds=-1, clients_per_round=1),
        FederationConfig(rounds=1, clients_per_round=6),
        FederationConfig(rounds=1, clients_per_round=1, failure_policy="retry"),
        FederationConfig(rounds=1, clients_per_round=1, variant="mixture"),
        FederationConfig(rounds=1, clients_per_round=1, eval_every=1, eval_clients=0),
        FederationConfig(rounds=1, clients_per_round=1, workers=0),
        FederationConfig(rounds=1, clients_per_round=1, eval_split="train"),
    ):
        with pytest.raises(ConfigError):
            _fed(cfg)


def test_single_client_round_returns_that_clients_model():
    cfg = FederationConfig(rounds=1, clients_per_round=1, seed=4)
    fed = _fed(cfg)
    start = fed.initial_model()
    before = start.fingerprint()
    new, report = fed.run_round(start, 1)
    cid = report.sampled[0]
    direct = client_train(fed.datasets[cid], start, fed.hyper, stream_seed(4, CLIENT_STREAM, 1, cid))
    assert new.fingerprint() == direct.global_model.fingerprint()
    assert start.fingerprint() == before
    assert report.total_n == sum(report.n) == len(fed.datasets[cid].train)


def test_parallel_and_sequential_rounds_agree():
    seq = _fed(FederationConfig(rounds=2, clients_per_round=3, seed=1))
    par = _fed(FederationConfig(rounds=2, clients_per_round=3, seed=1, workers=2))
    a, ra = seq.run_training()
    b, rb = par.run_training()
    assert a.fingerprint() == b.fingerprint()
    assert [r.to_dict() for r in ra] == [r.to_dict() for r in rb]


def test_no_training_epochs_keep_the_model_fixed():
    fed = _fed(FederationConfig(rounds=2, clients_per_round=3), TrainHyper(local_epochs=0, global_epochs=0))
    start = fed.initial_model()
    end, _ = fed.run_training(start)
    assert end.fingerprint() == start.fingerprint()


def test_zero_rounds_return_initial_model():
    fed = _fed(FederationConfig(rounds=0, clients_per_round=2, seed=3))
    model, reports = fed.run_training()
    assert reports == []
    assert model.fingerprint() == fed.initial_model().fingerprint()


def test_training_is_reproducible_and_reports_every_round():
    cfg = FederationConfig(rounds=3, clients_per_round=2, seed=8)
    a, ra = run_training(_clients(), ff_spec(), TrainHyper(batch_size=4), cfg)
    b, rb = run_training(_clients(), ff_spec(), TrainHyper(batch_size=4), cfg)
    assert len(ra) == 3 and [r.round for r in ra] == [1, 2, 3]
    assert a.fingerprint() == b.fingerprint()
    assert [r.to_dict() for r in ra] == [r.to_dict() for r in rb]
    for r in ra:
        assert r.total_n == sum(r.n)
        assert 0 <= r.mean_r1 <= 1


def test_persisted_and_reconstructed_clients_agree():
    cfg = FederationConfig(rounds=3, clients_per_round=2, seed=2)
    kept = _fed(cfg, persistent_clients=True)
    fresh = _fed(cfg, persistent_clients=False)
    assert fresh.client(0) is not fresh.client(0)
    assert kept.client(0) is kept.client(0)
    assert kept.run_training()[0].fingerprint() == fresh.run_training()[0].fingerprint()


def test_run_round_helper_matches_federation():
    cfg = FederationConfig(rounds=1, clients_per_round=2, seed=6)
    fed = _fed(cfg)
    start = fed.initial_model()
    a, _ = fed.run_round(start, 1)
    b, _ = run_round(start, _clients(), ff_spec(), fed.hyper, cfg, 1)
    assert a.fingerprint() == b.fingerprint()


def _broken_clients():
    clients = _clients("sequence", 4)
    clients[1] = ClientDataset(1, "sequence", [(0, 99, 1)])  # token outside the vocabulary
    return clients


def test_failing_client_is_dropped_by_default(caplog):
    cfg = FederationConfig(rounds=1, clients_per_round=4, seed=0)
    fed = Federation(_broken_clients(), seq_spec(), TrainHyper(batch_size=4), cfg)
    with caplog.at_level(logging.WARNING):
        _, report = fed.run_round(fed.initial_model(), 1)
    assert report.dropped == [1]
    assert len(report.n) == 3
    assert "dropping client 1" in caplog.text


def test_failing_client_fails_the_round_when_asked():
    cfg = FederationConfig(rounds=1, clients_per_round=4, failure_policy="fail-round")
    fed = Federation(_broken_clients(), seq_spec(), TrainHyper(batch_size=4), cfg)
    with pytest.raises(RoundError):
        fed.run_round(fed.initial_model(), 1)


def test_evaluator_runs_at_the_configured_cadence():
    seen = []

    def evaluator(datasets, model, hyper, seed_fn, split):
        seen.append((len(datasets), split, seed_fn(datasets[0].client_id).entropy is not None))
        return {"acc_flow": 0.5}

    cfg = FederationConfig(rounds=4, clients_per_round=1, eval_every=2, eval_clients=3, eval_split="test")
    _, reports = _fed(cfg, evaluator=evaluator).run_training()
    assert [r.eval for r in reports] == [None, {"acc_flow": 0.5}, None, {"acc_flow": 0.5}]
    assert seen == [(3, "test", True)] * 2


def test_on_round_callback_sees_each_model():
    fps = []
    fed = _fed(FederationConfig(rounds=2, clients_per_round=2))
    final, _ = fed.run_training(on_round=lambda m, r: fps.append(m.fingerprint()))
    assert len(fps) == 2 and fps[-1] == final.fingerprint()


def test_plain_variant_uses_fedavg_clients():
    cfg = FederationConfig(rounds=1, clients_per_round=2, variant="fedavg_plain")
    fed = _fed(cfg)
    assert fed.client(0).plain
    _, report = fed.run_round(fed.initial_model(), 1)
    assert report.mean_r1 == 1.0
