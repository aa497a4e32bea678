import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routefl.data import (
    ClassifyTaskSpec,
    SequenceTaskSpec,
    classify_truth,
    client_transition,
    generate_classify_federation,
    generate_federation,
    generate_sequence_federation,
    markov_kl_rate,
    read_federation,
    sample_chain,
    sequence_chains,
    split_811,
    stationary,
    task_spec_from_dict,
    task_spec_to_dict,
    true_client_divergence,
    write_federation,
)
from routefl.errors import ConfigError

import oracles

SEQ = SequenceTaskSpec(vocab_size=6, min_seq_len=2, max_seq_len=5, num_clients=5, min_instances=10, max_instances=20)
CLS = ClassifyTaskSpec(input_dim=3, num_classes=4, num_clients=5, min_instances=10, max_instances=20)


def _same(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.client_id == y.client_id and x.kind == y.kind
        for split in ("train", "valid", "test"):
            xs, ys = getattr(x, split), getattr(y, split)
            assert len(xs) == len(ys)
            for u, v in zip(xs, ys):
                if x.kind == "sequence":
                    assert u == v
                else:
                    assert np.array_equal(u[0], v[0]) and u[1] == v[1]


# ------------------------------------------------------------------ splits


@pytest.mark.parametrize("n,sizes", [(100, (80, 10, 10)), (3, (1, 1, 1)), (2, (2, 0, 0)), (1, (1, 0, 0)), (25, (21, 2, 2)), (35, (27, 4, 4))])
def test_split_sizes(n, sizes):
    parts = split_811(list(range(n)), np.random.default_rng(0))
    assert tuple(len(p) for p in parts) == sizes
    assert sorted(sum(parts, [])) == list(range(n))


# ------------------------------------------------------------------ sequences


def test_sequence_generation_is_deterministic():
    _same(generate_sequence_federation(SEQ), generate_sequence_federation(SEQ))
    other = generate_sequence_federation(dataclasses.replace(SEQ, seed=1))
    assert other[0].train != generate_sequence_federation(SEQ)[0].train


def test_sequences_respect_the_task_shape():
    clients = generate_sequence_federation(SEQ)
    assert [c.client_id for c in clients] == list(range(SEQ.num_clients))
    for c in clients:
        total = len(c.train) + len(c.valid) + len(c.test)
        assert SEQ.min_instances <= total <= SEQ.max_instances
        for s in c.train + c.valid + c.test:
            assert SEQ.min_seq_len <= len(s) <= SEQ.max_seq_len
            assert all(0 <= t < SEQ.vocab_size for t in s)


def test_transition_matrices_are_stochastic():
    P_global, clients, styles = sequence_chains(SEQ)
    np.testing.assert_allclose(P_global.sum(axis=1), 1.0, atol=1e-12)
    for cid in range(SEQ.num_clients):
        P = client_transition(SEQ, cid)
        assert np.all(P >= 0)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
        keep = np.setdiff1d(np.arange(SEQ.vocab_size), styles[cid])
        np.testing.assert_array_equal(clients[cid][keep], P_global[keep])


def test_stationary_distribution_is_invariant():
    P = client_transition(SEQ, 2)
    pi = stationary(P)
    np.testing.assert_allclose(pi @ P, pi, atol=1e-12)
    assert abs(pi.sum() - 1.0) < 1e-12


def test_sampled_chain_follows_the_transition_matrix():
    P = client_transition(SEQ, 1)
    seq = sample_chain(P, [200_000], np.random.default_rng(0))[0]
    counts = np.zeros_like(P)
    np.add.at(counts, (np.array(seq[:-1]), np.array(seq[1:])), 1)
    rows = counts.sum(axis=1)
    live = rows > 5000
    empirical = counts[live] / rows[live, None]
    assert np.max(np.abs(empirical - P[live])) < 0.03


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_markov_kl_rate_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(4), size=4)
    Q = rng.dirichlet(np.ones(4), size=4)
    pi = stationary(P)
    assert math.isclose(markov_kl_rate(P, Q), oracles.markov_kl(P.tolist(), Q.tolist(), pi.tolist()), rel_tol=1e-9, abs_tol=1e-12)


def test_zero_heterogeneity_makes_every_client_global():
    spec = dataclasses.replace(SEQ, heterogeneity=0.0)
    P_global = sequence_chains(spec)[0]
    for cid in range(spec.num_clients):
        np.testing.assert_array_equal(client_transition(spec, cid), P_global)
        assert true_client_divergence(spec, cid) == 0.0


def test_true_divergence_grows_with_heterogeneity():
    lams = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    for cid in range(SEQ.num_clients):
        divs = [true_client_divergence(dataclasses.replace(SEQ, heterogeneity=lam), cid) for lam in lams]
        assert all(b >= a - 1e-12 for a, b in zip(divs, divs[1:]))


def test_true_divergence_spreads_across_clients():
    spec = SequenceTaskSpec(num_clients=20)
    divs = [true_client_divergence(spec, c) for c in range(20)]
    assert max(divs) > 2 * min(divs)


def test_unknown_client_divergence_fails():
    with pytest.raises(KeyError):
        true_client_divergence(SEQ, SEQ.num_clients)
    with pytest.raises(KeyError):
        true_client_divergence(CLS, -1)


# ------------------------------------------------------------- classification


def test_classify_generation_is_deterministic_and_shaped():
    a, b = generate_classify_federation(CLS), generate_classify_federation(CLS)
    _same(a, b)
    for c in a:
        for x, y in c.train + c.valid + c.test:
            assert x.shape == (CLS.input_dim,) and 0 <= y < CLS.num_classes


def test_classify_truth_is_consistent():
    means, props, shifts = classify_truth(CLS)
    assert means.shape == (CLS.num_classes, CLS.input_dim)
    for p, s in zip(props, shifts):
        assert abs(p.sum() - 1.0) < 1e-12
        norms = np.linalg.norm(s, axis=1)
        assert np.all((np.abs(norms) < 1e-12) | (np.abs(norms - CLS.shift) < 1e-9))


def test_classify_divergence_matches_loop_oracle():
    _, props, shifts = classify_truth(CLS)
    for cid in range(CLS.num_clients):
        p, s = props[cid].tolist(), shifts[cid].tolist()
        k = CLS.num_classes
        label = sum(pi * math.log(pi * k) for pi in p)
        feature = sum(p[y] * sum(v * v for v in s[y]) for y in range(k)) / (2 * CLS.noise**2)
        assert math.isclose(true_client_divergence(CLS, cid), label + feature, rel_tol=1e-12)


def test_classify_divergence_vanishes_without_shift_and_label_skew():
    spec = dataclasses.replace(CLS, alpha=1e9, shift=0.0)
    for cid in range(spec.num_clients):
        assert abs(true_client_divergence(spec, cid)) < 1e-6


def test_classify_labels_follow_client_proportions():
    spec = dataclasses.replace(CLS, num_clients=1, min_instances=20_000, max_instances=20_000)
    c = generate_classify_federation(spec)[0]
    labels = np.array([y for _, y in c.train + c.valid + c.test])
    freq = np.bincount(labels, minlength=spec.num_classes) / labels.size
    assert np.max(np.abs(freq - classify_truth(spec)[1][0])) < 0.02


# ------------------------------------------------------------------ validation


@pytest.mark.parametrize(
    "spec",
    [
        dataclasses.replace(SEQ, vocab_size=1),
        dataclasses.replace(SEQ, min_seq_len=0),
        dataclasses.replace(SEQ, min_seq_len=6, max_seq_len=5),
        dataclasses.replace(SEQ, min_instances=5, max_instances=4),
        dataclasses.replace(SEQ, heterogeneity=1.5),
        dataclasses.replace(SEQ, client_concentration=0.0),
        dataclasses.replace(SEQ, min_style_fraction=0.8, max_style_fraction=0.2),
        dataclasses.replace(CLS, num_classes=1),
        dataclasses.replace(CLS, alpha=0.0),
        dataclasses.replace(CLS, noise=0.0),
        dataclasses.replace(CLS, num_clients=0),
    ],
)
def test_invalid_task_specs_fail(spec):
    with pytest.raises(ConfigError):
        generate_federation(spec)


def test_task_spec_dict_round_trip():
    for spec in (SEQ, CLS):
        assert task_spec_from_dict(task_spec_to_dict(spec)) == spec
    with pytest.raises(ConfigError):
        task_spec_from_dict({"kind": "images"})


# ------------------------------------------------------------------ persistence


@pytest.mark.parametrize("spec", [SEQ, CLS])
def test_dataset_file_round_trip(tmp_path, spec):
    clients = generate_federation(spec)
    path = tmp_path / "data.ndjson"
    write_federation(path, clients, spec)
    header = json.loads(path.read_text().splitlines()[0])
    assert task_spec_from_dict(header["task"]) == spec
    _same(read_federation(path), clients)


def test_dataset_file_errors(tmp_path):
    empty = tmp_path / "empty.ndjson"
    empty.write_text("")
    with pytest.raises(ConfigError):
        read_federation(empty)
    foreign = tmp_path / "foreign.ndjson"
    foreign.write_text(json.dumps({"format": "other", "version": 1}) + "\n")
    with pytest.raises(ConfigError):
        read_federation(foreign)
    bad = tmp_path / "bad.ndjson"
    bad.write_text(
        json.dumps({"format": "routefl.dataset", "version": 1, "kind": "sequence"}) + "\n"
        + json.dumps({"client": 0, "split": "holdout", "tokens": [1]}) + "\n"
    )
    with pytest.raises(ConfigError) as err:
        read_federation(bad)
    assert err.value.line == 2
