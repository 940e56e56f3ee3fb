from __future__ import annotations

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from agentgraph.graph import RoleVocabulary
from agentgraph.moe import (
    balance_loss,
    expert_edge_probabilities,
    expert_role_distributions,
    gate,
    predict_edge,
    predict_role,
)
from agentgraph.numeric import Tensor, add, hadamard, make_rng, tsum

from conftest import fd_mismatches, tiny_model

_VOCAB = RoleVocabulary(("Planner", "Coder", "Tester"))


def inputs(model, rows=3, seed=0):
    rng = make_rng(seed, "moe-inputs")
    cfg = model.config
    return (
        Tensor(rng.normal(size=(rows, cfg.d_h))),
        Tensor(rng.normal(size=(rows, cfg.d_h))),
        Tensor(rng.normal(size=(rows, cfg.d_task))),
    )


def zero_gate(model):
    params = dict(model.params)
    for name in ("gate.w1", "gate.b1", "gate.w2", "gate.b2"):
        params[name] = Tensor(np.zeros_like(params[name].data))
    return model.with_params(params)


def test_zero_gate_is_uniform(tiny):
    _, _, z = inputs(tiny)
    w = gate(zero_gate(tiny), z).data
    assert np.allclose(w, 1.0 / tiny.config.n_experts, atol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_gate_rows_are_distributions(seed):
    model = tiny_model(_VOCAB, seed=1, n_experts=4)
    z = Tensor(make_rng(seed, "z").normal(scale=3.0, size=(5, model.config.d_task)))
    w = gate(model, z).data
    assert np.all(w > 0) and np.allclose(w.sum(axis=1), 1.0, atol=1e-9)
    assert np.array_equal(w, gate(model, z).data)


def test_single_expert_equals_its_softmax(small_vocab):
    model = tiny_model(small_vocab, seed=2, n_experts=1)
    pool, _, z = inputs(model)
    w = gate(model, z)
    assert np.all(w.data == 1.0)
    mixed = predict_role(model, pool, z, w).data
    assert np.array_equal(mixed, expert_role_distributions(model, pool, z)[0].data)


def test_role_mixture_matches_oracle(tiny):
    pool, _, z = inputs(tiny, rows=4, seed=7)
    w = gate(tiny, z)
    mixed = predict_role(tiny, pool, z, w).data
    experts = [e.data for e in expert_role_distributions(tiny, pool, z)]
    oracle = sum(w.data[:, k : k + 1] * experts[k] for k in range(len(experts)))
    assert np.max(np.abs(mixed - oracle)) <= 1e-12
    assert np.all(mixed >= 0) and np.allclose(mixed.sum(axis=1), 1.0, atol=1e-9)
    assert mixed.shape[1] == len(tiny.vocab) + 1


def test_edge_mixture_matches_oracle(tiny):
    hs, ht, z = inputs(tiny, rows=4, seed=8)
    w = gate(tiny, z)
    p = predict_edge(tiny, hs, ht, z, w).data
    experts = [e.data for e in expert_edge_probabilities(tiny, hs, ht, z)]
    oracle = sum(w.data[:, k : k + 1] * experts[k] for k in range(len(experts)))
    assert np.max(np.abs(p - oracle)) <= 1e-12
    assert p.shape == (4, 1) and np.all((p > 0) & (p < 1))


def test_zero_expert_scalars_give_half(tiny):
    params = dict(tiny.params)
    for k in range(tiny.config.n_experts):
        for leaf in ("w2", "b2"):
            name = f"edge.{k}.{leaf}"
            params[name] = Tensor(np.zeros_like(params[name].data))
    model = tiny.with_params(params)
    hs, ht, z = inputs(model)
    w = Tensor(np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]]))
    assert np.all(predict_edge(model, hs, ht, z, w).data == 0.5)


def test_edge_mixture_monotone_in_one_expert(tiny):
    hs, ht, z = inputs(tiny, rows=1, seed=3)
    w = gate(tiny, z)
    name = "edge.0.b2"
    lo = predict_edge(tiny, hs, ht, z, w).data.item()
    params = dict(tiny.params)
    params[name] = Tensor(params[name].data + 1.0)
    hi = predict_edge(tiny.with_params(params), hs, ht, z, w).data.item()
    assert hi > lo


def test_balance_loss_extremes():
    assert balance_loss(Tensor(np.full((6, 4), 0.25))).item() == 1.0
    onehot = np.zeros((5, 4))
    onehot[:, 2] = 1.0
    assert balance_loss(Tensor(onehot)).item() == 4.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 10_000))
def test_balance_loss_oracle_and_bound(batch, k, seed):
    raw = make_rng(seed, "w").dirichlet(np.ones(k), size=batch)
    value = balance_loss(Tensor(raw)).item()
    usage = [sum(raw[b][j] for b in range(batch)) / batch for j in range(k)]
    assert abs(value - k * sum(u * u for u in usage)) <= 1e-12
    assert value >= 1.0 - 1e-12


def test_head_gradients(tiny):
    pool, ht, z = inputs(tiny, rows=2, seed=4)
    pick = np.zeros((2, len(tiny.vocab) + 1))
    pick[0, 1] = pick[1, -1] = 1.0

    def loss(p):
        m = tiny.with_params(p)
        w = gate(m, z)
        role = tsum(hadamard(predict_role(m, pool, z, w), Tensor(pick)))
        edge = tsum(predict_edge(m, pool, ht, z, w))
        return add(add(role, edge), balance_loss(w))

    names = [n for n in tiny.params if n.split(".")[0] in ("gate", "node", "edge")]
    assert fd_mismatches(loss, tiny.params, names=names) == []

