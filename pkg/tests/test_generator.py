from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentgraph.embed import HashEmbedder
from agentgraph.errors import DataError, InputError
from agentgraph.generator import (
    GenerationConstraints,
    edge_set_logprob,
    generate,
    log_likelihood,
    query_task_vector,
    score_topology_choice,
)
from agentgraph.graph import MasGraph, RoleVocabulary, make_canonical, validate
from agentgraph.numeric import Tensor, make_rng
from agentgraph.training import StagePlan, TrainingExample, run_stage

from conftest import tiny_model

TRIO = RoleVocabulary(("Planner", "Coder", "Tester"))


def zeros(model):
    return np.zeros(model.config.d_task)


def flat_role_head(model):
    params = dict(model.params)
    for k in range(model.config.n_experts):
        for leaf in ("w2", "b2"):
            name = f"node.{k}.{leaf}"
            params[name] = Tensor(np.zeros_like(params[name].data))
    return model.with_params(params)


def test_constraints_validate():
    with pytest.raises(InputError):
        GenerationConstraints(min_nodes=1)
    with pytest.raises(InputError):
        GenerationConstraints(min_nodes=4, max_nodes=3)
    with pytest.raises(InputError):
        GenerationConstraints(mode="beam")


def test_uniform_role_loss_is_log20(vocab):
    model = flat_role_head(tiny_model(vocab, seed=1))
    lik = log_likelihood(model, make_canonical("Chain", 2, [0, 5]), zeros(model))
    assert np.allclose(lik.node_losses, math.log(20), atol=1e-6)


def test_unknown_role_is_data_error(tiny):
    with pytest.raises(DataError):
        log_likelihood(tiny, MasGraph((0, 7)), zeros(tiny))


def all_graphs(n_roles, min_nodes, max_nodes):
    """Every graph the constrained decoder can emit: each non-first node has a provider."""
    for n in range(min_nodes, max_nodes + 1):
        pairs_per_node = [[j for j in range(t)] for t in range(n)]
        edge_choices = []
        for t in range(1, n):
            subsets = [c for r in range(1, t + 1) for c in itertools.combinations(pairs_per_node[t], r)]
            edge_choices.append([[(j, t) for j in c] for c in subsets])
        for roles in itertools.product(range(n_roles), repeat=n):
            for combo in itertools.product(*edge_choices):
                yield MasGraph(tuple(roles), tuple(e for part in combo for e in part))


@pytest.mark.parametrize("min_nodes", [2, 3])
def test_constrained_probabilities_sum_to_one(min_nodes):
    model = tiny_model(TRIO, seed=4)
    c = GenerationConstraints(min_nodes=min_nodes, max_nodes=3)
    z = make_rng(1, "z").normal(size=model.config.d_task)
    total = sum(math.exp(-log_likelihood(model, g, z, c).total) for g in all_graphs(3, min_nodes, 3))
    assert abs(total - 1.0) <= 1e-6


def test_unconstrained_edge_probabilities_sum_to_one_per_step():
    probs = np.array([0.3, 0.8, 0.55])
    subsets = [c for r in range(4) for c in itertools.combinations(range(3), r)]
    free = sum(math.exp(edge_set_logprob(probs, list(c), False)) for c in subsets)
    forced = sum(math.exp(edge_set_logprob(probs, list(c), True)) for c in subsets)
    assert abs(free - 1) <= 1e-12 and abs(forced - 1) <= 1e-12


@pytest.mark.parametrize("mode", ["greedy", "sample"])
def test_trace_replays_constrained_likelihood(tiny, mode):
    for seed in range(8):
        c = GenerationConstraints(2, 5, mode, seed)
        g, trace = generate("draft a report", tiny, c)
        lik = log_likelihood(tiny, g, trace_z(tiny, "draft a report"), c)
        assert abs(trace.logprob + lik.total) <= 1e-9
        assert len(trace.steps) == len(g.nodes) + 1
        per = sum(s.role_logprob + s.edge_logprob for s in trace.steps)
        assert abs(per - trace.logprob) <= 1e-9


def trace_z(model, query):
    return query_task_vector(model, query)


def test_min_equals_max_two(tiny):
    g, trace = generate("q", tiny, GenerationConstraints(2, 2))
    assert len(g.nodes) == 2 and g.edges == ((0, 1),)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4), st.integers(0, 3))
def test_generated_graphs_are_valid(seed, lo, extra):
    model = tiny_model(TRIO, seed=seed % 7)
    c = GenerationConstraints(lo, lo + extra, "sample", seed)
    g, _ = generate(None, model, c, task_vector=make_rng(seed, "z").normal(size=model.config.d_task))
    assert validate(g, model.vocab).ok
    assert c.min_nodes <= len(g.nodes) <= c.max_nodes
    assert all(g.providers(v) for v in range(1, len(g.nodes)))


def test_sampling_is_seed_deterministic(tiny):
    c = GenerationConstraints(2, 6, "sample", 42)
    a = [generate("plan", tiny, c, call_id=i)[0] for i in range(5)]
    b = [generate("plan", tiny, c, call_id=i)[0] for i in range(5)]
    assert a == b


def test_greedy_is_pure(tiny):
    a = generate("fix the bug", tiny)
    b = generate("fix the bug", tiny)
    assert a[0] == b[0] and a[1].logprob == b[1].logprob


@pytest.fixture(scope="module")
def memorized():
    vocab = RoleVocabulary.default()
    dims = dict(d_h=32, d_task=32, task_hidden=32, expert_hidden=32, gate_hidden=32)
    model = tiny_model(vocab, seed=1, **dims)
    query = "write a sorting function and test it"
    target = make_canonical("Chain", 4, [7, 8, 9, 14], query)
    emb = HashEmbedder().embed(query)
    plan = StagePlan(stage=3, epochs=150, batch_size=1, lr=1e-2, seed=0)
    # some initialisations stall where the 1-node and 3-node prefix pools coincide; seed 1 does not
    trained = run_stage(plan, [TrainingExample(target, emb)], model).model
    return trained, target, query


def test_memorized_chain_is_reproduced(memorized):
    model, target, query = memorized
    g, _ = generate(query, model)
    assert g.nodes == target.nodes and g.edges == target.edges


def random_dag(rng, roles):
    n = len(roles)
    edges = []
    for t in range(1, n):
        providers = [j for j in range(t) if rng.random() < 0.5] or [int(rng.integers(t))]
        edges += [(j, t) for j in providers]
    return MasGraph(tuple(roles), tuple(edges))


def test_memorized_target_outranks_random_dags(memorized):
    model, target, query = memorized
    rng = make_rng(3, "candidates")
    others = []
    while len(others) < 10:
        g = random_dag(rng, [int(r) for r in rng.integers(0, 19, 4)])
        if g.nodes != target.nodes or g.edges != target.edges:
            others.append(g)
    ranked = score_topology_choice(query, others + [target], model)
    assert ranked[0][0] is target


def test_ranking_edge_cases(tiny):
    one = make_canonical("Chain", 3, [0, 1, 2])
    assert score_topology_choice("q", [one], tiny)[0][0] == one
    with pytest.raises(InputError):
        score_topology_choice("q", [], tiny)
    with pytest.raises(DataError, match="candidate 1"):
        score_topology_choice("q", [one, MasGraph((0, 9))], tiny)


def test_ranking_is_permutation_invariant(tiny):
    cands = [make_canonical(k, 4, [0, 1, 2, 3]) for k in ("Chain", "Star", "Mesh", "Layered", "Complete")]
    a = score_topology_choice("q", cands, tiny)
    b = score_topology_choice("q", cands[::-1], tiny)
    assert [g for g, _ in a] == [g for g, _ in b]


def test_ranking_ties_prefer_fewer_edges(tiny):
    flat = flat_role_head(tiny)
    params = dict(flat.params)
    for k in range(flat.config.n_experts):
        for leaf in ("w2", "b2"):
            params[f"edge.{k}.{leaf}"] = Tensor(np.zeros_like(params[f"edge.{k}.{leaf}"].data))
    model = flat.with_params(params)
    # every edge decision is p = 0.5, so all same-size graphs tie
    cands = [make_canonical(k, 4, [0, 1, 2, 3]) for k in ("Complete", "Star", "Chain")]
    ranked = [g for g, _ in score_topology_choice("q", cands, model)]
    assert [format(len(g.edges)) for g in ranked] == ["3", "3", "6"]
    assert ranked[0].edges == ((0, 1), (0, 2), (0, 3)) or ranked[0].edges == ((0, 1), (1, 2), (2, 3))
    assert ranked[0].edges == min((ranked[0].edges, ranked[1].edges), key=lambda e: " ".join(f"{a}->{b}" for a, b in e))
