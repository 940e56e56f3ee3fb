from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentgraph.encoder import GraphPack, encode, encode_graph, gate_l1, global_pool, init_node_states
from agentgraph.errors import ConfigurationError
from agentgraph.graph import MasGraph, make_canonical
from agentgraph.numeric import Tensor, hadamard, make_rng, no_grad, tsum

from conftest import fd_mismatches, tiny_model


def task(model, seed=0):
    return make_rng(seed, "z").normal(size=(1, model.config.d_task))


def test_identical_roles_share_initial_state(tiny):
    h = init_node_states(tiny, np.array([2, 2, 4])).data
    assert np.array_equal(h[0], h[1]) and not np.array_equal(h[0], h[2])


def test_zero_projection_gives_bias(tiny):
    params = dict(tiny.params)
    params["enc.w_in"] = Tensor(np.zeros_like(params["enc.w_in"].data))
    params["enc.b_in"] = Tensor(np.arange(8.0)[None, :])
    h = init_node_states(tiny.with_params(params), np.array([0, 3])).data
    assert np.array_equal(h, np.tile(np.arange(8.0), (2, 1)))


def test_unknown_role_is_configuration_error(tiny):
    with pytest.raises(ConfigurationError):
        init_node_states(tiny, np.array([0, 9]))


def test_projection_gradient(tiny):
    roles = np.array([0, 1, 4])

    def loss(p):
        return tsum(init_node_states(tiny.with_params(p), roles))

    assert fd_mismatches(loss, tiny.params, names=["enc.w_in", "enc.b_in"]) == []


def test_task_dimension_mismatch(tiny, chain3):
    pack = GraphPack.from_graphs([chain3])
    with pytest.raises(ConfigurationError):
        encode(tiny, pack, Tensor(np.zeros((3, 5))))


def test_isolated_node_attends_to_itself(tiny):
    out = encode_graph(tiny, MasGraph((1,)), task(tiny))
    assert all(a[0, 0] == 1.0 for a in out.attention)


def test_symmetric_nodes_get_identical_states(tiny):
    g = MasGraph((2, 2, 2, 2), ((0, 1), (0, 2), (0, 3)))
    out = encode_graph(tiny, g, task(tiny))
    f = out.final.data
    assert np.allclose(f[1], f[2], atol=0) and np.allclose(f[2], f[3], atol=0)


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def manual_encode(h0, z, layers, providers):
    """Scalar-loop evaluation of the gated attention layer, written independently of the tensor code."""
    h = [list(row) for row in h0]
    d = len(h[0])
    for w in layers:
        gate = [[_sig(sum(([*h[v], *z][i]) * w["w_g"][i][c] for i in range(len(h[v]) + len(z)))) for c in range(d)]
                for v in range(len(h))]
        msg = [[gate[v][c] * max(0.0, sum(h[v][i] * w["w_m"][i][c] for i in range(d))) for c in range(d)]
               for v in range(len(h))]
        new = []
        for v in range(len(h)):
            nbrs = providers[v] + [v]
            q = [sum(msg[v][i] * w["w_q"][i][c] for i in range(d)) for c in range(d)]
            logits = []
            for u in nbrs:
                k = [sum(h[u][i] * w["w_k"][i][c] for i in range(d)) for c in range(d)]
                e = sum(k[c] * w["a_src"][c][0] for c in range(d)) + sum(q[c] * w["a_dst"][c][0] for c in range(d))
                logits.append(e if e > 0 else 0.01 * e)
            top = max(logits)
            ex = [math.exp(e - top) for e in logits]
            alpha = [x / sum(ex) for x in ex]
            agg = [sum(a * msg[u][c] for a, u in zip(alpha, nbrs)) for c in range(d)]
            new.append([0.5 * (h[v][c] + agg[c]) for c in range(d)])
        h = new
    return np.array(h)


def test_manual_oracle_d2(small_vocab):
    model = tiny_model(small_vocab, seed=11, d_h=2, d_task=2, layers=2)
    rng = make_rng(5, "oracle")
    params = dict(model.params)
    layers = []
    for layer in range(2):
        w = {}
        for leaf in ("w_g", "w_m", "w_k", "w_q", "a_src", "a_dst"):
            name = f"enc.{layer}.{leaf}"
            value = rng.uniform(-1.5, 1.5, params[name].shape)
            params[name] = Tensor(value)
            w[leaf] = value.tolist()
        layers.append(w)
    model = model.with_params(params)
    g = make_canonical("Chain", 3, [0, 3, 1])
    z = [0.7, -0.4]
    out = encode_graph(model, g, np.array([z]))
    h0 = out.initial.data.tolist()
    expected = manual_encode(h0, z, layers, [[], [0], [1]])
    assert np.max(np.abs(out.final.data - expected)) <= 1e-10


def test_attention_rows_sum_to_one(tiny):
    g = make_canonical("Layered", 7, [0, 1, 2, 3, 4, 0, 1])
    out = encode_graph(tiny, g, task(tiny))
    for a in out.attention:
        assert np.allclose(a.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(a[~GraphPack.from_graphs([g]).neighbors] == 0)


def test_zero_messages_halve_state(tiny):
    params = dict(tiny.params)
    for layer in range(tiny.config.layers):
        params[f"enc.{layer}.w_m"] = Tensor(np.zeros_like(params[f"enc.{layer}.w_m"].data))
    model = tiny.with_params(params)
    out = encode_graph(model, make_canonical("Star", 4, [0, 1, 2, 3]), task(model))
    assert np.array_equal(out.final.data, out.initial.data * 2.0 ** -model.config.layers)


def test_relabeling_permutes_rows(tiny):
    # two index-ordered labelings of the same structure: a fork 0->1, 0->2 with roles swapped on the leaves
    a = MasGraph((0, 1, 2), ((0, 1), (0, 2)))
    b = MasGraph((0, 2, 1), ((0, 1), (0, 2)))
    z = task(tiny)
    fa, fb = encode_graph(tiny, a, z).final.data, encode_graph(tiny, b, z).final.data
    assert np.allclose(fa[[0, 2, 1]], fb, atol=1e-12)


def prefix(g, s):
    return MasGraph(g.nodes[:s], tuple(e for e in g.edges if e[1] < s))


def test_prefix_rows_match_prefix_encode(tiny):
    g = make_canonical("Mesh", 5, [0, 1, 2, 3, 4])
    z = task(tiny)
    full = encode_graph(tiny, g, z).final.data
    for s in range(1, 5):
        assert np.allclose(encode_graph(tiny, prefix(g, s), z).final.data, full[:s], atol=1e-12)


def test_packed_batch_matches_single(tiny):
    graphs = [make_canonical("Chain", 3, [0, 1, 2]), make_canonical("Star", 4, [4, 3, 2, 1])]
    zs = make_rng(2, "zs").normal(size=(2, tiny.config.d_task))
    pack = GraphPack.from_graphs(graphs)
    rows = Tensor(zs[pack.graph_of])
    packed = encode(tiny, pack, rows).final.data
    for i, g in enumerate(graphs):
        single = encode_graph(tiny, g, zs[i : i + 1]).final.data
        assert np.allclose(packed[pack.offsets[i] : pack.offsets[i + 1]], single, atol=1e-12)


def test_encoder_gradients_d8(tiny, chain3):
    z = task(tiny)
    readout = make_rng(9, "readout").normal(size=(3, 8))

    def loss(p):
        out = encode_graph(tiny.with_params(p), chain3, z)
        return tsum(hadamard(out.final, Tensor(readout)))

    names = [n for n in tiny.params if n.startswith("enc.") and n != "enc.start"]
    assert fd_mismatches(loss, tiny.params, names=names) == []


def test_gate_l1_examples():
    gates = [Tensor(np.full((3, 4), 0.5)), Tensor(np.full((3, 4), 0.5))]
    assert gate_l1(gates).item() == 0.5
    rng = make_rng(4, "gates")
    raw = [rng.uniform(0.01, 0.99, (5, 6)) for _ in range(3)]
    oracle = sum(abs(x) for arr in raw for x in arr.ravel()) / (3 * 30)
    assert abs(gate_l1([Tensor(a) for a in raw]).item() - oracle) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2), st.integers(0, 4), st.integers(0, 5), st.floats(1e-3, 0.4))
def test_gate_l1_is_monotone(layer, row, col, drop):
    rng = make_rng(layer * 100 + row * 10 + col, "mono")
    raw = [rng.uniform(0.5, 0.99, (5, 6)) for _ in range(3)]
    before = gate_l1([Tensor(a) for a in raw]).item()
    raw[layer][row, col] -= drop
    assert gate_l1([Tensor(a) for a in raw]).item() < before


def test_gate_l1_row_weights_match_unweighted():
    rng = make_rng(6, "rows")
    raw = [Tensor(rng.uniform(0.1, 0.9, (4, 3))) for _ in range(2)]
    weighted = gate_l1(raw, row_weights=np.full(4, 0.25)).item()
    assert abs(weighted - gate_l1(raw).item()) <= 1e-12


def test_global_pool(tiny):
    one = Tensor(np.arange(8.0)[None, :])
    assert np.array_equal(global_pool(tiny, one).data, one.data)
    rows = make_rng(1, "pool").normal(size=(4, 8))
    a = global_pool(tiny, Tensor(rows)).data
    b = global_pool(tiny, Tensor(rows[[3, 1, 0, 2]])).data
    assert np.allclose(a, b, atol=1e-15)
    assert global_pool(tiny, None) is tiny.params["enc.start"]
    assert global_pool(tiny, Tensor(np.zeros((0, 8)))) is tiny.params["enc.start"]


def test_encode_is_deterministic(tiny, chain3):
    z = task(tiny)
    with no_grad():
        a = encode_graph(tiny, chain3, z).final.data
        b = encode_graph(tiny, chain3, z).final.data
    assert np.array_equal(a, b)
