"""Task-aware graph state encoder.

Several graphs are encoded at once as one block-diagonal "pack": node rows
from every graph are stacked and attention is masked to each node's
neighbourhood (in-neighbours, plus itself when self-loops are on). Since
every edge points from a lower to a higher index, a node's state depends
only on lower-indexed nodes, so the rows for the first s nodes of a full
encode equal the encode of the s-node prefix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from agentgraph.errors import ConfigurationError
from agentgraph.graph import MasGraph
from agentgraph.model import Model
from agentgraph.numeric import (
    Tensor,
    add,
    concat,
    hadamard,
    l1_norm,
    leaky_relu,
    matmul,
    mul,
    relu,
    scale,
    sigmoid,
    softmax,
    take_rows,
    transpose,
)
from agentgraph.numeric import tsum


@dataclass(frozen=True)
class GraphPack:
    roles: np.ndarray  # (N,) role index per node row
    graph_of: np.ndarray  # (N,) owning graph
    offsets: np.ndarray  # (B+1,) first row of each graph
    neighbors: np.ndarray  # (N, N) bool, [v, u] True when u feeds v
    has_neighbors: np.ndarray  # (N, 1) float, 0 for rows with an empty neighbourhood

    @property
    def n_rows(self) -> int:
        return len(self.roles)

    @classmethod
    def from_graphs(cls, graphs: Sequence[MasGraph], include_self_loop: bool = True) -> GraphPack:
        sizes = [len(g.nodes) for g in graphs]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.intp)
        n = int(offsets[-1])
        roles = np.fromiter((r for g in graphs for r in g.nodes), dtype=np.intp, count=n)
        graph_of = np.repeat(np.arange(len(graphs)), sizes).astype(np.intp)
        nb = np.zeros((n, n), dtype=bool)
        for gi, g in enumerate(graphs):
            base = offsets[gi]
            for a, b in g.edges:
                nb[base + b, base + a] = True
        if include_self_loop:
            nb[np.arange(n), np.arange(n)] = True
        has = nb.any(axis=1)
        return cls(roles, graph_of, offsets, nb, has.astype(np.float64)[:, None])


@dataclass
class EncoderOutput:
    initial: Tensor  # (N, d_h) layer-0 states
    final: Tensor  # (N, d_h) layer-L states
    gates: list[Tensor]  # per layer (N, d_h), each entry in (0, 1)
    attention: list[np.ndarray]  # per layer (N, N) weights, rows sum to 1 over the neighbourhood


def init_node_states(model: Model, roles: np.ndarray) -> Tensor:
    """h0 = role_embedding @ W_in + b_in, one projection shared by all roles."""
    roles = np.asarray(roles, dtype=np.intp)
    if roles.size and (roles.min() < 0 or roles.max() >= len(model.role_table)):
        raise ConfigurationError(f"no role embedding for role indices {roles.tolist()}")
    x = Tensor(model.role_table[roles])
    return add(matmul(x, model.params["enc.w_in"]), model.params["enc.b_in"])


def encode(model: Model, pack: GraphPack, z_rows: Tensor) -> EncoderOutput:
    """Run L layers of gated message passing + neighbourhood attention + residual averaging.

    ``z_rows`` carries the task vector of each node's graph, one row per node.
    """
    cfg = model.config
    if z_rows.shape != (pack.n_rows, cfg.d_task):
        raise ConfigurationError(f"task rows {z_rows.shape} != ({pack.n_rows}, {cfg.d_task})")
    p = model.params
    h = init_node_states(model, pack.roles)
    h0 = h
    gates, attention = [], []
    isolated = not np.all(pack.has_neighbors)
    # fully masked rows would break the softmax; they are zeroed afterwards instead
    mask = pack.neighbors | (pack.has_neighbors == 0) if isolated else pack.neighbors
    for layer in range(cfg.layers):
        pre = f"enc.{layer}."
        gate = sigmoid(matmul(concat([h, z_rows], axis=1), p[pre + "w_g"]))
        msg = hadamard(gate, relu(matmul(h, p[pre + "w_m"])))
        src = matmul(matmul(h, p[pre + "w_k"]), p[pre + "a_src"])  # (N, 1) sender term
        dst = matmul(matmul(msg, p[pre + "w_q"]), p[pre + "a_dst"])  # (N, 1) receiver term
        logits = leaky_relu(add(dst, transpose(src)))  # [v, u] = dst_v + src_u
        alpha = softmax(logits, axis=1, mask=mask)
        if isolated:
            alpha = mul(alpha, Tensor(pack.has_neighbors))
        h = scale(add(h, matmul(alpha, msg)), 0.5)
        gates.append(gate)
        attention.append(alpha.data)
    return EncoderOutput(h0, h, gates, attention)


def gate_l1(gates: Sequence[Tensor], row_weights: np.ndarray | None = None) -> Tensor:
    """Mean absolute gate value over layers, nodes and channels.

    With ``row_weights`` (N,), returns sum_l sum_v w_v * mean_c |g_lvc| / L instead,
    which lets one pass stand in for several prefix passes.
    """
    n_layers = len(gates)
    if row_weights is None:
        total = None
        for g in gates:
            term = l1_norm(g)
            total = term if total is None else add(total, term)
        return scale(total, 1.0 / (n_layers * gates[0].size))
    d = gates[0].shape[1]
    w = Tensor(np.asarray(row_weights, dtype=np.float64)[:, None])
    total = None
    for g in gates:
        term = tsum(mul(g, w))
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / (n_layers * d))


def global_pool(model: Model, states: Tensor | None) -> Tensor:
    """Mean of node rows, or the learned start-context vector for an empty graph."""
    if states is None or states.shape[0] == 0:
        return model.params["enc.start"]
    n = states.shape[0]
    return matmul(Tensor(np.full((1, n), 1.0 / n)), states)


def encode_graph(model: Model, graph: MasGraph, z: Tensor | np.ndarray) -> EncoderOutput:
    """Convenience wrapper for a single graph and a (1, d_task) or (d_task,) task vector."""
    pack = GraphPack.from_graphs([graph], model.config.include_self_loop)
    if not isinstance(z, Tensor):
        z = Tensor(np.atleast_2d(z))
    return encode(model, pack, take_rows(z, np.zeros(pack.n_rows, dtype=np.intp)))
