"""Autoregressive graph generation: teacher-forced likelihood and constrained decoding.

At step ``s`` (``s`` nodes already placed) the model picks a role (or END)
from the pooled prefix representation; if a role was picked it then scores
each incoming edge ``j -> s`` for ``j < s``.

Two likelihoods are exposed. The *unconstrained* one is the plain
per-decision cross-entropy used as the training objective. The
*constrained* one (pass ``constraints``) is the exact probability that
:func:`generate` emits the graph: END is masked (and the rest renormalised)
below ``min_nodes``, forced at ``max_nodes``, and a node left with no
incoming edge receives the single most probable one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from agentgraph.embed import EmbeddingProvider, embed_text, encode_task
from agentgraph.encoder import GraphPack, encode, gate_l1, global_pool, init_node_states
from agentgraph.errors import DataError, InputError
from agentgraph.graph import MasGraph, format_edges, validate
from agentgraph.model import Model
from agentgraph.moe import gate, predict_edge, predict_role
from agentgraph.numeric import (
    Tensor,
    add,
    clamp,
    log,
    make_rng,
    matmul,
    mul,
    scale,
    sub,
    take_rows,
)
from agentgraph.numeric import tsum
from agentgraph.numeric.tensor import no_grad

EDGE_EPS = 1e-7


@dataclass(frozen=True)
class GenerationConstraints:
    min_nodes: int = 2
    max_nodes: int = 6
    mode: str = "greedy"  # or "sample"
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.min_nodes <= self.max_nodes:
            raise InputError(f"need 2 <= min_nodes <= max_nodes, got {self.min_nodes}, {self.max_nodes}")
        if self.mode not in ("greedy", "sample"):
            raise InputError(f"unknown decode mode {self.mode!r}")


# --- batched teacher forcing -------------------------------------------------


@dataclass(frozen=True)
class StepLayout:
    """Constant index arrays describing every decision in a batch of graphs."""

    pack: GraphPack
    step_graph: np.ndarray  # (S,)
    step_prefix: np.ndarray  # (S,) number of nodes already placed
    step_target: np.ndarray  # (S,) true class (role index, END for the last step)
    pool: np.ndarray  # (S, N) averaging weights over prefix rows
    start: np.ndarray  # (S, 1) 1 where the prefix is empty
    pair_src: np.ndarray  # (P,) node row of candidate provider j
    pair_tgt: np.ndarray  # (P,) node row of the new node t
    pair_graph: np.ndarray  # (P,)
    pair_label: np.ndarray  # (P,) 1.0 if j -> t is an edge
    pair_step: np.ndarray  # (P,) step index that scores this pair
    gate_weights: np.ndarray  # (N,) weight of each node row in the gate penalty
    n_passes: int  # encoder passes (non-empty prefixes) the gate penalty averages over

    @classmethod
    def build(cls, graphs: Sequence[MasGraph], end_index: int, include_self_loop: bool = True) -> StepLayout:
        pack = GraphPack.from_graphs(graphs, include_self_loop)
        n_rows = pack.n_rows
        sg, sp, st, pool_rows, start = [], [], [], [], []
        ps, pt, pg, pl, pstep = [], [], [], [], []
        gate_w = np.zeros(n_rows)
        n_passes = sum(len(g.nodes) for g in graphs)
        for gi, g in enumerate(graphs):
            base = int(pack.offsets[gi])
            n = len(g.nodes)
            edge_set = g.edge_set
            for s in range(n + 1):
                step_index = len(sg)
                sg.append(gi)
                sp.append(s)
                st.append(g.nodes[s] if s < n else end_index)
                row = np.zeros(n_rows)
                if s > 0:
                    row[base : base + s] = 1.0 / s
                    # prefix pass of size s: gates of its s rows, averaged
                    gate_w[base : base + s] += 1.0 / s
                pool_rows.append(row)
                start.append(1.0 if s == 0 else 0.0)
                if 0 < s < n:
                    for j in range(s):
                        ps.append(base + j)
                        pt.append(base + s)
                        pg.append(gi)
                        pl.append(1.0 if (j, s) in edge_set else 0.0)
                        pstep.append(step_index)
        ints = lambda v: np.asarray(v, dtype=np.intp)  # noqa: E731
        return cls(
            pack,
            ints(sg),
            ints(sp),
            ints(st),
            np.asarray(pool_rows).reshape(len(sg), n_rows),
            np.asarray(start)[:, None],
            ints(ps),
            ints(pt),
            ints(pg),
            np.asarray(pl),
            ints(pstep),
            gate_w / max(n_passes, 1),
            n_passes,
        )


@dataclass
class ForwardResult:
    layout: StepLayout
    z: Tensor  # (B, d_task)
    w: Tensor  # (B, K_e)
    role_probs: Tensor  # (S, R + 1)
    edge_probs: Tensor | None  # (P, 1), clamped to [EDGE_EPS, 1 - EDGE_EPS]
    gates: list[Tensor]

    def gate_penalty(self) -> Tensor:
        """Mean gate L1 over every non-empty teacher-forcing prefix pass in the batch."""
        return gate_l1(self.gates, self.layout.gate_weights)

    def node_nll(self) -> Tensor:
        lay = self.layout
        onehot = np.zeros(self.role_probs.shape)
        onehot[np.arange(len(lay.step_target)), lay.step_target] = 1.0
        picked = tsum(mul(self.role_probs, Tensor(onehot)), axis=1)
        return scale(log(picked), -1.0)

    def edge_nll(self) -> Tensor | None:
        if self.edge_probs is None:
            return None
        y = Tensor(self.layout.pair_label[:, None])
        one = Tensor(np.ones((1, 1)))
        ll = add(mul(y, log(self.edge_probs)), mul(sub(one, y), log(sub(one, self.edge_probs))))
        return scale(ll, -1.0)

    def graph_loss_sum(self) -> Tensor:
        """Sum over graphs of the per-graph teacher-forced loss."""
        total = tsum(self.node_nll())
        edges = self.edge_nll()
        if edges is not None:
            total = add(total, tsum(edges))
        return total

    def per_step_losses(self) -> tuple[np.ndarray, np.ndarray]:
        """(node loss, edge loss) for every step row, as plain arrays."""
        node = self.node_nll().data.copy()
        edge = np.zeros_like(node)
        e = self.edge_nll()
        if e is not None:
            np.add.at(edge, self.layout.pair_step, e.data[:, 0])
        return node, edge


def task_vectors(model: Model, embeddings: np.ndarray | None, batch: int) -> Tensor:
    """Encoded task vectors for a (B, embed_dim) batch, or zeros when ``embeddings`` is None."""
    if embeddings is None:
        return Tensor(np.zeros((batch, model.config.d_task)))
    return encode_task(np.asarray(embeddings), model.params)


def teacher_forcing(
    model: Model, graphs: Sequence[MasGraph], z: Tensor, layout: StepLayout | None = None
) -> ForwardResult:
    """Score every ground-truth decision of every graph in one batched pass."""
    for i, g in enumerate(graphs):
        if any(not 0 <= r < model.config.n_roles for r in g.nodes):
            raise DataError(f"graph {i} has a role index outside the vocabulary: {list(g.nodes)}")
    lay = layout or StepLayout.build(graphs, model.config.n_roles, model.config.include_self_loop)
    pack = lay.pack
    enc = encode(model, pack, take_rows(z, pack.graph_of))
    pool = add(
        matmul(Tensor(lay.pool), enc.final),
        matmul(Tensor(lay.start), model.params["enc.start"]),
    )
    w = gate(model, z)
    role_probs = predict_role(model, pool, take_rows(z, lay.step_graph), take_rows(w, lay.step_graph))
    edge_probs = None
    if len(lay.pair_src):
        raw = predict_edge(
            model,
            take_rows(enc.final, lay.pair_src),
            take_rows(enc.initial, lay.pair_tgt),
            take_rows(z, lay.pair_graph),
            take_rows(w, lay.pair_graph),
        )
        edge_probs = clamp(raw, EDGE_EPS, 1.0 - EDGE_EPS)
    return ForwardResult(lay, z, w, role_probs, edge_probs, enc.gates)


# --- per-decision probabilities shared by likelihood and decoding -------------


def role_logprob(dist: np.ndarray, choice: int, placed: int, c: GenerationConstraints | None) -> float:
    end = len(dist) - 1
    if c is None:
        return float(np.log(dist[choice]))
    if placed >= c.max_nodes:
        return 0.0 if choice == end else -np.inf
    if placed < c.min_nodes:
        if choice == end:
            return -np.inf
        return float(np.log(dist[choice]) - np.log(dist[:end].sum()))
    return float(np.log(dist[choice]))


def decode_distribution(dist: np.ndarray, placed: int, c: GenerationConstraints) -> np.ndarray:
    """The distribution generation actually draws from at this step."""
    end = len(dist) - 1
    if placed >= c.max_nodes:
        out = np.zeros_like(dist)
        out[end] = 1.0
        return out
    out = dist.copy()
    if placed < c.min_nodes:
        out[end] = 0.0
        out /= out.sum()
    return out


def fallback_source(probs: np.ndarray) -> int:
    return int(np.argmax(probs))  # first maximum = lowest index


def edge_set_logprob(probs: np.ndarray, chosen: Sequence[int], forced_fallback: bool) -> float:
    """log P(incoming edge set) given independent Bernoulli(p_j) draws.

    With ``forced_fallback`` an empty draw is replaced by the single edge from
    the most probable provider, so that set absorbs the empty draw's mass.
    """
    mask = np.zeros(len(probs), dtype=bool)
    mask[list(chosen)] = True
    none = float(np.log1p(-probs).sum())
    lp = float(np.log(probs[mask]).sum() + np.log1p(-probs[~mask]).sum())
    if not forced_fallback or len(probs) == 0:
        return lp
    if not mask.any():
        return -np.inf
    if mask.sum() == 1 and mask[fallback_source(probs)]:
        return float(np.logaddexp(lp, none))
    return lp


@dataclass
class Likelihood:
    node_losses: np.ndarray  # (n + 1,) negative log-prob of each role / END decision
    edge_losses: np.ndarray  # (n + 1,) negative log-prob of each step's incoming edge set
    total: float


def log_likelihood(
    model: Model,
    graph: MasGraph,
    z,
    constraints: GenerationConstraints | None = None,
) -> Likelihood:
    """Teacher-forced negative log-likelihood of ``graph`` (node order = generation order).

    ``z`` is a (d_task,) / (1, d_task) task vector. Without constraints this is
    the training objective; with constraints it is -log P(generate emits graph).
    """
    z = z if isinstance(z, Tensor) else Tensor(np.atleast_2d(np.asarray(z, dtype=np.float64)))
    with no_grad():
        res = teacher_forcing(model, [graph], z)
    if constraints is None:
        node, edge = res.per_step_losses()
        return Likelihood(node, edge, float(node.sum() + edge.sum()))
    lay = res.layout
    probs = res.role_probs.data
    n = len(graph.nodes)
    node = np.array(
        [-role_logprob(probs[s], int(lay.step_target[s]), s, constraints) for s in range(n + 1)]
    )
    edge = np.zeros(n + 1)
    if res.edge_probs is not None:
        ep = res.edge_probs.data[:, 0]
        for s in range(1, n):
            sel = lay.pair_step == s
            chosen = [j for j in range(s) if (j, s) in graph.edge_set]
            edge[s] = -edge_set_logprob(ep[sel], chosen, forced_fallback=True)
    return Likelihood(node, edge, float(node.sum() + edge.sum()))


# --- decoding ----------------------------------------------------------------


@dataclass
class GenerationStep:
    role: int  # role index, or END index
    role_probs: np.ndarray
    role_logprob: float
    edge_probs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    edges: tuple[int, ...] = ()  # providers j of the new node
    edge_logprob: float = 0.0
    forced_edge: bool = False
    cumulative_logprob: float = 0.0

    def to_json(self) -> dict:
        return {
            "role": self.role,
            "role_probs": self.role_probs.tolist(),
            "role_logprob": self.role_logprob,
            "edge_probs": self.edge_probs.tolist(),
            "edges": list(self.edges),
            "edge_logprob": self.edge_logprob,
            "forced_edge": self.forced_edge,
            "cumulative_logprob": self.cumulative_logprob,
        }


@dataclass
class GenerationTrace:
    steps: list[GenerationStep]

    @property
    def logprob(self) -> float:
        return self.steps[-1].cumulative_logprob if self.steps else 0.0

    def to_json(self) -> list[dict]:
        return [s.to_json() for s in self.steps]


def query_task_vector(model: Model, query: str, provider: EmbeddingProvider | None = None) -> Tensor:
    with no_grad():
        return encode_task(embed_text(query, provider).vector, model.params)


def generate(
    query: str | None,
    model: Model,
    constraints: GenerationConstraints = GenerationConstraints(),
    task_vector=None,
    call_id: int = 0,
    provider: EmbeddingProvider | None = None,
) -> tuple[MasGraph, GenerationTrace]:
    """Decode one graph. ``task_vector`` overrides the query embedding (e.g. zeros)."""
    c = constraints
    if task_vector is None:
        z = query_task_vector(model, query, provider)
    else:
        z = Tensor(np.atleast_2d(np.asarray(task_vector, dtype=np.float64)))
    rng = make_rng(c.seed, "generate", call_id) if c.mode == "sample" else None
    end = model.config.n_roles
    nodes: list[int] = []
    edges: list[tuple[int, int]] = []
    steps: list[GenerationStep] = []
    cum = 0.0
    with no_grad():
        w = gate(model, z)
        while True:
            placed = len(nodes)
            if placed:
                pack = GraphPack.from_graphs([MasGraph(tuple(nodes), tuple(edges))], model.config.include_self_loop)
                enc = encode(model, pack, take_rows(z, np.zeros(placed, dtype=np.intp)))
                pool = global_pool(model, enc.final)
            else:
                enc = None
                pool = global_pool(model, None)
            dist = predict_role(model, pool, z, w).data[0]
            draw = decode_distribution(dist, placed, c)
            if c.mode == "greedy":
                choice = int(np.argmax(draw))
            else:
                choice = int(np.searchsorted(np.cumsum(draw), rng.random() * draw.sum(), side="right"))
                choice = min(choice, len(draw) - 1)
            r_lp = role_logprob(dist, choice, placed, c)
            cum += r_lp
            step = GenerationStep(choice, dist, r_lp)
            if choice == end:
                step.cumulative_logprob = cum
                steps.append(step)
                break
            if placed:
                h_new = init_node_states(model, np.array([choice]))
                src = enc.final
                probs = predict_edge(
                    model,
                    src,
                    take_rows(h_new, np.zeros(placed, dtype=np.intp)),
                    take_rows(z, np.zeros(placed, dtype=np.intp)),
                    take_rows(w, np.zeros(placed, dtype=np.intp)),
                ).data[:, 0]
                probs = np.clip(probs, EDGE_EPS, 1.0 - EDGE_EPS)
                if c.mode == "greedy":
                    chosen = [j for j in range(placed) if probs[j] > 0.5]
                else:
                    u = rng.random(placed)
                    chosen = [j for j in range(placed) if u[j] < probs[j]]
                forced = not chosen
                if forced:
                    chosen = [fallback_source(probs)]
                e_lp = edge_set_logprob(probs, chosen, forced_fallback=True)
                cum += e_lp
                step.edge_probs = probs
                step.edges = tuple(chosen)
                step.edge_logprob = e_lp
                step.forced_edge = forced
                edges.extend((j, placed) for j in chosen)
            nodes.append(choice)
            step.cumulative_logprob = cum
            steps.append(step)
    graph = MasGraph(tuple(nodes), tuple(edges), query)
    report = validate(graph, model.vocab)
    assert report.ok, report.problems
    assert c.min_nodes <= len(nodes) <= c.max_nodes
    return graph, GenerationTrace(steps)


def score_topology_choice(
    query: str | None,
    candidates: Sequence[MasGraph],
    model: Model,
    task_vector=None,
    provider: EmbeddingProvider | None = None,
) -> list[tuple[MasGraph, float]]:
    """Rank candidates by model log-likelihood (highest first).

    Ties: fewer edges first, then the lexicographically smaller edge string.
    """
    if not candidates:
        raise InputError("no candidate graphs to rank")
    for i, g in enumerate(candidates):
        report = validate(g, model.vocab)
        if not report.ok:
            raise DataError(f"candidate {i} ({format_edges(g.edges)!r}) is invalid: {report.problems}")
    z = query_task_vector(model, query, provider) if task_vector is None else task_vector
    scored = [(g, -log_likelihood(model, g, z).total) for g in candidates]
    return sorted(scored, key=lambda item: (-item[1], len(item[0].edges), format_edges(item[0].edges)))
