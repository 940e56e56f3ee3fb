"""Composite loss, the three-stage curriculum driver and checkpoint lifecycle."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from agentgraph.embed import EmbeddingProvider, HashEmbedder
from agentgraph.errors import ConfigurationError, DataError, NumericError
from agentgraph.generator import StepLayout, task_vectors, teacher_forcing
from agentgraph.graph import MasGraph, RoleVocabulary, parse_edges, reindex_topologically
from agentgraph.model import Model
from agentgraph.moe import balance_loss
from agentgraph.numeric import (
    GradientTape,
    OptimizerState,
    Tensor,
    adam_step,
    add,
    backward,
    make_rng,
    plateau_update,
    scale,
)
from agentgraph.numeric.tensor import no_grad

log = logging.getLogger(__name__)

STAGE_LR = {1: 2e-3, 2: 2e-3, 3: 5e-4}


@dataclass(frozen=True)
class LossWeights:
    balance: float = 0.2
    gate: float = 0.1

    def __post_init__(self):
        if self.balance < 0 or self.gate < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainingExample:
    graph: MasGraph
    embedding: np.ndarray | None = None  # query embedding; None for unconditional data


def records_to_examples(
    records: Sequence[dict],
    vocab: RoleVocabulary,
    provider: EmbeddingProvider | None = None,
    with_queries: bool = True,
) -> list[TrainingExample]:
    """Convert JSON records ({query, roles, edges, ...}) to examples.

    Graphs are re-indexed by the deterministic topological order, so any
    valid DAG is accepted regardless of how its nodes were numbered.
    """
    provider = provider or HashEmbedder()
    graphs, queries = [], []
    for i, rec in enumerate(records):
        try:
            nodes = [vocab.index(r) for r in rec["roles"]]
            edges = parse_edges(rec.get("edges", ""), strict=False)
            raw = MasGraph(tuple(nodes), edges, rec.get("query"))
            graphs.append(reindex_topologically(_relabel_ok(raw)))
        except (KeyError, ValueError) as exc:
            raise DataError(f"record {i}: {exc}") from exc
        queries.append(rec.get("query"))
    if not with_queries:
        return [TrainingExample(g) for g in graphs]
    missing = [i for i, q in enumerate(queries) if not q]
    if missing:
        raise DataError(f"records {missing[:10]} have no query; conditional stages need one")
    emb = provider.embed_many(queries)
    return [TrainingExample(g, e) for g, e in zip(graphs, emb)]


def _relabel_ok(g: MasGraph) -> MasGraph:
    n = len(g.nodes)
    for a, b in g.edges:
        if not (0 <= a < n and 0 <= b < n) or a == b:
            raise DataError(f"edge {a}->{b} invalid for {n} nodes")
    if len(set(g.edges)) != len(g.edges):
        raise DataError("duplicate edges")
    return g


@dataclass
class LossReport:
    total: float
    graph: float  # mean per-graph teacher-forced loss
    balance: float
    gate: float
    usage: np.ndarray  # batch-mean expert weights
    batch_size: int


def total_loss(
    model: Model,
    batch: Sequence[TrainingExample],
    weights: LossWeights = LossWeights(),
    task_mode: str = "encoded",
    layout: StepLayout | None = None,
) -> tuple[Tensor, LossReport]:
    """mean L_graph + w_balance * L_balance + w_gate * L_gate, plus its components."""
    if not batch:
        raise DataError("empty batch")
    graphs = [ex.graph for ex in batch]
    if task_mode == "zero":
        z = task_vectors(model, None, len(batch))
    elif task_mode == "encoded":
        if any(ex.embedding is None for ex in batch):
            raise DataError("encoded task mode needs a query embedding for every example")
        z = task_vectors(model, np.stack([ex.embedding for ex in batch]), len(batch))
    else:
        raise ConfigurationError(f"unknown task mode {task_mode!r}")
    res = teacher_forcing(model, graphs, z, layout)
    graph_term = scale(res.graph_loss_sum(), 1.0 / len(batch))
    bal = balance_loss(res.w)
    gate_term = res.gate_penalty()
    total = add(add(graph_term, scale(bal, weights.balance)), scale(gate_term, weights.gate))
    parts = [graph_term.item(), bal.item(), gate_term.item(), total.item()]
    if not all(math.isfinite(v) for v in parts):
        raise NumericError(f"non-finite loss component: {parts}")
    report = LossReport(parts[3], parts[0], parts[1], parts[2], res.w.data.mean(axis=0), len(batch))
    return total, report


@dataclass
class StagePlan:
    stage: int
    data: str | None = None
    epochs: int = 50
    batch_size: int = 32
    lr: float | None = None  # None -> stage default
    init: str | None = None  # None -> fresh; else checkpoint path
    task_mode: str | None = None  # None -> stage default
    balance_weight: float = 0.2
    gate_weight: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigurationError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.lr is None:
            self.lr = STAGE_LR[self.stage]
        if self.task_mode is None:
            self.task_mode = "zero" if self.stage == 1 else "encoded"
        if self.stage == 1 and self.task_mode != "zero":
            raise ConfigurationError("stage 1 trains with zero task vectors")
        if self.stage > 1 and self.task_mode != "encoded":
            raise ConfigurationError(f"stage {self.stage} needs encoded task vectors")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and lr > 0 required")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.balance_weight, self.gate_weight)

    @classmethod
    def from_dict(cls, raw: dict) -> StagePlan:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"unknown stage-plan keys: {unknown}")
        return cls(**raw)

    @classmethod
    def from_file(cls, path) -> StagePlan:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


def usage_entropy(usage: np.ndarray) -> float:
    p = np.asarray(usage, dtype=np.float64)
    p = p / p.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class StageResult:
    model: Model
    metrics: list[dict] = field(default_factory=list)
    best_loss: float = float("inf")


def run_stage(
    plan: StagePlan,
    examples: Sequence[TrainingExample],
    model: Model | None = None,
    out_dir: str | Path | None = None,
    metrics_stream: IO[str] | None = None,
) -> StageResult:
    """Train one curriculum stage: seeded shuffles, Adam per batch, plateau decay per epoch.

    Without ``model`` the plan's ``init`` checkpoint is loaded; stages 2 and 3
    refuse to start from nothing.
    """
    if model is None:
        if plan.init is None:
            if plan.stage > 1:
                raise ConfigurationError(f"stage {plan.stage} needs an init checkpoint")
            raise ConfigurationError("stage 1 needs a model (fresh) or an init checkpoint")
        model = Model.load(plan.init)
    if plan.task_mode == "encoded" and any(ex.embedding is None for ex in examples):
        raise DataError(f"stage {plan.stage} data must carry queries")
    if plan.epochs == 0:
        return StageResult(model, [])
    if not examples:
        raise DataError("no training examples")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state = OptimizerState(lr=plan.lr)
    params = dict(model.params)
    result = StageResult(model)
    n = len(examples)
    for epoch in range(1, plan.epochs + 1):
        started = time.perf_counter()
        order = make_rng(plan.seed, "shuffle", plan.stage, epoch).permutation(n)
        lr_used = state.lr
        sums = {"total": 0.0, "graph": 0.0, "balance": 0.0, "gate": 0.0}
        usage = np.zeros(model.config.n_experts)
        n_batches = 0
        for lo in range(0, n, plan.batch_size):
            batch = [examples[i] for i in order[lo : lo + plan.batch_size]]
            current = model.with_params(params)
            with GradientTape() as tape:
                loss, report = total_loss(current, batch, plan.weights, plan.task_mode)
            grads = backward(tape, loss, params)
            params = adam_step(state, params, grads)
            for key in sums:
                sums[key] += getattr(report, key)
            usage += report.usage * report.batch_size
            n_batches += 1
        model = model.with_params(params)
        epoch_loss = sums["total"] / n_batches
        usage /= n
        row = {
            "stage": plan.stage,
            "epoch": epoch,
            "loss": epoch_loss,
            "graph_loss": sums["graph"] / n_batches,
            "balance_loss": sums["balance"] / n_batches,
            "gate_loss": sums["gate"] / n_batches,
            "mean_gate": sums["gate"] / n_batches,
            "lr": lr_used,
            "expert_usage": usage.tolist(),
            "usage_entropy": usage_entropy(usage),
            "seconds": round(time.perf_counter() - started, 3),
        }
        reduced = plateau_update(state, epoch_loss)
        row["lr_reduced"] = reduced
        result.metrics.append(row)
        log.info("stage %d epoch %d loss %.5f lr %.2e", plan.stage, epoch, epoch_loss, lr_used)
        if metrics_stream is not None:
            metrics_stream.write(json.dumps(_deterministic(row)) + "\n")
            metrics_stream.flush()
        if epoch_loss < result.best_loss:
            result.best_loss = epoch_loss
            if out is not None:
                model.save(out / f"stage{plan.stage}_best.ckpt", {"stage": plan.stage, "epoch": epoch})
    result.model = model
    if out is not None:
        model.save(out / f"stage{plan.stage}_final.ckpt", {"stage": plan.stage, "epoch": plan.epochs})
    return result


def _deterministic(row: dict) -> dict:
    """Metrics row without wall-clock fields."""
    return {k: v for k, v in row.items() if k != "seconds"}


def evaluate_loss(model: Model, examples: Sequence[TrainingExample], weights: LossWeights, task_mode: str) -> LossReport:
    with no_grad():
        return total_loss(model, examples, weights, task_mode)[1]


def teacher_forced_accuracy(
    model: Model, examples: Sequence[TrainingExample], task_mode: str = "encoded"
) -> tuple[float, float]:
    """(node accuracy, edge decision accuracy) under teacher forcing.

    A role decision is right when the argmax class (roles + END) is the true
    one; an edge decision is right when (p > 0.5) matches the label.
    """
    graphs = [ex.graph for ex in examples]
    with no_grad():
        if task_mode == "zero":
            z = task_vectors(model, None, len(graphs))
        else:
            z = task_vectors(model, np.stack([ex.embedding for ex in examples]), len(graphs))
        res = teacher_forcing(model, graphs, z)
    lay = res.layout
    node_acc = float(np.mean(res.role_probs.data.argmax(axis=1) == lay.step_target))
    if res.edge_probs is None:
        return node_acc, 1.0
    edge_acc = float(np.mean((res.edge_probs.data[:, 0] > 0.5) == (lay.pair_label > 0.5)))
    return node_acc, edge_acc
