"""Overfit the 20-pair memorization set and report teacher-forced accuracy.

Defaults are the stage-3 settings; flags let you vary them, e.g.

    python3 scripts/memorization.py --epochs 500 --lr 2e-3 --batch-size 4
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from agentgraph.data import memorization_set
from agentgraph.embed import encode_task
from agentgraph.generator import generate, log_likelihood
from agentgraph.graph import RoleVocabulary
from agentgraph.model import Model, ModelConfig
from agentgraph.numeric import no_grad
from agentgraph.training import StagePlan, records_to_examples, run_stage, teacher_forced_accuracy


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--lr", type=float, default=5e-4)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--balance-weight", type=float, default=0.2)
    ap.add_argument("--gate-weight", type=float, default=0.1)
    ap.add_argument("--width", type=int, help="shrink d_h, d_task and hidden widths to this value")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", action="store_true", help="print per-step losses for every pair")
    args = ap.parse_args()

    vocab = RoleVocabulary.default()
    records = memorization_set(20)
    examples = records_to_examples([r.to_json() for r in records], vocab)
    if args.width:
        w = args.width
        config = ModelConfig(d_h=w, d_task=w, task_hidden=w, gate_hidden=w, expert_hidden=w)
    else:
        config = ModelConfig()
    plan = StagePlan(3, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                     balance_weight=args.balance_weight, gate_weight=args.gate_weight, seed=args.seed)
    started = time.perf_counter()
    res = run_stage(plan, examples, Model.create(config, seed=args.seed, vocab=vocab))
    for row in res.metrics[:: max(1, args.epochs // 10)] + res.metrics[-1:]:
        print(f"epoch {row['epoch']:4d}  loss {row['loss']:.4f}  graph {row['graph_loss']:.4f}  lr {row['lr']:.2e}")
    node_acc, edge_acc = teacher_forced_accuracy(res.model, examples)
    exact = 0
    for rec, ex in zip(records, examples):
        g, _ = generate(rec.query, res.model)
        exact += g.nodes == ex.graph.nodes and g.edges == ex.graph.edges
    print(f"node acc {node_acc:.3f}  edge acc {edge_acc:.3f}  exact {exact}/20  "
          f"{time.perf_counter() - started:.0f}s")
    if args.steps:
        np.set_printoptions(precision=2, suppress=True)
        for ex in examples:
            with no_grad():
                z = encode_task(ex.embedding, res.model.params)
            lik = log_likelihood(res.model, ex.graph, z)
            print(len(ex.graph.nodes), lik.node_losses, lik.edge_losses)


if __name__ == "__main__":
    main()
