"""Run all three training stages back to back on freshly generated corpora.

    python3 scripts/curriculum.py --out runs/demo --epochs 5 --small
"""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

from agentgraph.data import build_stage3, gen_stage1, gen_stage2_templated, save_corpus
from agentgraph.generator import generate
from agentgraph.graph import RoleVocabulary, format_edges
from agentgraph.model import Model, ModelConfig
from agentgraph.training import StagePlan, records_to_examples, run_stage

SMALL = dict(d_h=32, d_task=32, task_hidden=32, gate_hidden=32, expert_hidden=32, layers=2, n_experts=4)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/curriculum")
    ap.add_argument("--epochs", type=int, default=50, help="epochs per stage")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--small", action="store_true", help="shrink every width to 32 for a quick run")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    vocab = RoleVocabulary.default()
    corpora = {
        1: gen_stage1(800, seed=args.seed),
        2: gen_stage2_templated(1000, seed=args.seed),
        3: build_stage3(seed=args.seed),
    }
    for stage, (records, manifest) in corpora.items():
        save_corpus(out / f"stage{stage}.jsonl", records, manifest)

    config = ModelConfig(**SMALL) if args.small else ModelConfig()
    model = Model.create(config, seed=args.seed, vocab=vocab)
    for stage, (records, _) in corpora.items():
        examples = records_to_examples([r.to_json() for r in records], vocab, with_queries=stage > 1)
        plan = StagePlan(stage, epochs=args.epochs, seed=args.seed)
        with open(out / f"stage{stage}_metrics.jsonl", "w", encoding="utf-8") as metrics:
            model = run_stage(plan, examples, model, out_dir=out, metrics_stream=metrics).model

    for query in ("Write a function that merges two sorted lists, with tests.",
                  "A 44-year-old patient reports recurring migraines. What are likely causes?"):
        g, trace = generate(query, model)
        roles = [vocab.names[r] for r in g.nodes]
        print(json.dumps({"query": query, "roles": roles, "edges": format_edges(g.edges), "logprob": trace.logprob}))


if __name__ == "__main__":
    main()
