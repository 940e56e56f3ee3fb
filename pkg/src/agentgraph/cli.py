"""Command-line entry point: ``agentgraph <command> ...``.

Settings resolve as flags > JSON config file (``--config``) > built-in
defaults. Endpoints and tokens are read from the environment only.
Exit codes: 0 ok, 2 usage, 3 data, 4 numeric, 5 transport.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

from agentgraph.errors import (
    AgentGraphError,
    ConfigurationError,
    DataError,
    ExecutionError,
    UsageError,
)

log = logging.getLogger("agentgraph")


@dataclass
class RunConfig:
    """Every tunable, addressable by key from a config file or a flag."""

    # model
    n_roles: int = 19
    embed_dim: int = 384
    task_hidden: int = 256
    d_task: int = 128
    d_h: int = 256
    layers: int = 4
    n_experts: int = 8
    expert_hidden: int = 256
    gate_hidden: int = 256
    include_self_loop: bool = True
    # training
    epochs: int = 50
    batch_size: int = 32
    lr: float | None = None  # None -> stage default
    balance_weight: float = 0.2
    gate_weight: float = 0.1
    seed: int = 0
    # generation
    min_nodes: int = 2
    max_nodes: int = 6
    # execution
    rounds: int = 1
    aggregation: str = "last-sink"
    agent_temperature: float = 0.0
    # synthesis
    synth_temperature: float = 0.7
    synth_model: str = "gpt-4o-mini"
    agent_model: str = "gpt-4o"

    @classmethod
    def resolve(cls, config_path: str | None, overrides: dict) -> RunConfig:
        values: dict = {}
        if config_path:
            try:
                raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigurationError(f"cannot read config {config_path}: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigurationError("config file must hold a JSON object")
            values.update(raw)
        values.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {unknown}")
        secrets = [k for k in values if "token" in k.lower() or "key" in k.lower()]
        if secrets:
            raise ConfigurationError(f"secrets belong in the environment, not config: {secrets}")
        return cls(**values)

    def model_config(self):
        from agentgraph.model import ModelConfig

        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})


def _config(args, **overrides) -> RunConfig:
    return RunConfig.resolve(getattr(args, "config", None), overrides)


def _write_text_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# data ---------------------------------------------------------------------------


def _print_summary(manifest) -> None:
    print(f"corpus {manifest.corpus_id}: {manifest.record_count} records (stage {manifest.stage})")
    print(f"{'topology':<12}{'count':>7}")
    for kind, n in manifest.topology_histogram.items():
        print(f"{kind:<12}{n:>7}")
    print(f"{'agents':<12}{'count':>7}")
    for size, n in manifest.size_histogram.items():
        print(f"{size:<12}{n:>7}")


def cmd_data(args) -> int:
    from agentgraph import data
    from agentgraph.http import ChatClient

    cfg = _config(args, seed=args.seed)
    if args.action == "gen-stage1":
        records, manifest = data.gen_stage1(count=args.count or 800, seed=cfg.seed)
    elif args.action == "gen-stage2":
        if args.llm:
            client = ChatClient.from_env(cfg.synth_temperature, prefix="AGENTGRAPH_SYNTH")
            if not os.environ.get("AGENTGRAPH_SYNTH_MODEL"):
                client.model = cfg.synth_model
            records, rejected = data.gen_stage2_llm(client, count=args.count or 1000)
            manifest = data.CorpusManifest.describe(
                "stage2-llm", 2, cfg.seed, records, source="llm", rejected_lines=len(rejected)
            )
        else:
            records, manifest = data.gen_stage2_templated(count=args.count or 1000, seed=cfg.seed)
    else:
        fixture = None
        if args.fixture:
            fixture = json.loads(Path(args.fixture).read_text(encoding="utf-8"))
        records, manifest = data.build_stage3(
            per_domain=args.per_domain, size=args.size, seed=cfg.seed, fixture_scores=fixture,
            queries=_fixture_queries(fixture, args.size, cfg.seed) if fixture else None,
        )
    side = data.save_corpus(args.out, records, manifest)
    _print_summary(manifest)
    print(f"wrote {args.out} and {side}")
    return 0


def _fixture_queries(fixture: dict, size: int, seed: int):
    """Fixture files name queries and may pin roles: {query: {"roles": [...], kind: score, ...}}."""
    from agentgraph.data import Stage3Query, load_domain_roles

    default_roles = load_domain_roles()["knowledge"][:size]
    out = []
    for query, entry in fixture.items():
        roles = tuple(entry.pop("roles", default_roles))
        if len(roles) != size:
            raise DataError(f"fixture query {query!r} lists {len(roles)} roles, size is {size}")
        out.append(Stage3Query(query, entry.pop("domain", "fixture"), roles, ()))
    return out


# train --------------------------------------------------------------------------


def cmd_train(args) -> int:
    from agentgraph.data import read_jsonl
    from agentgraph.model import Model
    from agentgraph.training import StagePlan, records_to_examples, run_stage

    cfg = _config(
        args, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
        balance_weight=args.balance_weight, gate_weight=args.gate_weight,
    )
    if args.stage > 1 and not args.init:
        raise UsageError(f"stage {args.stage} needs --init (a stage {args.stage - 1} checkpoint)")
    if args.init and not Path(args.init).exists():
        raise UsageError(f"--init {args.init} does not exist")
    if not Path(args.data).exists():
        raise UsageError(f"--data {args.data} does not exist")
    plan = StagePlan(
        stage=args.stage, data=args.data, epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
        init=args.init, balance_weight=cfg.balance_weight, gate_weight=cfg.gate_weight, seed=cfg.seed,
    )
    print(f"stage {plan.stage}: lr {plan.lr}, epochs {plan.epochs}, batch {plan.batch_size}, "
          f"task vectors {plan.task_mode}, init {plan.init or 'fresh'}")
    model = Model.load(args.init) if args.init else Model.create(cfg.model_config(), seed=cfg.seed)
    records = [r.to_json() for r in read_jsonl(args.data)]
    examples = records_to_examples(records, model.vocab, with_queries=plan.stage > 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"stage{plan.stage}_metrics.jsonl", "w", encoding="utf-8") as metrics:
        result = run_stage(plan, examples, model=model, out_dir=out, metrics_stream=metrics)
    if not result.metrics:
        result.model.save(out / f"stage{plan.stage}_final.ckpt", {"stage": plan.stage, "epoch": 0})
    _write_text_atomic(out / f"stage{plan.stage}_plan.json", json.dumps(plan.to_dict(), indent=2) + "\n")
    last = result.metrics[-1]["loss"] if result.metrics else float("nan")
    print(f"done: final epoch loss {last:.5f}, best {result.best_loss:.5f}; checkpoints in {out}")
    return 0


# generate / rank ----------------------------------------------------------------


def cmd_generate(args) -> int:
    from agentgraph.generator import GenerationConstraints, generate
    from agentgraph.model import Model

    cfg = _config(args, seed=args.seed, min_nodes=args.min_nodes, max_nodes=args.max_nodes)
    constraints = GenerationConstraints(
        cfg.min_nodes, cfg.max_nodes, "sample" if args.sample else "greedy", cfg.seed
    )
    model = Model.load(args.ckpt)
    graph, trace = generate(args.query, model, constraints)
    if args.dot:
        _write_text_atomic(args.dot, graph.to_dot(model.vocab))
    out = graph.to_json(model.vocab)
    out["agent_count"] = len(graph)
    out["logprob"] = trace.logprob
    print(json.dumps(out))
    if args.verbose:
        print(json.dumps(trace.to_json(), indent=2), file=sys.stderr)
    return 0


def _load_graphs(path: str, vocab) -> list:
    from agentgraph.graph import MasGraph

    text = Path(path).read_text(encoding="utf-8").strip()
    if text.startswith("["):
        objs = json.loads(text)
    else:
        objs = [json.loads(line) for line in text.splitlines() if line.strip()]
    try:
        return [MasGraph.from_json(o, vocab) for o in objs]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed graph object ({exc})") from exc


def cmd_rank(args) -> int:
    from agentgraph.generator import score_topology_choice
    from agentgraph.model import Model

    model = Model.load(args.ckpt)
    candidates = _load_graphs(args.candidates, model.vocab)
    ranked = score_topology_choice(args.query, candidates, model)
    for rank, (g, ll) in enumerate(ranked, 1):
        row = g.to_json(model.vocab)
        row.update(rank=rank, log_likelihood=ll)
        print(json.dumps(row))
    return 0


# execute / export ---------------------------------------------------------------


def cmd_execute(args) -> int:
    from agentgraph.executor import ChatBackend, execute, mock_backend
    from agentgraph.graph import RoleVocabulary

    cfg = _config(args, rounds=args.rounds, seed=args.seed, aggregation=args.aggregation)
    if args.backend == "live":
        backend = ChatBackend.from_env(cfg.agent_temperature)
        if not os.environ.get("AGENTGRAPH_AGENT_MODEL"):
            backend.client.model = cfg.agent_model
    else:
        script = json.loads(Path(args.script).read_text(encoding="utf-8")) if args.script else None
        backend = mock_backend(args.mock, script=script, target_role=args.target_role)
    vocab = RoleVocabulary.default()
    graphs = _load_graphs(args.graph, vocab)
    if len(graphs) != 1:
        raise DataError(f"{args.graph} must hold exactly one graph, found {len(graphs)}")
    try:
        report = execute(graphs[0], args.query, backend, cfg.rounds, cfg.seed, vocab, cfg.aggregation)
    except ExecutionError as exc:
        if exc.partial_report is not None:
            print(exc.partial_report.dumps())
        raise
    print(report.dumps())
    return 0


def cmd_export(args) -> int:
    from agentgraph.graph import RoleVocabulary
    from agentgraph.numeric import checkpoint

    if args.ckpt:
        manifest, arrays = checkpoint.load(args.ckpt)
        manifest["parameter_count"] = int(sum(a.size for n, a in arrays.items() if not n.startswith("buffer.")))
        text = json.dumps(manifest, indent=2) + "\n"
    else:
        vocab = RoleVocabulary.default()
        graphs = _load_graphs(args.graph, vocab)
        if args.format == "dot":
            text = "".join(g.to_dot(vocab, name=f"mas{i}") for i, g in enumerate(graphs))
        else:
            text = "".join(json.dumps(g.to_json(vocab)) + "\n" for g in graphs)
    if args.out:
        _write_text_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


# parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agentgraph", description="Task-conditioned agent-graph generator.")
    p.add_argument("--config", help="JSON file of RunConfig keys")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("data", help="build training corpora")
    d.add_argument("action", choices=["gen-stage1", "gen-stage2", "build-stage3"])
    d.add_argument("--count", type=int)
    d.add_argument("--seed", type=int)
    d.add_argument("--out", required=True)
    d.add_argument("--llm", action="store_true", help="stage 2 via a chat endpoint (AGENTGRAPH_SYNTH_URL)")
    d.add_argument("--per-domain", type=int, default=40)
    d.add_argument("--size", type=int, default=4)
    d.add_argument("--fixture", help="stage 3 score fixture JSON")
    d.set_defaults(func=cmd_data)

    t = sub.add_parser("train", help="run one curriculum stage")
    t.add_argument("--stage", type=int, choices=[1, 2, 3], required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--init")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--balance-weight", type=float)
    t.add_argument("--gate-weight", type=float)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="decode a graph for a query")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--query", required=True)
    g.add_argument("--sample", action="store_true")
    g.add_argument("--seed", type=int)
    g.add_argument("--min-nodes", type=int)
    g.add_argument("--max-nodes", type=int)
    g.add_argument("--dot")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("rank", help="rank candidate graphs for a query")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--query", required=True)
    r.add_argument("--candidates", required=True, help="JSON array or JSONL of graph objects")
    r.set_defaults(func=cmd_rank)

    e = sub.add_parser("execute", help="run a graph of agents")
    e.add_argument("--graph", required=True)
    e.add_argument("--query", required=True)
    e.add_argument("--backend", choices=["mock", "live"], default="mock")
    e.add_argument("--mock", choices=["echo", "scripted", "adversarial"], default="echo")
    e.add_argument("--script")
    e.add_argument("--target-role")
    e.add_argument("--rounds", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--aggregation", choices=["last-sink", "majority-vote"])
    e.set_defaults(func=cmd_execute)

    x = sub.add_parser("export", help="dump a checkpoint manifest or convert graphs")
    src = x.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--graph")
    x.add_argument("--format", choices=["json", "dot"], default="json")
    x.add_argument("--out")
    x.set_defaults(func=cmd_export)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ExecutionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.__cause__
        return cause.exit_code if isinstance(cause, AgentGraphError) else exc.exit_code
    except AgentGraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
