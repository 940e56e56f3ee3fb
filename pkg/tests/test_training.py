from __future__ import annotations

import io
import json

import numpy as np
import pytest

from agentgraph.data import gen_stage1, memorization_set
from agentgraph.embed import HashEmbedder
from agentgraph.errors import CheckpointError, ConfigurationError, DataError
from agentgraph.generator import teacher_forcing, task_vectors
from agentgraph.encoder import encode_graph, gate_l1
from agentgraph.graph import MasGraph, RoleVocabulary, make_canonical
from agentgraph.model import Model, ModelConfig
from agentgraph.moe import balance_loss
from agentgraph.numeric import GradientTape, Tensor, backward, no_grad
from agentgraph.training import (
    LossWeights,
    StagePlan,
    TrainingExample,
    evaluate_loss,
    records_to_examples,
    run_stage,
    total_loss,
    usage_entropy,
)

from conftest import tiny_model


def batch4(vocab):
    emb = HashEmbedder()
    specs = [("Chain", 3, "sort numbers"), ("Star", 4, "review an essay"), ("Mesh", 4, "prove a lemma"), ("Chain", 2, "greet")]
    return [
        TrainingExample(make_canonical(k, n, list(range(n)), q), emb.embed(q))
        for k, n, q in specs
    ]


def test_loss_weights_reject_negative():
    with pytest.raises(ConfigurationError):
        LossWeights(balance=-1.0)


def test_zero_lambdas_give_graph_loss(small_vocab):
    model = tiny_model(small_vocab)
    loss, rep = total_loss(model, batch4(small_vocab), LossWeights(0.0, 0.0))
    assert loss.item() == rep.graph


def test_components_recombine(small_vocab):
    model = tiny_model(small_vocab, seed=5)
    weights = LossWeights(0.2, 0.1)
    batch = batch4(small_vocab)
    _, rep = total_loss(model, batch, weights)
    assert abs(rep.graph + 0.2 * rep.balance + 0.1 * rep.gate - rep.total) <= 1e-12


def test_components_match_independent_recomputation(small_vocab):
    model = tiny_model(small_vocab, seed=6)
    batch = batch4(small_vocab)
    _, rep = total_loss(model, batch, LossWeights())
    with no_grad():
        z = task_vectors(model, np.stack([ex.embedding for ex in batch]), 4)
        per_graph = [teacher_forcing(model, [ex.graph], Tensor(z.data[i : i + 1])).graph_loss_sum().item()
                     for i, ex in enumerate(batch)]
        usage = balance_loss(teacher_forcing(model, [ex.graph for ex in batch], z).w).item()
    assert abs(np.mean(per_graph) - rep.graph) <= 1e-12
    assert abs(usage - rep.balance) <= 1e-12


def test_gate_term_is_mean_over_prefix_passes(small_vocab):
    model = tiny_model(small_vocab, seed=2)
    ex = batch4(small_vocab)[1]
    _, rep = total_loss(model, [ex], LossWeights())
    with no_grad():
        z = task_vectors(model, ex.embedding[None, :], 1)
        g = ex.graph
        passes = []
        for s in range(1, len(g.nodes) + 1):
            prefix = MasGraph(g.nodes[:s], tuple(e for e in g.edges if e[1] < s))
            passes.append(gate_l1(encode_graph(model, prefix, z).gates).item())
    assert abs(np.mean(passes) - rep.gate) <= 1e-12


def test_empty_batch_and_missing_queries(small_vocab):
    model = tiny_model(small_vocab)
    with pytest.raises(DataError):
        total_loss(model, [])
    with pytest.raises(DataError):
        total_loss(model, [TrainingExample(make_canonical("Chain", 2, [0, 1]))], task_mode="encoded")


def test_stage_plan_defaults_and_checks():
    assert StagePlan(1).lr == 2e-3 and StagePlan(2).lr == 2e-3 and StagePlan(3).lr == 5e-4
    assert StagePlan(1).task_mode == "zero" and StagePlan(3).task_mode == "encoded"
    with pytest.raises(ConfigurationError):
        StagePlan(4)
    with pytest.raises(ConfigurationError):
        StagePlan(1, task_mode="encoded")
    with pytest.raises(ConfigurationError):
        StagePlan.from_dict({"stage": 1, "learning_rate": 0.1})
    assert StagePlan.from_dict(StagePlan(2, epochs=3).to_dict()) == StagePlan(2, epochs=3)


def test_zero_epochs_returns_model_unchanged(small_vocab):
    model = tiny_model(small_vocab)
    res = run_stage(StagePlan(1, epochs=0), [], model)
    assert res.model is model and res.metrics == []


def test_later_stages_need_init(small_vocab):
    with pytest.raises(ConfigurationError, match="init checkpoint"):
        run_stage(StagePlan(2, epochs=1), batch4(small_vocab))


def test_stage_data_mismatch(small_vocab):
    plain = [TrainingExample(make_canonical("Chain", 2, [0, 1]))]
    with pytest.raises(DataError):
        run_stage(StagePlan(2, epochs=1), plain, tiny_model(small_vocab))


def test_stage1_task_encoder_gets_no_gradient(small_vocab):
    model = tiny_model(small_vocab)
    with GradientTape() as tape:
        loss, _ = total_loss(model, batch4(small_vocab), task_mode="zero")
    grads = backward(tape, loss, model.params)
    for name in ("task.w1", "task.b1", "task.w2", "task.b2"):
        assert not np.any(grads[name])
    assert np.any(grads["gate.w2"]) or np.any(grads["gate.b2"])


def test_metrics_are_deterministic(small_vocab, tmp_path):
    logs = []
    for _ in range(2):
        stream = io.StringIO()
        run_stage(StagePlan(3, epochs=4, batch_size=2, seed=9), batch4(small_vocab), tiny_model(small_vocab), metrics_stream=stream)
        logs.append(stream.getvalue())
    assert logs[0] == logs[1]
    rows = [json.loads(line) for line in logs[0].splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2, 3, 4]
    assert {"loss", "graph_loss", "balance_loss", "gate_loss", "lr", "expert_usage", "usage_entropy"} <= set(rows[0])


def test_run_stage_writes_checkpoints(small_vocab, tmp_path):
    res = run_stage(StagePlan(1, epochs=3, batch_size=2), batch4(small_vocab), tiny_model(small_vocab), out_dir=tmp_path)
    assert (tmp_path / "stage1_final.ckpt").exists() and (tmp_path / "stage1_best.ckpt").exists()
    loaded = Model.load(tmp_path / "stage1_final.ckpt")
    assert all(np.array_equal(loaded.params[n].data, res.model.params[n].data) for n in res.model.params)


def test_usage_entropy():
    assert abs(usage_entropy(np.full(4, 0.25)) - np.log(4)) <= 1e-12
    assert usage_entropy(np.array([1.0, 0.0])) == 0.0


def test_records_to_examples_reindexes(vocab):
    rec = {"query": "q", "roles": ["Critic", "Doctor", "Historian"], "edges": "2->0 1->2"}
    (ex,) = records_to_examples([rec], vocab)
    assert all(a < b for a, b in ex.graph.edges)
    assert [vocab.names[r] for r in ex.graph.nodes] == ["Doctor", "Historian", "Critic"]
    with pytest.raises(DataError):
        records_to_examples([{"query": "q", "roles": ["Nobody"], "edges": ""}], vocab)
    with pytest.raises(DataError):
        records_to_examples([{"roles": ["Critic"], "edges": ""}], vocab)


def test_checkpoint_round_trip(small_vocab, tmp_path):
    model = tiny_model(small_vocab, seed=12)
    batch = batch4(small_vocab)
    before = evaluate_loss(model, batch, LossWeights(), "encoded").total
    model.save(tmp_path / "m.ckpt")
    loaded = Model.load(tmp_path / "m.ckpt")
    assert all(np.array_equal(loaded.params[n].data, model.params[n].data) for n in model.params)
    assert abs(evaluate_loss(loaded, batch, LossWeights(), "encoded").total - before) <= 1e-12


def test_mismatched_checkpoint_leaves_params(small_vocab, tmp_path):
    tiny_model(small_vocab, seed=1, d_h=16).save(tmp_path / "big.ckpt")
    model = tiny_model(small_vocab, seed=2)
    snapshot = {n: t.data.copy() for n, t in model.params.items()}
    with pytest.raises(CheckpointError) as info:
        model.load_weights(tmp_path / "big.ckpt")
    assert "d_h" in str(info.value) or "d_h" in repr(info.value.args)
    assert all(np.array_equal(snapshot[n], model.params[n].data) for n in snapshot)


def test_stage1_transfer_lowers_stage2_start():
    vocab = RoleVocabulary.default()
    cfg = ModelConfig.tiny(d_h=16, d_task=16, task_hidden=16, expert_hidden=16, gate_hidden=16)
    stage1, _ = gen_stage1(200, seed=1)
    ex1 = records_to_examples([r.to_json() for r in stage1], vocab, with_queries=False)
    ex2 = records_to_examples([r.to_json() for r in memorization_set(20)], vocab)
    pre = run_stage(StagePlan(1, epochs=10), ex1, Model.create(cfg, seed=0, vocab=vocab)).model
    warm = run_stage(StagePlan(2, epochs=1), ex2, pre).metrics[0]["loss"]
    cold = run_stage(StagePlan(2, epochs=1), ex2, Model.create(cfg, seed=0, vocab=vocab)).metrics[0]["loss"]
    assert warm < cold


@pytest.mark.slow
def test_memorization_loss_drops_below_five_percent():
    vocab = RoleVocabulary.default()
    examples = records_to_examples([r.to_json() for r in memorization_set(20)], vocab)
    res = run_stage(StagePlan(3, epochs=50), examples, Model.create(seed=0, vocab=vocab))
    first, last = res.metrics[0]["loss"], res.metrics[-1]["loss"]
    print(f"memorization loss: epoch 1 {first:.4f}, epoch 50 {last:.4f} ({last / first:.1%})")
    assert last < 0.05 * first
