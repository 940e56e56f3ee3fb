"""Expert gating network and the mixture-of-experts role and edge heads.

Each expert produces a full distribution (softmax over roles + END, or a
sigmoid edge probability); the heads return the gate-weighted convex
combination, so outputs are valid probabilities by construction.
"""

from __future__ import annotations

import numpy as np

from agentgraph.model import Model
from agentgraph.numeric import (
    Tensor,
    add,
    concat,
    matmul,
    mean,
    mul,
    relu,
    scale,
    sigmoid,
    softmax,
)
from agentgraph.numeric import tsum


def gate(model: Model, z: Tensor) -> Tensor:
    """Expert weights w = softmax(MLP(z)); z is (B, d_task), result (B, K_e)."""
    p = model.params
    hidden = relu(add(matmul(z, p["gate.w1"]), p["gate.b1"]))
    return softmax(add(matmul(hidden, p["gate.w2"]), p["gate.b2"]), axis=1)


def _column(w: Tensor, k: int) -> Tensor:
    sel = np.zeros((w.shape[1], 1))
    sel[k, 0] = 1.0
    return matmul(w, Tensor(sel))


def _mlp(model: Model, prefix: str, x: Tensor) -> Tensor:
    p = model.params
    hidden = relu(add(matmul(x, p[prefix + "w1"]), p[prefix + "b1"]))
    return add(matmul(hidden, p[prefix + "w2"]), p[prefix + "b2"])


def expert_role_distributions(model: Model, pool: Tensor, z: Tensor) -> list[Tensor]:
    x = concat([pool, z], axis=1)
    return [softmax(_mlp(model, f"node.{k}.", x), axis=1) for k in range(model.config.n_experts)]


def expert_edge_probabilities(model: Model, h_src: Tensor, h_tgt: Tensor, z: Tensor) -> list[Tensor]:
    x = concat([h_src, h_tgt, z], axis=1)
    return [sigmoid(_mlp(model, f"edge.{k}.", x)) for k in range(model.config.n_experts)]


def _mix(parts: list[Tensor], w: Tensor) -> Tensor:
    out = None
    for k, part in enumerate(parts):
        term = mul(_column(w, k), part)
        out = term if out is None else add(out, term)
    return out


def predict_role(model: Model, pool: Tensor, z: Tensor, w: Tensor) -> Tensor:
    """Distribution over roles + END (last column), one row per (pool, z, w) row."""
    return _mix(expert_role_distributions(model, pool, z), w)


def predict_edge(model: Model, h_src: Tensor, h_tgt: Tensor, z: Tensor, w: Tensor) -> Tensor:
    """Probability of edge src -> tgt, shape (P, 1), strictly inside (0, 1)."""
    return _mix(expert_edge_probabilities(model, h_src, h_tgt, z), w)


def balance_loss(w: Tensor) -> Tensor:
    """K_e * sum_k mean_b(w_bk)^2: 1 at uniform batch usage, K_e when one expert takes all."""
    usage = mean(w, axis=0)
    return scale(tsum(mul(usage, usage)), float(w.shape[1]))
