"""Adam with bias correction and a reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from agentgraph.errors import NumericError
from agentgraph.numeric.tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class OptimizerState:
    lr: float
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    # plateau bookkeeping
    bad_epochs: int = 0
    best_loss: float = float("inf")
    factor: float = 0.5
    patience: int = 10
    threshold: float = 1e-4


def adam_step(
    state: OptimizerState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    beta1: float = BETA1,
    beta2: float = BETA2,
    eps: float = EPS,
) -> dict[str, Tensor]:
    """Return updated parameters; parameters absent from ``grads`` are left alone.

    Raises NumericError (and leaves ``state`` untouched) if any gradient is NaN/Inf.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    updated = dict(params)
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + eps)
        updated[name] = Tensor(p.data - step, requires_grad=p.requires_grad, name=p.name)
    return updated


def plateau_update(state: OptimizerState, epoch_loss: float) -> bool:
    """Feed one epoch-mean loss; halve (by ``factor``) the lr after ``patience``
    non-improving epochs. Returns True when the lr was reduced."""
    if epoch_loss < state.best_loss * (1.0 - state.threshold) or state.best_loss == float("inf"):
        state.best_loss = epoch_loss
        state.bad_epochs = 0
        return False
    state.bad_epochs += 1
    if state.bad_epochs > state.patience:
        state.lr *= state.factor
        state.bad_epochs = 0
        return True
    return False
