from __future__ import annotations

from typing import Callable

import numpy as np
import pytest

from agentgraph.graph import RoleVocabulary, make_canonical
from agentgraph.model import Model, ModelConfig
from agentgraph.numeric import GradientTape, Tensor, backward, no_grad

REL_TOL = 1e-3
ABS_FLOOR = 1e-6


def fd_mismatches(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-4,
    names=None,
) -> list[tuple[str, tuple, float, float]]:
    """Central-difference check of every entry; returns the entries outside tolerance."""
    with GradientTape() as tape:
        loss = loss_fn(params)
    analytic = backward(tape, loss, params)
    bad = []
    for name in names or params:
        base = params[name].data
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                arr = base.copy()
                arr[idx] += sign * step
                trial = dict(params)
                trial[name] = Tensor(arr, requires_grad=True, name=name)
                with no_grad():
                    vals.append(loss_fn(trial).item())
            numeric = (vals[0] - vals[1]) / (2 * step)
            a = float(analytic[name][idx])
            diff = abs(a - numeric)
            if diff > ABS_FLOOR and diff > REL_TOL * max(abs(a), abs(numeric)):
                bad.append((name, idx, a, numeric))
    return bad


@pytest.fixture(scope="session")
def vocab() -> RoleVocabulary:
    return RoleVocabulary.default()


@pytest.fixture(scope="session")
def small_vocab() -> RoleVocabulary:
    return RoleVocabulary(("Planner", "Coder", "Tester", "Critic", "Writer"))


def tiny_model(vocab: RoleVocabulary, seed: int = 0, **overrides) -> Model:
    cfg = ModelConfig.tiny(n_roles=len(vocab), **overrides)
    return Model.create(cfg, seed=seed, vocab=vocab)


@pytest.fixture
def tiny(small_vocab) -> Model:
    return tiny_model(small_vocab, seed=3)


@pytest.fixture
def chain3():
    return make_canonical("Chain", 3, [0, 1, 2], "sort a list")
