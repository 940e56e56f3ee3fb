"""Model configuration, parameter initialisation and checkpoint binding."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from agentgraph.embed import EMBED_DIM, EmbeddingProvider, HashEmbedder, RoleEmbeddingCache
from agentgraph.errors import CheckpointError, ConfigurationError
from agentgraph.graph import RoleVocabulary
from agentgraph.numeric import Tensor, checkpoint, glorot_uniform, make_rng


@dataclass(frozen=True)
class ModelConfig:
    n_roles: int = 19
    embed_dim: int = EMBED_DIM
    task_hidden: int = 256
    d_task: int = 128
    d_h: int = 256
    layers: int = 4
    n_experts: int = 8
    expert_hidden: int = 256
    gate_hidden: int = 256
    include_self_loop: bool = True

    def __post_init__(self):
        if self.layers < 1 or self.n_experts < 1 or self.n_roles < 1:
            raise ConfigurationError("layers, n_experts and n_roles must be >= 1")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and v <= 0:
                raise ConfigurationError(f"{f.name} must be positive")

    @property
    def n_outputs(self) -> int:
        """Role classes plus END."""
        return self.n_roles + 1

    @classmethod
    def tiny(cls, **overrides) -> ModelConfig:
        base = dict(task_hidden=8, d_task=8, d_h=8, layers=2, n_experts=2, expert_hidden=8, gate_hidden=8)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor, in a fixed order. Matrices act on row vectors (x @ W)."""
    s: dict[str, tuple[int, ...]] = {
        "task.w1": (cfg.embed_dim, cfg.task_hidden),
        "task.b1": (1, cfg.task_hidden),
        "task.w2": (cfg.task_hidden, cfg.d_task),
        "task.b2": (1, cfg.d_task),
        "enc.w_in": (cfg.embed_dim, cfg.d_h),
        "enc.b_in": (1, cfg.d_h),
        "enc.start": (1, cfg.d_h),
    }
    for layer in range(cfg.layers):
        p = f"enc.{layer}."
        s[p + "w_g"] = (cfg.d_h + cfg.d_task, cfg.d_h)
        s[p + "w_m"] = (cfg.d_h, cfg.d_h)
        s[p + "w_k"] = (cfg.d_h, cfg.d_h)
        s[p + "w_q"] = (cfg.d_h, cfg.d_h)
        # attention vector a = [a_src ; a_dst]
        s[p + "a_src"] = (cfg.d_h, 1)
        s[p + "a_dst"] = (cfg.d_h, 1)
    s["gate.w1"] = (cfg.d_task, cfg.gate_hidden)
    s["gate.b1"] = (1, cfg.gate_hidden)
    s["gate.w2"] = (cfg.gate_hidden, cfg.n_experts)
    s["gate.b2"] = (1, cfg.n_experts)
    for k in range(cfg.n_experts):
        p = f"node.{k}."
        s[p + "w1"] = (cfg.d_h + cfg.d_task, cfg.expert_hidden)
        s[p + "b1"] = (1, cfg.expert_hidden)
        s[p + "w2"] = (cfg.expert_hidden, cfg.n_outputs)
        s[p + "b2"] = (1, cfg.n_outputs)
    for k in range(cfg.n_experts):
        p = f"edge.{k}."
        s[p + "w1"] = (2 * cfg.d_h + cfg.d_task, cfg.expert_hidden)
        s[p + "b1"] = (1, cfg.expert_hidden)
        s[p + "w2"] = (cfg.expert_hidden, 1)
        s[p + "b2"] = (1, 1)
    return s


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases; each tensor gets its own RNG stream."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b"):
            value = np.zeros(shape)
        else:
            value = glorot_uniform(make_rng(seed, "init", name), shape[0], shape[1], shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    vocab: RoleVocabulary
    role_table: np.ndarray  # (n_roles, embed_dim) role-description embeddings

    def __post_init__(self):
        if len(self.vocab) != self.config.n_roles:
            raise ConfigurationError(
                f"vocabulary has {len(self.vocab)} roles but config expects {self.config.n_roles}"
            )
        if self.role_table.shape != (self.config.n_roles, self.config.embed_dim):
            raise ConfigurationError(f"role table shape {self.role_table.shape} is wrong")

    @classmethod
    def create(
        cls,
        config: ModelConfig | None = None,
        seed: int = 0,
        vocab: RoleVocabulary | None = None,
        provider: EmbeddingProvider | None = None,
    ) -> Model:
        vocab = vocab or RoleVocabulary.default()
        config = config or ModelConfig(n_roles=len(vocab))
        if config.n_roles != len(vocab):
            config = replace(config, n_roles=len(vocab))
        table = RoleEmbeddingCache(provider or HashEmbedder()).table(vocab.names)
        return cls(config, init_params(config, seed), vocab, table)

    def with_params(self, params: dict[str, Tensor]) -> Model:
        return Model(self.config, params, self.vocab, self.role_table)

    def copy(self) -> Model:
        return self.with_params(dict(self.params))

    # checkpoint io -------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        tensors = {name: t.data for name, t in self.params.items()}
        tensors["buffer.role_table"] = self.role_table
        kinds = {"buffer.role_table": "buffer"}
        meta = {"roles": list(self.vocab.names), "prompts": list(self.vocab.prompts)}
        meta.update(extra or {})
        checkpoint.save(path, tensors, self.config.to_dict(), kinds, meta)

    @classmethod
    def load(cls, path) -> Model:
        manifest, arrays = checkpoint.load(path)
        try:
            config = ModelConfig(**manifest["hyperparameters"])
        except TypeError as exc:
            raise CheckpointError(f"bad hyperparameters in {path}: {exc}") from exc
        extra = manifest.get("extra", {})
        vocab = RoleVocabulary(tuple(extra["roles"]), tuple(extra.get("prompts", ())))
        table = arrays.pop("buffer.role_table")
        _check_shapes(config, arrays)
        params = {n: Tensor(arrays[n], requires_grad=True, name=n) for n in param_shapes(config)}
        return cls(config, params, vocab, table)

    def load_weights(self, path) -> None:
        """Replace parameters in place from ``path``; nothing changes unless every shape matches."""
        manifest, arrays = checkpoint.load(path)
        arrays.pop("buffer.role_table", None)
        hyper = manifest.get("hyperparameters", {})
        mismatched = [k for k, v in self.config.to_dict().items() if hyper.get(k) != v]
        if mismatched:
            raise CheckpointError("hyperparameter mismatch", mismatched)
        _check_shapes(self.config, arrays)
        self.params = {
            n: Tensor(arrays[n], requires_grad=True, name=n) for n in param_shapes(self.config)
        }


def _check_shapes(config: ModelConfig, arrays: dict[str, np.ndarray]) -> None:
    expected = param_shapes(config)
    bad = [n for n, shape in expected.items() if n not in arrays or arrays[n].shape != shape]
    bad += [n for n in arrays if n not in expected]
    if bad:
        raise CheckpointError("parameter shape mismatch", sorted(bad))


def load_model(path: str | Path) -> Model:
    return Model.load(path)
