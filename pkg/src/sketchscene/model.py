"""Parameters and forward passes of the full conditional denoiser."""
from __future__ import annotations

from collections import OrderedDict
from typing import Optional, Sequence

import numpy as np

from . import conditioning, denoiser, nn
from .autodiff import Adam, Tensor
from .checkpoint import read_checkpoint, write_checkpoint
from .config import ModelConfig
from .errors import CheckpointError, ConfigError
from .knowledge import KnowledgeBase, query_subgraph


class SceneModel:
    def __init__(self, cfg: ModelConfig, vocab_names: Sequence[str],
                 kb: Optional[KnowledgeBase] = None, seed: int = 0,
                 table: Optional[conditioning.EntityEmbeddingTable] = None):
        self.cfg = cfg
        self.vocab_names = list(vocab_names)
        rng = np.random.default_rng(seed)
        self.params = conditioning.init_params(cfg, rng)
        denoiser.init_params(cfg, rng, self.params)
        self.table = table or conditioning.EntityEmbeddingTable(self.vocab_names, cfg.D_omega)
        self.kb = kb if kb is not None else KnowledgeBase.empty(self.vocab_names)

    def with_knowledge(self, kb: Optional[KnowledgeBase]) -> "SceneModel":
        """The same network (shared parameters) querying another knowledge base;
        ``None`` gives an empty one."""
        other = object.__new__(SceneModel)
        other.__dict__.update(self.__dict__)
        other.kb = kb if kb is not None else KnowledgeBase.empty(self.vocab_names)
        return other

    def adjacency(self, entities):
        return query_subgraph(self.kb, entities)

    def graph_inputs(self, entity_lists):
        adj = [self.adjacency(e) for e in entity_lists]
        return conditioning.pad_entities(self.table, entity_lists, adj)

    def condition(self, pixels, entity_lists=None, graph=None) -> Tensor:
        """Condition tokens ``(B, 2, D)``; ``graph`` may carry precomputed
        ``(H0, A, mask)`` arrays."""
        if graph is None:
            graph = self.graph_inputs(entity_lists)
        return conditioning.condition(self.params, self.cfg, np.asarray(pixels), *graph)

    def predict(self, cond, steps, O_t) -> Tensor:
        return denoiser.predict_noise(self.params, self.cfg, cond, steps, O_t)

    # -- checkpoints --------------------------------------------------------

    def save(self, path, step: int = 0, optimizer: Optional[Adam] = None):
        arrays = OrderedDict()
        for k, v in self.cfg.to_dict().items():
            arrays[f"meta.config.{k}"] = np.array(float(v))
        arrays["meta.step"] = np.array(float(step))
        arrays["meta.n_types"] = np.array(float(len(self.vocab_names)))
        for k, p in self.params.items():
            arrays[k] = p.data
        if optimizer is not None:
            arrays["meta.adam_t"] = np.array(float(optimizer.t))
            for k in self.params:
                arrays[f"adam.m.{k}"] = optimizer.m[k]
                arrays[f"adam.v.{k}"] = optimizer.v[k]
        write_checkpoint(path, arrays)

    @staticmethod
    def config_from_checkpoint(arrays) -> ModelConfig:
        defaults = ModelConfig().to_dict()
        vals = {}
        for k, d in defaults.items():
            key = f"meta.config.{k}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint lacks {key}")
            v = float(arrays[key])
            vals[k] = type(d)(v) if not isinstance(d, bool) else bool(v)
        return ModelConfig(**vals)

    @classmethod
    def load(cls, path, vocab_names, kb=None, optimizer_kwargs=None):
        """Returns ``(model, step, optimizer or None)``."""
        arrays = read_checkpoint(path)
        cfg = cls.config_from_checkpoint(arrays)
        if "meta.n_types" in arrays and int(arrays["meta.n_types"]) != len(vocab_names):
            raise ConfigError(f"checkpoint was trained on {int(arrays['meta.n_types'])} entity types, "
                              f"vocabulary has {len(vocab_names)}")
        if kb is not None and list(kb.vocab) != list(vocab_names):
            raise ConfigError("knowledge base vocabulary differs from the model vocabulary")
        model = cls(cfg, vocab_names, kb)
        missing = [k for k in model.params if k not in arrays]
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters {missing[:3]}...")
        model.params.load({k: arrays[k] for k in model.params})
        step = int(arrays["meta.step"])
        opt = None
        if "meta.adam_t" in arrays:
            opt = Adam(model.params, **(optimizer_kwargs or {}))
            opt.t = int(arrays["meta.adam_t"])
            for k in model.params:
                opt.m[k] = arrays[f"adam.m.{k}"].copy()
                opt.v[k] = arrays[f"adam.v.{k}"].copy()
        return model, step, opt
