"""Sketch- and knowledge-conditioned diffusion over padded scene matrices."""

__version__ = "0.1.0"

from ._accel import BACKEND
from .codec import (DEFAULT_VOCAB, NormalizationStats, ObjectRecord, SceneMatrix, ShapeParams,
                    Vocabulary, decode_scene, encode_scene)
from .config import ABLATIONS, ModelConfig
from .diffusion import complete, make_schedule, q_sample, sample, train_step
from .knowledge import KnowledgeBase, build_kb, query_subgraph
from .model import SceneModel

__all__ = [
    "BACKEND", "DEFAULT_VOCAB", "NormalizationStats", "ObjectRecord", "SceneMatrix", "ShapeParams",
    "Vocabulary", "decode_scene", "encode_scene", "ABLATIONS", "ModelConfig", "complete",
    "make_schedule", "q_sample", "sample", "train_step", "KnowledgeBase", "build_kb",
    "query_subgraph", "SceneModel", "__version__",
]
