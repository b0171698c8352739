"""Scene-graph classification with an edge-featured GATv2 and attention pooling.

Graphs come in as symbolic (subject, predicate, object) triplets with
normalized boxes; no image data is read or stored anywhere.
"""
from .errors import CheckpointError, DataError, NumericError, ScenegatError
from .graph import ClassLabelSet, ObjectNode, RelationEdge, SceneGraph, Vocabulary
from .model import ModelConfig
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ClassLabelSet",
    "DataError",
    "ModelConfig",
    "NumericError",
    "ObjectNode",
    "RelationEdge",
    "SceneGraph",
    "ScenegatError",
    "TrainConfig",
    "Vocabulary",
]
