"""Elastic encoder language models: nested sub-structures sharing one set of
weights, relation distillation, dense retrieval / reranking finetuning, and a
queue-aware serving scheduler with a load simulator."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    CheckpointError,
    ConfigError,
    ContractError,
    DomainError,
    ElasticError,
    NumericError,
    ShapeError,
    StructureError,
)
from .model import MASKED, SLICED, ElasticModel, ModelConfig, SubStructure, Submap  # noqa: F401
