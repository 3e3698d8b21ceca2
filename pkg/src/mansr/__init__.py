"""Memory-augmented session recommendation with prequential evaluation."""

from .config import RunConfig
from .data import ItemVocabulary, Session, event_stream, temporal_split
from .evaluation import MetricsTimeline, PrequentialConfig, rank_metrics, run_prequential
from .gating import GateNetwork, combine, fit_gate
from .index import FlatIndex, IndexConfig, IVFPQIndex, exact_query
from .memory import MemoryConfig, MemoryStore, kernel_density
from .recommender import ModelConfig, RecommenderModel

__version__ = "0.1.0"

__all__ = [
    "FlatIndex",
    "GateNetwork",
    "IVFPQIndex",
    "IndexConfig",
    "ItemVocabulary",
    "MemoryConfig",
    "MemoryStore",
    "MetricsTimeline",
    "ModelConfig",
    "PrequentialConfig",
    "RecommenderModel",
    "RunConfig",
    "Session",
    "combine",
    "event_stream",
    "exact_query",
    "fit_gate",
    "kernel_density",
    "rank_metrics",
    "run_prequential",
    "temporal_split",
]
