from .surrogate import SurrogateConfig, SurrogatePair, train_surrogate
from .trigger import (
    TriggerEmbedding,
    TriggerStats,
    compute_trigger_stats,
    overlay_trigger,
    select_trigger_embedding,
)
from .cluster import AnchorEmbedding, ClusterModel, kmeans_cluster, select_target_anchor
from .inject import InjectionConfig, inject_backdoor

__all__ = [
    "SurrogateConfig", "SurrogatePair", "train_surrogate",
    "TriggerEmbedding", "TriggerStats", "compute_trigger_stats",
    "overlay_trigger", "select_trigger_embedding",
    "AnchorEmbedding", "ClusterModel", "kmeans_cluster", "select_target_anchor",
    "InjectionConfig", "inject_backdoor",
]
