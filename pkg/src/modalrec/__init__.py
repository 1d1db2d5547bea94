"""modalrec: multi-modal latent item-graph recommendation.

Builds kNN item graphs per feature modality, refines them with trainable
feature transforms, fuses them with softmax weights, propagates item
embeddings over the fused graph, and trains user/item embeddings with a
pairwise ranking loss. Ships an evaluation harness with warm/cold segments,
a synthetic dataset generator, and an experiment CLI.
"""

__version__ = "0.1.0"

from .ingest import (
    IngestError,
    InteractionSet,
    ModalityFeatures,
    ObjectServiceEvent,
    SIoTObject,
    SplitBundle,
    cold_start_split,
    events_to_interactions,
    load_event_log,
    load_interactions,
    load_modality_features,
    save_interactions,
    save_modality_features,
    split_dataset,
)
from .graphs import (
    GraphConfig,
    GraphError,
    ModalityTransform,
    SparseItemGraph,
    blend_graphs,
    build_knn_graph,
    build_learned_graph,
    cosine_on_edges,
    load_graph,
    normalize_adjacency,
    save_graph,
    transform_features,
    unit_rows,
)
from .fusion import (
    ConvStack,
    FusionError,
    ModalityWeights,
    fuse_modalities,
    graph_convolve,
)
from .training import (
    CheckpointError,
    EpochStats,
    Gradients,
    ModelParams,
    Pipeline,
    TrainConfig,
    TrainResult,
    TrainingDivergedError,
    bpr_loss,
    compute_item_representations,
    enhance_items,
    load_checkpoint,
    sample_negatives,
    save_checkpoint,
    save_history,
    train,
    train_mf,
)
from .evaluation import (
    EvalReport,
    EvaluationError,
    SegmentMetrics,
    average_precision,
    evaluate_all_ranking,
    mae,
    ndcg_at_k,
    precision_recall_at_k,
    rank_items,
    rmse,
)
from .synthetic import (
    SyntheticDataset,
    SyntheticError,
    SyntheticSpec,
    generate_synthetic,
    write_synthetic,
)
from .config import ConfigError, ExperimentConfig, load_config
from .cli import sweep_k

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ConvStack",
    "EpochStats",
    "EvalReport",
    "EvaluationError",
    "ExperimentConfig",
    "FusionError",
    "Gradients",
    "GraphConfig",
    "GraphError",
    "IngestError",
    "InteractionSet",
    "ModalityFeatures",
    "ModalityTransform",
    "ModalityWeights",
    "ModelParams",
    "ObjectServiceEvent",
    "Pipeline",
    "SIoTObject",
    "SegmentMetrics",
    "SparseItemGraph",
    "SplitBundle",
    "SyntheticDataset",
    "SyntheticError",
    "SyntheticSpec",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "average_precision",
    "blend_graphs",
    "bpr_loss",
    "build_knn_graph",
    "build_learned_graph",
    "cold_start_split",
    "compute_item_representations",
    "cosine_on_edges",
    "enhance_items",
    "evaluate_all_ranking",
    "events_to_interactions",
    "fuse_modalities",
    "generate_synthetic",
    "graph_convolve",
    "load_checkpoint",
    "load_config",
    "load_event_log",
    "load_graph",
    "load_interactions",
    "load_modality_features",
    "mae",
    "ndcg_at_k",
    "normalize_adjacency",
    "precision_recall_at_k",
    "rank_items",
    "rmse",
    "sample_negatives",
    "save_checkpoint",
    "save_graph",
    "save_history",
    "save_interactions",
    "save_modality_features",
    "split_dataset",
    "sweep_k",
    "train",
    "train_mf",
    "transform_features",
    "unit_rows",
    "write_synthetic",
    "__version__",
]
