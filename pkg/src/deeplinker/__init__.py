"""Link-prediction training and evaluation on sampled attention networks."""

from .centrality import betweenness, closeness, pagerank
from .engine import SegmentIndex, Tape, Tensor
from .evaluation import (ScoredEdges, accuracy, attention_rank, auc, classify_eval,
                         export_embeddings, hit_accuracy, spearman)
from .graph import (EdgeSplit, FeatureMatrix, Graph, NeighborTable,
                    build_neighbor_table, load_graph, load_split, remove_edges,
                    save_split, split_edges)
from .model import (ModelConfig, ModelParams, batch_loss, edge_score, encode,
                    load_checkpoint, save_checkpoint)
from .training import (AdamState, TrainConfig, TrainHistory, adam_step,
                       glorot_init, init_params, train)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "EdgeSplit", "FeatureMatrix", "Graph", "ModelConfig",
    "ModelParams", "NeighborTable", "ScoredEdges", "SegmentIndex", "Tape",
    "Tensor", "TrainConfig", "TrainHistory", "accuracy", "adam_step",
    "attention_rank", "auc", "batch_loss", "betweenness", "build_neighbor_table",
    "classify_eval", "closeness", "edge_score", "encode", "export_embeddings",
    "glorot_init", "hit_accuracy", "init_params", "load_checkpoint", "load_graph",
    "load_split", "pagerank", "remove_edges", "save_checkpoint", "save_split",
    "spearman", "split_edges", "train",
]
