"""Multi-view medical concept embeddings fused by a dual-encoder autoencoder."""
from .baselines import BaselineFusion, fuse_avg, fuse_conc, fuse_hot, fuse_svd
from .config import PipelineConfig, load_config, partial_signal_config
from .data import ConceptVocabulary, SyntheticConfig, generate_synthetic, load_records
from .evaluation import (
    KMeans,
    LogisticRegressionGD,
    auc_pr,
    auc_roc,
    cluster_and_project,
    outcome_split,
    outcome_task,
    relation_task,
    semantic_similarity_task,
    spearman_rho,
)
from .gae import GraphAutoencoder, gae_train, project_sources
from .graph import build_graph, dice_similarity, top_k_neighbors
from .linalg import PCA, pca_fit_transform, svd
from .meta import DualMEAE, build_meta_inputs, train_dual_meae

__version__ = "0.1.0"

__all__ = [
    "BaselineFusion",
    "ConceptVocabulary",
    "DualMEAE",
    "GraphAutoencoder",
    "KMeans",
    "LogisticRegressionGD",
    "PCA",
    "PipelineConfig",
    "SyntheticConfig",
    "auc_pr",
    "auc_roc",
    "build_graph",
    "build_meta_inputs",
    "cluster_and_project",
    "dice_similarity",
    "fuse_avg",
    "fuse_conc",
    "fuse_hot",
    "fuse_svd",
    "gae_train",
    "generate_synthetic",
    "load_config",
    "load_records",
    "outcome_split",
    "outcome_task",
    "partial_signal_config",
    "pca_fit_transform",
    "project_sources",
    "relation_task",
    "semantic_similarity_task",
    "spearman_rho",
    "svd",
    "top_k_neighbors",
    "train_dual_meae",
]
