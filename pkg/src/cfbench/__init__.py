"""Ranking benchmark for matrix factorization and random walk with restart."""
from .dataset import (
    FeedbackKind,
    ImplicitDataset,
    RatingDataset,
    SideInfo,
    binarize_and_confidence,
    cold_start_split,
    kfold_split,
    load_edge_list,
    load_movielens,
    load_social_links,
)
from .metrics import precision_at_k, spearman_rho

__version__ = "0.1.0"

__all__ = [
    "FeedbackKind",
    "ImplicitDataset",
    "RatingDataset",
    "SideInfo",
    "binarize_and_confidence",
    "cold_start_split",
    "kfold_split",
    "load_edge_list",
    "load_movielens",
    "load_social_links",
    "precision_at_k",
    "spearman_rho",
]
