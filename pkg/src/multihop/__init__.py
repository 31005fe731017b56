"""Multi-hop graph convolution engine for node classification on weighted graphs."""

from multihop.graph import (
    WeightedGraph,
    PropagationMatrix,
    sym_renormalize,
    scaled_laplacian,
    estimate_lambda_max,
)
from multihop.khop import HopGraphSet, hop_distances, build_khop, khop_oracle, build_hop_set
from multihop.affinity import MetaTable, Measure, AffinityConfig, meta_adjacency, feature_edge_weights, build_affinity
from multihop.model import ModelConfig, MultiHopModel, build_model
from multihop.data import Dataset, load_dataset, save_dataset, planetoid_split, stratified_kfold, synth_twohop
from multihop.harness import TrainConfig, RunReport, train_one, repeated_runs, cross_validate

__version__ = "0.1.0"

__all__ = [
    "WeightedGraph",
    "PropagationMatrix",
    "sym_renormalize",
    "scaled_laplacian",
    "estimate_lambda_max",
    "HopGraphSet",
    "hop_distances",
    "build_khop",
    "khop_oracle",
    "build_hop_set",
    "MetaTable",
    "Measure",
    "AffinityConfig",
    "meta_adjacency",
    "feature_edge_weights",
    "build_affinity",
    "ModelConfig",
    "MultiHopModel",
    "build_model",
    "Dataset",
    "load_dataset",
    "save_dataset",
    "planetoid_split",
    "stratified_kfold",
    "synth_twohop",
    "TrainConfig",
    "RunReport",
    "train_one",
    "repeated_runs",
    "cross_validate",
]
