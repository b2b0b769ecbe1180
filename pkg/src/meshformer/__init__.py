"""Mesh transformer flow forecasting on dynamic triangle meshes."""

from .clustering import ClusterAssignment, ClusterGeometry, same_size_kmeans
from .mesh import MeshFrame, NodeType, NormStats, Trajectory, load_trajectory, save_trajectory
from .model import MeshTransformer, ModelConfig, forward_step, init_parameters, rollout
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "ClusterAssignment",
    "ClusterGeometry",
    "Checkpoint",
    "MeshFrame",
    "MeshTransformer",
    "ModelConfig",
    "NodeType",
    "NormStats",
    "TrainConfig",
    "Trajectory",
    "forward_step",
    "init_parameters",
    "load_checkpoint",
    "load_trajectory",
    "rollout",
    "same_size_kmeans",
    "save_checkpoint",
    "save_trajectory",
    "train",
]
