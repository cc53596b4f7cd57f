"""
Core modules for HEML
Contains numerics, data, metric learning, hierarchy, metric trees and evaluation
"""

from .data import SegmentManifest, Dataset, load_manifest
from .numerics import TrainConfig, EmbedderModel
from .hierarchy import CheckpointStore, build_schedule, train_bottom_up, train_flat
from .tree import build_metric_tree, export_tree
from .evaluation import evaluate_store, precision_at_k
from .database import RunLedger

__all__ = [
    'SegmentManifest', 'Dataset', 'load_manifest', 'TrainConfig', 'EmbedderModel',
    'CheckpointStore', 'build_schedule', 'train_bottom_up', 'train_flat',
    'build_metric_tree', 'export_tree', 'evaluate_store', 'precision_at_k', 'RunLedger',
]
