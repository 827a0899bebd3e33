"""Evidential occupancy grid maps from range-sensor scan sequences."""
from .core import PointCloud, PoseSE3, ScanSequence, compose, inverse, transform_cloud
from .evidential import EvidenceMass, SensorEvidenceConfig, combine_counts, project_pillar, yager_combine
from .ground import PlaneParams, fit_plane, segment_points
from .mapping import (
    BeliefGrid,
    EvidentialVoxelMap,
    MultiLayerGridMap,
    accumulate_scan,
    augment_crop,
    build_input_grid,
    build_target_grid,
    project_to_grid,
    segment_corridor,
)
from .metrics import MetricReport, evaluate
from .posegraph import PoseGraph, optimize_pose_graph
from .registration import GicpBatchProblem, register_batch, register_sequence
from .spatial import GridGeometry, NeighborIndex, VoxelGeometry, build_index, estimate_covariances

__version__ = "0.1.0"
