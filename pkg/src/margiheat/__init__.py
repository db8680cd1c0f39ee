"""Marginal-heatmap 3D human pose estimation in NumPy.

Three 2D heatmaps per joint (xy, zy, xz) replace a volumetric heatmap; a
differentiable soft-argmax reads 3D coordinates from them.
"""

from .heatmap_ops import (
    MarginalHeatmapSet,
    MarginalLossHead,
    Plane,
    jsd,
    loss_2d,
    loss_3d,
    marginal_coords,
    normalize_to_pmf,
    soft_argmax_2d,
)
from .network import MargiNet, ModelConfig, load_checkpoint, save_checkpoint
from .skeleton import JOINT_NAMES, Pose3D, Space
from .training import TrainConfig, train

__version__ = "0.1.0"
