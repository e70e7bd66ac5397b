"""Label uncertainty for LiDAR bounding boxes: inference, spatial distributions and JIoU."""
from .geometry import Box3d, BoxBev, rotated_iou
from .jiou import jiou, jiou_gt, jiou_ratio, prob_jaccard
from .labelvb import LabelPosterior, PriorSpec, VbConfig, infer_posterior
from .spatialdist import GridSpec, SpatialGrid, spatial_pdq, spatial_pg

__all__ = [
    "Box3d",
    "BoxBev",
    "GridSpec",
    "LabelPosterior",
    "PriorSpec",
    "SpatialGrid",
    "VbConfig",
    "infer_posterior",
    "jiou",
    "jiou_gt",
    "jiou_ratio",
    "prob_jaccard",
    "rotated_iou",
    "spatial_pdq",
    "spatial_pg",
]
