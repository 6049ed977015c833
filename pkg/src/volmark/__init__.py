"""Anchor-based 3D landmark detection on synthetic volumes."""

from .assignment import Assignment, GroundTruth, match_anchors
from .detector import (
    HeadParams,
    InferConfig,
    ReferenceExtractor,
    TrainConfig,
    infer,
    train,
)
from .geometry import (
    AnchorGrid,
    AnchorSpec,
    Box3,
    Deltas,
    Detection,
    decode,
    encode,
    generate_anchors,
    iou3d,
    nms3d,
    pairwise_iou,
)
from .kernels import backend_name
from .landmarks import LANDMARK_NAMES
from .losses import cross_entropy, iou_balanced_cls_loss, iou_weights
from .metrics import EvalResult, average_precision, d_mean, evaluate, mean_ap, mean_iou
from .phantom import ConstellationTemplate, PhantomVolume, dataset, generate
from .prior import LandmarkGraph, PriorModel, RatioDef, fit_prior, penalty, select_combination

__version__ = "0.1.0"

__all__ = [
    "AnchorGrid",
    "AnchorSpec",
    "Assignment",
    "Box3",
    "ConstellationTemplate",
    "Deltas",
    "Detection",
    "EvalResult",
    "GroundTruth",
    "HeadParams",
    "InferConfig",
    "LANDMARK_NAMES",
    "LandmarkGraph",
    "PhantomVolume",
    "PriorModel",
    "RatioDef",
    "ReferenceExtractor",
    "TrainConfig",
    "average_precision",
    "backend_name",
    "cross_entropy",
    "d_mean",
    "dataset",
    "decode",
    "encode",
    "evaluate",
    "fit_prior",
    "generate",
    "generate_anchors",
    "infer",
    "iou3d",
    "iou_balanced_cls_loss",
    "iou_weights",
    "match_anchors",
    "mean_ap",
    "mean_iou",
    "nms3d",
    "pairwise_iou",
    "penalty",
    "select_combination",
    "train",
]
