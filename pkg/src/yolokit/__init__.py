"""Desk-scale single-stage detection pipeline toolkit.

Modules:
  tensor       dense feature maps and forward-pass building blocks
  cfg          darknet cfg parsing, shape propagation, network census
  boxes        box geometry, IoU, anchor decode, grid responsibility
  postprocess  prediction extraction, scoring, NMS, confidence gating
  data         image/label I/O, augmentation, synthetic scenes
  metrics      greedy matching, average precision, mAP 0.50:0.95
  cli          batch command-line front end
"""

from .boxes import (Anchor, BoxCorner, BoxNorm, RawPrediction, corner_to_norm,
                    decode_box, decode_center, iou, norm_to_corner,
                    responsible_cell, sigmoid)
from .cfg import (CfgError, NetCensus, NetGraph, census, grid_sizes,
                  head_channels, parse_cfg, propagate_shapes, serialize_cfg,
                  total_grid_cells)
from .data import (ClassRegistry, Image, LabeledImage, aggregate_csv,
                   expand_dataset, flip, generate_synthetic_scene, read_ppm,
                   read_yolo_labels, rotate, write_ppm, write_yolo_labels)
from .metrics import (EvalReport, GroundTruth, average_precision, map_50_95,
                      match_detections, scenario_report)
from .postprocess import (Detection, DetectConfig, NmsConfig, detect_frame,
                          extract_predictions, ground_truth_heads, nms,
                          score_predictions, two_stage_filter)
from .tensor import (ConvParams, ShapeError, Tensor, concat_channels, conv2d,
                     csp_block, leaky_relu, max_pool, mish, residual_block,
                     spp_block, upsample2x)

__version__ = "0.1.0"

__all__ = [
    "Anchor", "BoxCorner", "BoxNorm", "RawPrediction", "corner_to_norm",
    "decode_box", "decode_center", "iou", "norm_to_corner", "responsible_cell",
    "sigmoid",
    "CfgError", "NetCensus", "NetGraph", "census", "grid_sizes",
    "head_channels", "parse_cfg", "propagate_shapes", "serialize_cfg",
    "total_grid_cells",
    "ClassRegistry", "Image", "LabeledImage", "aggregate_csv",
    "expand_dataset", "flip", "generate_synthetic_scene", "read_ppm",
    "read_yolo_labels", "rotate", "write_ppm", "write_yolo_labels",
    "EvalReport", "GroundTruth", "average_precision", "map_50_95",
    "match_detections", "scenario_report",
    "Detection", "DetectConfig", "NmsConfig", "detect_frame",
    "extract_predictions", "ground_truth_heads", "nms", "score_predictions",
    "two_stage_filter",
    "ConvParams", "ShapeError", "Tensor", "concat_channels", "conv2d",
    "csp_block", "leaky_relu", "max_pool", "mish", "residual_block",
    "spp_block", "upsample2x",
    "__version__",
]
