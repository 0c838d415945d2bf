"""Desk-scale end-to-end tubelet action detector.

A set-prediction model maps a video clip to per-frame linked bounding
boxes and action classes.  Training uses Hungarian-matched set losses
under either full-tube or sparse-keyframe supervision; evaluation covers
Frame AP, Video AP over 3D IoU, and causal tubelet linking.
"""

from .geometry import Box, Tube, box_l1, giou, iou, tube_iou_3d
from .losses import LossBreakdown, LossConfig, focal_class_loss, frame_loss, loss_backward, total_loss
from .matching import Assignment, CostTensor, build_cost, match_per_frame, match_tubelet, solve_assignment
from .model import (DecoderTrace, EncoderConfig, FeatureMap, ModelConfig, ModelParams,
                    QuerySet, TubeletSet, backward, decoder_forward, encoder_forward,
                    forward, init_params, load_params, save_params)
from .flops import flop_count

__all__ = [
    "Box", "Tube", "iou", "giou", "box_l1", "tube_iou_3d",
    "LossConfig", "LossBreakdown", "focal_class_loss", "frame_loss", "total_loss",
    "loss_backward",
    "CostTensor", "Assignment", "build_cost", "solve_assignment", "match_per_frame",
    "match_tubelet",
    "ModelConfig", "EncoderConfig", "ModelParams", "FeatureMap", "QuerySet",
    "TubeletSet", "DecoderTrace", "init_params", "encoder_forward", "decoder_forward",
    "forward", "backward", "save_params", "load_params", "flop_count",
]
