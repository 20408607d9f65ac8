"""Tri-perspective-view scene representation and the TPVFormer encoder."""

from .data import SceneSample, make_sample
from .encoder import EncoderConfig, TPVFormer, encode
from .estimator import TPVSegmenter
from .geometry import CameraRig, TpvGridSpec
from .head import LossRouting
from .tpv import TpvPlanes, query_points, resize_planes, voxel_features

__all__ = ["CameraRig", "EncoderConfig", "LossRouting", "SceneSample", "TPVFormer", "TPVSegmenter",
           "TpvGridSpec", "TpvPlanes", "encode", "make_sample", "query_points", "resize_planes",
           "voxel_features"]
__version__ = "0.1.0"
