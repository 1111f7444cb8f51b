"""Point-based human-object interaction detection: target encoding, losses, decoding and evaluation."""
from .core import (
    Annotations,
    Box,
    CollisionError,
    GridConfig,
    MatchError,
    Point2,
    PPDMError,
    Triplet,
    interaction_point,
    iou,
    to_low_res,
)
from .decoder import DecodeConfig, Peak, decode
from .evaluator import EvalConfig, EvalReport, evaluate
from .losses import FocalParams, LossBreakdown, total_loss
from .targets import MAP_NAMES, EncodedTargets, MapSet, encode

__version__ = "0.1.0"
