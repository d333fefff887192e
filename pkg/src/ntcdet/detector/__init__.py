from .checkpoint import load_checkpoint, save_checkpoint
from .losses import LossReport, compute_losses, frame_loss_terms
from .model import (
    BoxList,
    ContextFeatures,
    Detections,
    FrameArtifacts,
    ProposalFeatures,
    UltraDet,
    WindowOutput,
    make_anchors,
    make_flow_source,
    propose_regions,
    sample_context_frames,
    ultradet_forward,
    window_ids,
)
from .pooling import iof_align_pool, pooled_roi_features, roi_align_pool, warp_feature_map
from .stream import StreamSession
from .train import TrainingDiverged, load_model, train

__all__ = [
    "BoxList",
    "ContextFeatures",
    "Detections",
    "FrameArtifacts",
    "LossReport",
    "ProposalFeatures",
    "StreamSession",
    "TrainingDiverged",
    "UltraDet",
    "WindowOutput",
    "compute_losses",
    "frame_loss_terms",
    "iof_align_pool",
    "load_checkpoint",
    "load_model",
    "make_anchors",
    "make_flow_source",
    "pooled_roi_features",
    "propose_regions",
    "roi_align_pool",
    "sample_context_frames",
    "save_checkpoint",
    "train",
    "ultradet_forward",
    "warp_feature_map",
    "window_ids",
]
