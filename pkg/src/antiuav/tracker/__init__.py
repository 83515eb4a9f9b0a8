from .model import (
    STRATEGIES,
    Proposal,
    Proposals,
    QueryGuidedTracker,
    ShapeError,
    TrackerConfig,
    csm_modulate,
    detect,
    encode_query,
    extract_features,
    init_query,
    ism_modulate,
    rcnn_forward,
    roi_features,
    rpn_forward,
    select_proposals,
    track_step,
)
from .checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
