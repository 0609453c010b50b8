from .boxes import iou, match_count, nms
from .external import register_external
from .gateway import (Detection, DetectorHandle, RawCandidates, detect, finalize, load_detector, raw_batch,
                      recall, require_differentiable, save_detector, scores_for_targets, train_toy_detector)
from .toy import ToyDetector

__all__ = [
    "Detection", "DetectorHandle", "RawCandidates", "ToyDetector", "detect", "finalize", "iou", "load_detector",
    "match_count", "nms", "raw_batch", "recall", "register_external", "require_differentiable", "save_detector",
    "scores_for_targets", "train_toy_detector",
]
