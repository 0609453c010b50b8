"""Uniform victim-detector boundary.

A :class:`DetectorHandle` bundles one model per modality. Models expose
``raw_candidates(images)`` (pre-threshold boxes and scores) and
``filter(boxes, scores, threshold)`` (threshold + suppression); toy models are
differentiable, external ones are evaluation-only.
"""
import hashlib
import logging
import os
import pickle
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import CapabilityError, FormatError, ParameterDomainError, ShapeError, TrainingFailure
from .boxes import box_iou_matrix, match_count
from .toy import ToyDetector

logger = logging.getLogger(__name__)

MODALITIES = ("visible", "infrared")
CHANNELS = {"visible": 3, "infrared": 1}


@dataclass(frozen=True)
class Detection:
    bbox: tuple
    score: float
    class_id: int = 0


@dataclass
class RawCandidates:
    """Per-candidate boxes (K x 4) and scores (K) before thresholding."""

    boxes: object
    scores: object

    def __len__(self):
        return int(self.scores.shape[0])


@dataclass
class DetectorHandle:
    id: str
    differentiable: bool
    modality: str
    branches: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.modality not in ("visible", "infrared", "dual"):
            raise ParameterDomainError(f"unknown modality {self.modality!r}")
        wanted = set(MODALITIES) if self.modality == "dual" else {self.modality}
        if set(self.branches) != wanted:
            raise ParameterDomainError(f"handle {self.id!r} ({self.modality}) needs branches {sorted(wanted)}, "
                                       f"got {sorted(self.branches)}")

    def has(self, modality):
        return modality in self.branches

    def checksum(self):
        h = hashlib.sha256()
        for m in sorted(self.branches):
            h.update(self.branches[m].checksum().encode())
        return h.hexdigest()


def require_differentiable(handle):
    if not handle.differentiable:
        raise CapabilityError(f"detector {handle.id!r} is not differentiable; white-box attack needs gradients")


def _clip_box(b, hw):
    H, W = hw
    return (float(np.clip(b[0], 0, W)), float(np.clip(b[1], 0, H)), float(np.clip(b[2], 0, W)),
            float(np.clip(b[3], 0, H)))


def _finalize(model, raw, hw, threshold):
    boxes, scores = model.filter(raw.boxes, raw.scores, threshold)
    dets = []
    for b, s in zip(boxes, scores):
        cb = _clip_box(b, hw)
        if cb[2] > cb[0] and cb[3] > cb[1]:
            dets.append(Detection(cb, float(s), 0))
    return dets


def raw_batch(handle, modality, images):
    """Raw candidates for a batch (N x H x W x C) of one modality."""
    if not handle.has(modality):
        raise CapabilityError(f"detector {handle.id!r} ({handle.modality}) has no {modality} branch")
    x = images
    if x.ndim != 4 or x.shape[-1] != CHANNELS[modality]:
        raise ShapeError(f"{modality} batch must be N x H x W x {CHANNELS[modality]}, got {tuple(x.shape)}")
    boxes, scores = handle.branches[modality].raw_candidates(x)
    return [RawCandidates(boxes[k], scores[k]) for k in range(len(scores))]


def finalize(handle, modality, raw, hw, threshold=0.5):
    return _finalize(handle.branches[modality], raw, hw, threshold)


def detect(handle, visible_image=None, infrared_image=None, threshold=0.5):
    """Run the handle on one aligned pair.

    Returns ``(detections_v, detections_r, raw_v, raw_r)``; entries for a
    modality the handle lacks are ``None``. Supplying an image for a missing
    branch, or omitting one for a present branch, is a modality mismatch.
    """
    out = {}
    for modality, image in (("visible", visible_image), ("infrared", infrared_image)):
        if handle.has(modality) and image is None:
            raise CapabilityError(f"detector {handle.id!r} expects a {modality} image")
        if not handle.has(modality):
            if image is not None:
                raise CapabilityError(f"detector {handle.id!r} ({handle.modality}) cannot take a {modality} image")
            out[modality] = (None, None)
            continue
        x = image if isinstance(image, torch.Tensor) else torch.as_tensor(np.asarray(image, dtype=np.float32))
        if x.ndim == 2:
            x = x.unsqueeze(-1)
        raw = raw_batch(handle, modality, x.unsqueeze(0))[0]
        out[modality] = (_finalize(handle.branches[modality], raw, tuple(x.shape[:2]), threshold), raw)
    return out["visible"][0], out["infrared"][0], out["visible"][1], out["infrared"][1]


def scores_for_targets(raw, gt_boxes, iou_min=0.1):
    """Scores of raw candidates overlapping any ground-truth box by ``iou_min`` or more.

    Selection uses detached boxes; the returned scores keep their gradient.
    """
    scores = raw.scores
    if len(gt_boxes) == 0 or len(raw) == 0:
        return scores[:0]
    ious = box_iou_matrix(raw.boxes, np.asarray(gt_boxes, dtype=np.float64))
    sel = np.flatnonzero(ious.max(axis=1) >= iou_min)
    return scores[torch.as_tensor(sel, dtype=torch.long)] if isinstance(scores, torch.Tensor) else scores[sel]


def recall(handle, modality, pairs, threshold=0.5, iou_min=0.5, batch_size=64):
    """Fraction of ground-truth boxes matched one-to-one by final detections."""
    matched = total = 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        imgs = torch.as_tensor(np.stack([getattr(p, modality) for p in chunk]), dtype=torch.float32)
        with torch.no_grad():
            raws = raw_batch(handle, modality, imgs)
        for p, raw in zip(chunk, raws):
            dets = finalize(handle, modality, raw, p.hw, threshold)
            matched += match_count([d.bbox for d in dets], p.gt_boxes, iou_min)[0]
            total += len(p.boxes)
    return matched / total if total else float("nan")


def train_toy_detector(pairs, variant_seed=0, val_pairs=None, width=16, epochs=30, modality="dual",
                       min_images=500, min_recall=0.9, learning_rate=2e-3, batch_size=32, pos_weight=4.0,
                       name=None):
    """Train one toy branch per requested modality and check held-out recall.

    Raises :class:`TrainingFailure` (carrying the recall report) when any
    branch stays below ``min_recall`` at threshold 0.5 on ``val_pairs``.
    """
    pairs = list(pairs)
    if len(pairs) < min_images:
        raise ParameterDomainError(f"toy detector training needs >= {min_images} images, got {len(pairs)}")
    mods = MODALITIES if modality == "dual" else (modality,)
    branches = {}
    for m in mods:
        X = np.stack([getattr(p, m) for p in pairs]).astype(np.float32)
        y = [p.gt_boxes for p in pairs]
        det = ToyDetector(in_channels=CHANNELS[m], width=width, epochs=epochs, learning_rate=learning_rate,
                          batch_size=batch_size, pos_weight=pos_weight,
                          random_state=variant_seed * 2 + (m == "infrared"))
        branches[m] = det.fit(X, y)
    handle = DetectorHandle(id=name or f"toy-w{width}-s{variant_seed}", differentiable=True, modality=modality,
                            branches=branches)
    if val_pairs:
        handle.report = {f"recall_{m}": recall(handle, m, list(val_pairs)) for m in mods}
        logger.info("detector %s held-out recall %s", handle.id, handle.report)
        bad = {k: v for k, v in handle.report.items() if not v >= min_recall}
        if bad:
            raise TrainingFailure(f"detector {handle.id!r} below recall target {min_recall}: {bad}",
                                  report=handle.report)
    return handle


DETECTOR_FORMAT_VERSION = 1


def save_detector(handle, path):
    if not handle.differentiable:
        raise CapabilityError("only toy detectors can be saved")
    payload = {
        "version": DETECTOR_FORMAT_VERSION,
        "id": handle.id,
        "modality": handle.modality,
        "report": {k: float(v) for k, v in handle.report.items()},
        "branches": {m: {"params": {k: v for k, v in det.get_params().items()},
                         "state": det.net_.state_dict()} for m, det in handle.branches.items()},
    }
    torch.save(payload, path)
    return path


def load_detector(path):
    from .toy import _Net

    if not os.path.exists(path):
        raise FileNotFoundError(f"detector file not found: {path}")
    try:
        payload = torch.load(path, weights_only=True)
        if payload["version"] != DETECTOR_FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported detector format version {payload['version']}")
        branches = {}
        for m, entry in payload["branches"].items():
            det = ToyDetector(**entry["params"])
            net = _Net(det.in_channels, det.width)
            net.load_state_dict(entry["state"])
            net.requires_grad_(False)
            net.eval()
            det.net_ = net
            branches[m] = det
    except (KeyError, RuntimeError, TypeError, pickle.UnpicklingError, EOFError) as exc:
        raise FormatError(f"{path}: not a valid detector file ({exc})") from exc
    return DetectorHandle(payload["id"], True, payload["modality"], branches, payload.get("report", {}))
