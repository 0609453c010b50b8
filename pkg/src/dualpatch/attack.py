"""Cross-modal universal patch optimisation.

One RGB patch is optimised against both branches of a dual-modal victim. The
visible branch pastes the (EOT-warped) patch directly; the infrared branch
first maps the flat patch through the frozen RGB->IR adapter and then warps
and pastes the single-channel result. Both branches share geometry per
instance. The loss is ``gamma * TV + delta * mean(target scores)`` and only the
patch pixels are updated, with projection onto [0, 1] after every step.
"""
import dataclasses
import hashlib
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .adapter import predict_ir_torch
from .compositor import (EotConfig, TransformSample, composite, placement_from_bbox, sample_dual_transform,
                         warp_patch)
from .data import ImagePair, clip_around
from .detectors.gateway import raw_batch, require_differentiable, scores_for_targets
from .errors import FormatError, ParameterDomainError, TrainingDivergenceError
from .losses import LossWeights, adv_loss, ap_loss, tv_loss
from .thermal import render_synthetic_ir

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    patch_size: int = 256
    iterations: int = 1000
    batch_size: int = 8
    learning_rate: float = 0.03
    optimizer: str = "adam"
    weights: LossWeights = LossWeights(gamma=2.5, delta=1.0, tv_reduction="mean")
    eot: EotConfig = EotConfig()
    coverage_cap: float = 0.3
    seed: int = 0
    use_adapter: bool = True
    use_augmentation: bool = True
    init_mode: str = "random"
    aug_prob: float = 0.5
    dilation_factors: tuple = (2, 4, 8)
    iou_min: float = 0.1

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if isinstance(self.eot, dict):
            object.__setattr__(self, "eot", EotConfig(**self.eot))
        object.__setattr__(self, "dilation_factors", tuple(self.dilation_factors))
        for name in ("patch_size", "iterations", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ParameterDomainError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ParameterDomainError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterDomainError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.init_mode not in ("random", "gray"):
            raise ParameterDomainError(f"init_mode must be 'random' or 'gray', got {self.init_mode!r}")
        if not 0.0 < self.coverage_cap <= 1.0:
            raise ParameterDomainError(f"coverage_cap must lie in (0, 1], got {self.coverage_cap}")
        if not 0.0 <= self.aug_prob <= 1.0:
            raise ParameterDomainError(f"aug_prob must lie in [0, 1], got {self.aug_prob}")

    def to_dict(self):
        d = asdict(self)
        d["dilation_factors"] = list(self.dilation_factors)
        for k in ("rotation_range", "scale_range", "brightness_range", "blur_sigma_range"):
            d["eot"][k] = list(d["eot"][k])
        return d

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Patch:
    pixels: np.ndarray  # S x S x 3 in [0, 1]
    metadata: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.pixels.shape[0]

    def checksum(self):
        return hashlib.sha256(np.ascontiguousarray(self.pixels, dtype=np.float64).tobytes()).hexdigest()


def init_patch(cfg):
    """Gray (all 0.5) or seeded i.i.d. uniform starting patch."""
    S = int(cfg.patch_size)
    if cfg.init_mode == "gray":
        px = np.full((S, S, 3), 0.5)
    else:
        px = np.random.default_rng([int(cfg.seed), 7]).uniform(0.0, 1.0, (S, S, 3))
    return Patch(px, {"config_hash": cfg.hash(), "iterations": 0})


def _paste_all(image, patch_t, boxes, transforms, cap):
    out = image
    hw = tuple(image.shape[:2])
    for box, t in zip(boxes, transforms):
        try:
            placement = placement_from_bbox(box, cap)
            canvas, mask = warp_patch(patch_t, placement, t, hw)
        except ParameterDomainError:
            continue
        out = composite(out, canvas, mask)
    return out


def _draw_batch(pairs, cfg, iteration, rng):
    idx = rng.choice(len(pairs), size=min(cfg.batch_size, len(pairs)), replace=len(pairs) < cfg.batch_size)
    batch = []
    for i in idx:
        pair = pairs[int(i)]
        if cfg.use_augmentation and cfg.dilation_factors and rng.random() < cfg.aug_prob:
            bi = int(rng.integers(len(pair.boxes)))
            f = cfg.dilation_factors[int(rng.integers(len(cfg.dilation_factors)))]
            pair = clip_around(pair, bi, f, rng, out_size=pair.hw)
        batch.append(pair)
    return batch


def batch_loss(patch_t, batch, victim, adapter, cfg, eot_offset=0):
    """Adversarial loss of ``patch_t`` on a fixed batch; returns ``(loss, parts)``.

    EOT samples are indexed from ``eot_offset`` so a batch can be replayed
    exactly (the gradient check relies on this).
    """
    dtype = patch_t.dtype
    ir_patch = predict_ir_torch(adapter, patch_t) if cfg.use_adapter else None
    vis_imgs, ir_imgs = [], []
    k = eot_offset
    for pair in batch:
        boxes = pair.gt_boxes
        tv_, tr_ = [], []
        for _ in boxes:
            a, b = sample_dual_transform(cfg.eot, cfg.seed, k)
            tv_.append(a)
            tr_.append(b)
            k += 1
        vis = torch.as_tensor(pair.visible, dtype=dtype)
        vis_imgs.append(_paste_all(vis, patch_t, boxes, tv_, cfg.coverage_cap))
        if ir_patch is not None:
            ir = torch.as_tensor(pair.infrared, dtype=dtype)
            ir_imgs.append(_paste_all(ir, ir_patch, boxes, tr_, cfg.coverage_cap))
    sv = [scores_for_targets(r, p.gt_boxes, cfg.iou_min)
          for r, p in zip(raw_batch(victim, "visible", torch.stack(vis_imgs)), batch)]
    sv = torch.cat(sv) if sv else torch.zeros(0, dtype=dtype)
    if ir_imgs:
        si = [scores_for_targets(r, p.gt_boxes, cfg.iou_min)
              for r, p in zip(raw_batch(victim, "infrared", torch.stack(ir_imgs)), batch)]
        si = torch.cat(si)
    else:
        si = torch.zeros(0, dtype=dtype)
    loss = adv_loss(patch_t, sv, si, cfg.weights)
    parts = {
        "tv": float(tv_loss(patch_t.detach(), cfg.weights.tv_reduction)),
        "ap_visible": float(ap_loss(sv.detach())),
        "ap_infrared": float(ap_loss(si.detach())) if si.numel() else float("nan"),
        "n_visible": int(sv.numel()),
        "n_infrared": int(si.numel()),
    }
    return loss, parts


def train_patch(dataset, victim, adapter, cfg, callback=None):
    """Optimise a universal patch; returns ``(Patch, history)``.

    ``history`` holds one dict per iteration with the loss components.
    """
    require_differentiable(victim)
    if cfg.use_adapter and adapter is None:
        raise ParameterDomainError("use_adapter=True requires a fitted adapter")
    if cfg.use_adapter and not victim.has("infrared"):
        raise ParameterDomainError(f"victim {victim.id!r} has no infrared branch")
    pairs = [p for p in dataset if p.boxes]
    if not pairs:
        raise ParameterDomainError("dataset contains no annotated targets")
    start = init_patch(cfg)
    kappa = torch.tensor(start.pixels, dtype=torch.float32, requires_grad=True)
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam([kappa], lr=cfg.learning_rate)
    else:
        opt = torch.optim.SGD([kappa], lr=cfg.learning_rate)
    history = []
    eot_index = 0
    for it in range(int(cfg.iterations)):
        rng = np.random.default_rng([int(cfg.seed), 1, it])
        batch = _draw_batch(pairs, cfg, it, rng)
        loss, parts = batch_loss(kappa, batch, victim, adapter, cfg, eot_offset=eot_index)
        eot_index += sum(len(p.boxes) for p in batch)
        if not torch.isfinite(loss):
            raise TrainingDivergenceError(f"patch loss became non-finite at iteration {it}: {parts}", epoch=it)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            kappa.clamp_(0.0, 1.0)
        parts["loss"] = float(loss.detach())
        parts["iteration"] = it
        parts["min_pixel"] = float(kappa.detach().min())
        parts["max_pixel"] = float(kappa.detach().max())
        history.append(parts)
        if callback is not None:
            callback(it, parts)
        if it % 100 == 0:
            logger.info("patch iter %d loss %.4f ap_v %.4f ap_r %.4f", it, parts["loss"], parts["ap_visible"],
                        parts["ap_infrared"])
    final = {k: history[-1][k] for k in ("loss", "tv", "ap_visible", "ap_infrared")} if history else {}
    patch = Patch(kappa.detach().numpy().astype(np.float64),
                  {"config_hash": cfg.hash(), "iterations": int(cfg.iterations), "final_losses": final})
    return patch, history


def apply_patch(pair, patch, ir_source="physics", adapter=None, transform=None, coverage_cap=0.3,
                scene=None, camera=None):
    """Paste ``patch`` onto every target of ``pair`` (identity transform by default).

    ``ir_source`` selects the patch's infrared appearance: ``"physics"`` renders
    it through the thermal model (what a thermal camera would see),
    ``"adapter"`` uses the learned map, ``"none"`` leaves the infrared image
    untouched.
    """
    pixels = patch.pixels if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float64)
    t = TransformSample() if transform is None else transform
    if ir_source == "physics":
        ir_px = render_synthetic_ir(pixels, scene, camera)
    elif ir_source == "adapter":
        ir_px = adapter.predict_ir(pixels)
    elif ir_source == "none":
        ir_px = None
    else:
        raise ParameterDomainError(f"unknown ir_source {ir_source!r}")
    boxes = pair.gt_boxes
    ts = [t] * len(boxes)
    with torch.no_grad():
        vis = _paste_all(torch.as_tensor(pair.visible), torch.as_tensor(pixels), boxes, ts, coverage_cap)
        ir = (torch.as_tensor(pair.infrared) if ir_px is None else
              _paste_all(torch.as_tensor(pair.infrared), torch.as_tensor(ir_px), boxes, ts, coverage_cap))
    return ImagePair(vis.numpy(), ir.numpy(), list(pair.boxes), pair.id)


class PatchAttack(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` optimises the patch, ``transform`` applies it.

    Parameters mirror :class:`AttackConfig`; ``victim`` and ``adapter`` are the
    detector handle and fitted :class:`~dualpatch.adapter.RGBToIRAdapter`.

    Attributes
    ----------
    patch_ : Patch
    history_ : list of dict
    """

    def __init__(self, victim=None, adapter=None, patch_size=256, iterations=1000, batch_size=8,
                 learning_rate=0.03, optimizer="adam", weights=None, eot=None, coverage_cap=0.3, seed=0,
                 use_adapter=True, use_augmentation=True, init_mode="random", aug_prob=0.5,
                 dilation_factors=(2, 4, 8), iou_min=0.1):
        self.victim = victim
        self.adapter = adapter
        self.patch_size = patch_size
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.weights = weights
        self.eot = eot
        self.coverage_cap = coverage_cap
        self.seed = seed
        self.use_adapter = use_adapter
        self.use_augmentation = use_augmentation
        self.init_mode = init_mode
        self.aug_prob = aug_prob
        self.dilation_factors = dilation_factors
        self.iou_min = iou_min

    @classmethod
    def from_config(cls, cfg, victim=None, adapter=None):
        kw = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
        return cls(victim=victim, adapter=adapter, **kw)

    def config(self):
        kw = self.get_params(deep=False)
        kw.pop("victim")
        kw.pop("adapter")
        if kw["weights"] is None:
            kw["weights"] = AttackConfig.weights
        if kw["eot"] is None:
            kw["eot"] = EotConfig()
        return AttackConfig(**kw)

    def fit(self, X, y=None):
        """``X`` is a sequence of :class:`~dualpatch.data.ImagePair`."""
        self.config_ = self.config()
        self.patch_, self.history_ = train_patch(list(X), self.victim, self.adapter, self.config_)
        return self

    def transform(self, X, ir_source="physics"):
        check_is_fitted(self, "patch_")
        return [apply_patch(p, self.patch_, ir_source=ir_source, adapter=self.adapter,
                            coverage_cap=self.coverage_cap) for p in X]


def save_patch(patch, path, config=None):
    """Write ``path`` (8-bit PNG) and ``path`` + ``.json`` sidecar metadata."""
    meta = dict(patch.metadata)
    if config is not None:
        meta["config_hash"] = config.hash()
        meta["config"] = config.to_dict()
    meta["patch_size"] = int(patch.size)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    img = np.clip(np.round(patch.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, "RGB").save(path, format="PNG")
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return path


def load_patch(path, expected_config=None):
    """Read a patch; sidecar problems become entries in ``metadata['warnings']``."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"patch file not found: {path}")
    try:
        with Image.open(path) as im:
            px = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable patch image ({exc})") from exc
    if px.shape[0] != px.shape[1]:
        raise FormatError(f"{path}: patch must be square, got {px.shape[:2]}")
    meta = {"warnings": []}
    side = path + ".json"
    if os.path.exists(side):
        with open(side) as fh:
            meta.update(json.load(fh))
    else:
        meta["warnings"].append("missing sidecar metadata")
    if expected_config is not None and meta.get("config_hash") != expected_config.hash():
        meta["warnings"].append(f"config hash mismatch: patch has {meta.get('config_hash')}, "
                                f"current config is {expected_config.hash()}")
    for w in meta["warnings"]:
        warnings.warn(f"{path}: {w}", stacklevel=2)
    return Patch(px, meta)
