"""Patch placement, EOT sampling, differentiable warping and mask compositing.

Images and patches are channel-last (H x W x C). The warp is differentiable
with respect to patch pixels (bilinear sampling); masks are binary constants.
"""
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ParameterDomainError, ShapeError
from .validation import check_box


@dataclass(frozen=True)
class Placement:
    """Square patch location for one target box.

    ``anchor`` is the top-center of ``target_bbox``; ``top_left`` is the
    integer canvas pixel where the unwarped patch starts.
    """

    target_bbox: tuple
    patch_side: int
    anchor: tuple
    coverage_cap: float = 0.3

    @property
    def top_left(self):
        return (int(math.floor(self.anchor[0] - self.patch_side / 2.0 + 0.5)), int(math.floor(self.anchor[1] + 0.5)))


@dataclass(frozen=True)
class TransformSample:
    rotation: float = 0.0
    scale: float = 1.0
    brightness_delta: float = 0.0
    blur_sigma: float = 0.0

    @property
    def is_identity(self):
        return self.rotation == 0.0 and self.scale == 1.0 and self.brightness_delta == 0.0 and self.blur_sigma == 0.0


def _range(lo_hi, name, lower=None):
    lo, hi = (float(v) for v in lo_hi)
    if lo > hi:
        raise ParameterDomainError(f"{name} is not ordered: ({lo}, {hi})")
    if lower is not None and lo < lower:
        raise ParameterDomainError(f"{name} must be >= {lower}, got ({lo}, {hi})")
    return (lo, hi)


@dataclass(frozen=True)
class EotConfig:
    """Uniform ranges for the physical transforms sampled during training."""

    rotation_range: tuple = (-20.0, 20.0)
    scale_range: tuple = (0.8, 1.2)
    brightness_range: tuple = (-0.15, 0.15)
    blur_sigma_range: tuple = (0.0, 1.5)

    def __post_init__(self):
        object.__setattr__(self, "rotation_range", _range(self.rotation_range, "rotation_range"))
        object.__setattr__(self, "scale_range", _range(self.scale_range, "scale_range"))
        object.__setattr__(self, "brightness_range", _range(self.brightness_range, "brightness_range"))
        object.__setattr__(self, "blur_sigma_range", _range(self.blur_sigma_range, "blur_sigma_range", lower=0.0))
        if self.scale_range[0] <= 0:
            raise ParameterDomainError(f"scale_range must be positive, got {self.scale_range}")

    @classmethod
    def identity(cls):
        return cls((0.0, 0.0), (1.0, 1.0), (0.0, 0.0), (0.0, 0.0))


def placement_from_bbox(bbox, coverage_cap=0.3):
    """Largest square covering at most ``coverage_cap`` of the box, top-centered.

    The side is ``floor(sqrt(cap * w * h))`` additionally capped at
    ``min(w, h)`` so elongated boxes never get a patch wider than themselves.
    """
    x1, y1, x2, y2 = check_box(bbox, "bbox")
    if not 0.0 < coverage_cap <= 1.0:
        raise ParameterDomainError(f"coverage_cap must lie in (0, 1], got {coverage_cap}")
    w, h = x2 - x1, y2 - y1
    side = min(int(math.floor(math.sqrt(coverage_cap * w * h))), int(math.floor(min(w, h))))
    if side < 1:
        raise ParameterDomainError(f"bbox {bbox} with coverage_cap {coverage_cap} gives a zero-size patch")
    return Placement(target_bbox=(x1, y1, x2, y2), patch_side=side, anchor=((x1 + x2) / 2.0, y1),
                     coverage_cap=float(coverage_cap))


def sample_transform(cfg, rng_seed, index):
    """Draw one :class:`TransformSample`; deterministic in ``(rng_seed, index)``."""
    rng = np.random.default_rng([int(rng_seed), int(index)])
    return TransformSample(
        rotation=float(rng.uniform(*cfg.rotation_range)),
        scale=float(rng.uniform(*cfg.scale_range)),
        brightness_delta=float(rng.uniform(*cfg.brightness_range)),
        blur_sigma=float(rng.uniform(*cfg.blur_sigma_range)),
    )


def sample_dual_transform(cfg, rng_seed, index):
    """Transforms for an aligned visible/infrared instance.

    Rotation and scale are shared so the pair stays pixel-aligned; brightness
    and blur are drawn independently per sensor.
    """
    vis = sample_transform(cfg, rng_seed, 2 * int(index))
    other = sample_transform(cfg, rng_seed, 2 * int(index) + 1)
    ir = TransformSample(vis.rotation, vis.scale, other.brightness_delta, other.blur_sigma)
    return vis, ir


def _gaussian_kernel(sigma, dtype):
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum(), radius


def gaussian_blur_chw(x, sigma):
    """Separable Gaussian blur of a C x H x W tensor with zero padding."""
    if sigma <= 0:
        return x
    k, r = _gaussian_kernel(sigma, x.dtype)
    c = x.shape[0]
    x = x.unsqueeze(0)
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), padding=(0, r), groups=c)
    x = F.conv2d(x, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), padding=(r, 0), groups=c)
    return x[0]


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def warp_patch(patch, placement, t, canvas_hw):
    """Render ``patch`` onto an empty canvas of size ``canvas_hw``.

    Steps: scale to ``patch_side * t.scale``, rotate by ``t.rotation`` degrees
    (counter-clockwise as displayed) about the placement center with bilinear
    sampling, add ``t.brightness_delta`` and clamp to [0, 1], then blur inside
    the mask. Returns ``(patch_canvas, mask)`` as H x W x C and H x W x 1.

    Torch input keeps the autograd graph; numpy input returns numpy arrays.
    """
    p, is_torch = _as_tensor(patch)
    if p.ndim != 3 or p.shape[0] != p.shape[1] or p.shape[2] not in (1, 3):
        raise ShapeError(f"patch must be square S x S x C with C in (1, 3), got {tuple(p.shape)}")
    H, W = int(canvas_hw[0]), int(canvas_hw[1])
    S, C = p.shape[0], p.shape[2]
    side = placement.patch_side
    x0, y0 = placement.top_left
    dtype = p.dtype

    if t.rotation == 0.0 and t.scale == 1.0 and side == S:
        # exact paste, no resampling
        cx1, cy1, cx2, cy2 = max(x0, 0), max(y0, 0), min(x0 + S, W), min(y0 + S, H)
        if cx1 >= cx2 or cy1 >= cy2:
            raise ParameterDomainError(f"placement {placement} lies entirely outside the {H}x{W} canvas")
        wy1, wx1 = cy1, cx1
        wy2, wx2 = cy2, cx2
        local = p[cy1 - y0:cy2 - y0, cx1 - x0:cx2 - x0, :]
        local_mask = torch.ones(cy2 - cy1, cx2 - cx1, 1, dtype=dtype)
    else:
        cx, cy = x0 + side / 2.0, y0 + side / 2.0
        s_eff = side * t.scale
        reach = s_eff * math.sqrt(0.5) + 1.0
        wx1, wx2 = max(int(math.floor(cx - reach)), 0), min(int(math.ceil(cx + reach)), W)
        wy1, wy2 = max(int(math.floor(cy - reach)), 0), min(int(math.ceil(cy + reach)), H)
        if wx1 >= wx2 or wy1 >= wy2:
            raise ParameterDomainError(f"placement {placement} lies entirely outside the {H}x{W} canvas")
        ys = torch.arange(wy1, wy2, dtype=dtype) + 0.5 - cy
        xs = torch.arange(wx1, wx2, dtype=dtype) + 0.5 - cx
        dy, dx = torch.meshgrid(ys, xs, indexing="ij")
        th = math.radians(t.rotation)
        c, s = math.cos(th), math.sin(th)
        qx = (c * dx - s * dy) / s_eff
        qy = (s * dx + c * dy) / s_eff
        inside = (qx >= -0.5) & (qx < 0.5) & (qy >= -0.5) & (qy < 0.5)
        if not bool(inside.any()):
            raise ParameterDomainError(f"placement {placement} lies entirely outside the {H}x{W} canvas")
        grid = torch.stack([2.0 * qx, 2.0 * qy], dim=-1).unsqueeze(0)
        sampled = F.grid_sample(p.permute(2, 0, 1).unsqueeze(0), grid, mode="bilinear",
                                padding_mode="border", align_corners=False)[0]
        local_mask = inside.to(dtype).unsqueeze(-1)
        local = sampled.permute(1, 2, 0) * local_mask

    if t.brightness_delta != 0.0:
        local = torch.clamp(local + t.brightness_delta, 0.0, 1.0) * local_mask
    if t.blur_sigma > 0.0:
        # normalised convolution keeps the empty surround from darkening the rim
        num = gaussian_blur_chw(local.permute(2, 0, 1), t.blur_sigma)
        den = gaussian_blur_chw(local_mask.permute(2, 0, 1), t.blur_sigma)
        local = (num / den.clamp_min(1e-12)).permute(1, 2, 0) * local_mask

    canvas = torch.zeros(H, W, C, dtype=dtype)
    mask = torch.zeros(H, W, 1, dtype=dtype)
    canvas = canvas.index_put((torch.arange(wy1, wy2).view(-1, 1), torch.arange(wx1, wx2).view(1, -1)), local)
    mask[wy1:wy2, wx1:wx2] = local_mask
    if is_torch:
        return canvas, mask
    return canvas.detach().numpy(), mask.numpy()


def composite(image, patch_canvas, mask):
    """``(1 - mask) * image + mask * patch_canvas`` for a binary mask.

    Pixels under ``mask == 0`` are returned bit-identical.
    """
    img, t1 = _as_tensor(image)
    pc, t2 = _as_tensor(patch_canvas)
    m, _ = _as_tensor(mask)
    if img.shape != pc.shape:
        raise ShapeError(f"image {tuple(img.shape)} and patch_canvas {tuple(pc.shape)} differ")
    if m.shape[:2] != img.shape[:2] or m.ndim != 3 or m.shape[2] not in (1, img.shape[2]):
        raise ShapeError(f"mask shape {tuple(m.shape)} incompatible with image {tuple(img.shape)}")
    if pc.dtype != img.dtype:
        img = img.to(pc.dtype)
    out = torch.where(m > 0.5, pc, img)
    if t1 or t2:
        return out
    return out.numpy()
