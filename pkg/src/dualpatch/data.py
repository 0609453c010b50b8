"""Paired visible/infrared datasets: loading, multi-scale clipping, synthesis.

On-disk layout (one directory per split)::

    root/<split>/visible/<id>.png    8-bit RGB
    root/<split>/infrared/<id>.png   8-bit grayscale
    root/<split>/labels/<id>.txt     "class cx cy w h" per line, normalized to [0, 1]
"""
import colorsys
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter, zoom

from .errors import LabelParseError, PairingError, ParameterDomainError, ShapeError
from .thermal import (SceneConditions, ThermalCameraConfig, _equilibrium_temperature, color_to_absorptivity,
                      render_absorptivity_ir, render_synthetic_ir, temperature_to_intensity)

logger = logging.getLogger(__name__)

MODALITY_DIRS = ("visible", "infrared", "labels")


@dataclass
class ImagePair:
    visible: np.ndarray    # H x W x 3, [0, 1]
    infrared: np.ndarray   # H x W x 1, [0, 1]
    boxes: list = field(default_factory=list)  # [(class_id, (x1, y1, x2, y2)), ...]
    id: str = ""

    def __post_init__(self):
        if self.infrared.ndim == 2:
            self.infrared = self.infrared[:, :, None]
        if self.visible.shape[:2] != self.infrared.shape[:2]:
            raise ShapeError(f"pair {self.id!r}: visible {self.visible.shape} and infrared "
                             f"{self.infrared.shape} are not aligned")

    @property
    def hw(self):
        return self.visible.shape[:2]

    @property
    def gt_boxes(self):
        return [tuple(b) for _, b in self.boxes]


@dataclass
class DatasetManifest:
    root: str
    ids: list
    split: str = "train"

    def paths(self, sample_id):
        base = os.path.join(self.root, self.split)
        return (os.path.join(base, "visible", f"{sample_id}.png"),
                os.path.join(base, "infrared", f"{sample_id}.png"),
                os.path.join(base, "labels", f"{sample_id}.txt"))

    def __len__(self):
        return len(self.ids)

    def pairs(self):
        for sample_id in self.ids:
            yield read_pair(self, sample_id)


def box_to_label(box, hw):
    """Pixel ``(x1, y1, x2, y2)`` -> normalized ``(cx, cy, w, h)``."""
    H, W = hw
    x1, y1, x2, y2 = box
    return ((x1 + x2) / 2.0 / W, (y1 + y2) / 2.0 / H, (x2 - x1) / W, (y2 - y1) / H)


def label_to_box(label, hw):
    H, W = hw
    cx, cy, w, h = label
    return ((cx - w / 2.0) * W, (cy - h / 2.0) * H, (cx + w / 2.0) * W, (cy + h / 2.0) * H)


def parse_labels(path, hw):
    boxes = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                if len(parts) != 5:
                    raise ValueError(f"expected 5 fields, got {len(parts)}")
                cls = int(parts[0])
                vals = tuple(float(v) for v in parts[1:])
                if not all(math.isfinite(v) for v in vals):
                    raise ValueError("non-finite coordinate")
            except ValueError as exc:
                raise LabelParseError(f"{path}:{lineno}: malformed label line {line.rstrip()!r} ({exc})",
                                      path=path, line=lineno) from exc
            boxes.append((cls, label_to_box(vals, hw)))
    return boxes


def format_labels(boxes, hw):
    lines = []
    for cls, box in boxes:
        cx, cy, w, h = box_to_label(box, hw)
        lines.append(f"{int(cls)} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}\n")
    return "".join(lines)


def _read_png(path, mode):
    with Image.open(path) as im:
        arr = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    return arr if arr.ndim == 3 else arr[:, :, None]


def _to_uint8(x):
    return np.clip(np.round(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def read_pair(manifest, sample_id):
    vis_p, ir_p, lab_p = manifest.paths(sample_id)
    for p in (vis_p, ir_p, lab_p):
        if not os.path.exists(p):
            raise PairingError(f"sample {sample_id!r}: missing counterpart file {p}")
    vis = _read_png(vis_p, "RGB")
    ir = _read_png(ir_p, "L")
    if vis.shape[:2] != ir.shape[:2]:
        raise PairingError(f"sample {sample_id!r}: visible {vis.shape[:2]} and infrared {ir.shape[:2]} differ in size")
    return ImagePair(vis, ir, parse_labels(lab_p, vis.shape[:2]), sample_id)


def write_pair(pair, root, split):
    base = os.path.join(root, split)
    for sub in MODALITY_DIRS:
        os.makedirs(os.path.join(base, sub), exist_ok=True)
    Image.fromarray(_to_uint8(pair.visible), "RGB").save(os.path.join(base, "visible", f"{pair.id}.png"))
    Image.fromarray(_to_uint8(pair.infrared[:, :, 0]), "L").save(os.path.join(base, "infrared", f"{pair.id}.png"))
    with open(os.path.join(base, "labels", f"{pair.id}.txt"), "w", newline="\n") as fh:
        fh.write(format_labels(pair.boxes, pair.hw))


def load_dataset(root, split="train"):
    """Scan ``root/split`` and return ``(manifest, iterator over ImagePair)``.

    Every id found in any modality directory must exist in all three, else a
    :class:`PairingError` naming the id is raised.
    """
    base = os.path.join(root, split)
    if not os.path.isdir(base):
        raise FileNotFoundError(f"dataset split directory not found: {base}")
    stems = {}
    for sub, ext in zip(MODALITY_DIRS, (".png", ".png", ".txt")):
        d = os.path.join(base, sub)
        stems[sub] = {f[:-len(ext)] for f in os.listdir(d) if f.endswith(ext)} if os.path.isdir(d) else set()
    all_ids = set().union(*stems.values())
    for sample_id in sorted(all_ids):
        missing = [sub for sub in MODALITY_DIRS if sample_id not in stems[sub]]
        if missing:
            raise PairingError(f"sample {sample_id!r} has no {'/'.join(missing)} counterpart in {base}")
    manifest = DatasetManifest(root=str(root), ids=sorted(all_ids), split=split)
    return manifest, manifest.pairs()


def load_pairs(root, split="train", limit=None):
    manifest, it = load_dataset(root, split)
    pairs = []
    for p in it:
        pairs.append(p)
        if limit is not None and len(pairs) >= limit:
            break
    return pairs


def resize_image(img, out_hw):
    """Bilinear (antialiased) resize of an H x W x C array in [0, 1]."""
    t = torch.as_tensor(np.ascontiguousarray(img), dtype=torch.float64).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=tuple(out_hw), mode="bilinear", align_corners=False, antialias=True)
    return np.clip(out[0].permute(1, 2, 0).numpy(), 0.0, 1.0)


def multiscale_clip(pair, dilation_factors=(2, 4, 8), rng_seed=0, out_size=(416, 416), min_keep=0.5):
    """Crop each target at several window scales.

    For box ``b`` and factor ``f`` the window is ``f`` times the box width and
    height, placed uniformly at random so that ``b`` stays fully inside, then
    clipped to the image. Both modalities get the same window. Other boxes are
    kept (clipped) when at least ``min_keep`` of their area survives. Crops are
    resized to ``out_size`` (H, W).
    """
    if not pair.boxes:
        raise ParameterDomainError(f"pair {pair.id!r} has no boxes to clip around")
    rng = np.random.default_rng(rng_seed)
    return [clip_around(pair, bi, f, rng, out_size, min_keep)
            for bi in range(len(pair.boxes)) for f in dilation_factors]


def clip_around(pair, box_index, factor, rng, out_size=(416, 416), min_keep=0.5):
    """One multi-scale crop around ``pair.boxes[box_index]`` (see :func:`multiscale_clip`)."""
    if factor < 1:
        raise ParameterDomainError(f"dilation factor must be >= 1, got {factor}")
    H, W = pair.hw
    oh, ow = out_size
    x1, y1, x2, y2 = pair.boxes[box_index][1]
    bx1, by1 = int(math.floor(x1)), int(math.floor(y1))
    bx2, by2 = int(math.ceil(x2)), int(math.ceil(y2))
    ww, wh = int(math.ceil(factor * (bx2 - bx1))), int(math.ceil(factor * (by2 - by1)))
    wx1 = int(rng.integers(bx2 - ww, bx1 + 1))
    wy1 = int(rng.integers(by2 - wh, by1 + 1))
    cx1, cy1 = max(wx1, 0), max(wy1, 0)
    cx2, cy2 = min(wx1 + ww, W), min(wy1 + wh, H)
    sx, sy = ow / (cx2 - cx1), oh / (cy2 - cy1)
    boxes = []
    for ocls, (ox1, oy1, ox2, oy2) in pair.boxes:
        ix1, iy1 = max(ox1, cx1), max(oy1, cy1)
        ix2, iy2 = min(ox2, cx2), min(oy2, cy2)
        if ix2 <= ix1 or iy2 <= iy1:
            continue
        if (ix2 - ix1) * (iy2 - iy1) < min_keep * (ox2 - ox1) * (oy2 - oy1):
            continue
        boxes.append((ocls, ((ix1 - cx1) * sx, (iy1 - cy1) * sy, (ix2 - cx1) * sx, (iy2 - cy1) * sy)))
    vis = resize_image(pair.visible[cy1:cy2, cx1:cx2], (oh, ow))
    ir = resize_image(pair.infrared[cy1:cy2, cx1:cx2], (oh, ow))
    return ImagePair(vis, ir, boxes, f"{pair.id}_b{box_index}_x{factor:g}")


@dataclass
class SyntheticConfig:
    """Scene generator settings (sizes in pixels unless noted)."""

    image_size: int = 96
    min_vehicles: int = 1
    max_vehicles: int = 4
    vehicle_size_range: tuple = (0.08, 0.40)  # fraction of image side
    ground_types: tuple = ("asphalt",)
    min_ir_contrast: float = 0.12
    marking_prob: float = 0.6
    marking_area_range: tuple = (0.10, 0.35)  # fraction of the object's area
    noise_marking_fraction: float = 0.5
    val_fraction: float = 0.2
    n_boards: int = 8
    board_size: int = 64
    irradiance_G: float = 1000.0
    emissivity_eps: float = 0.95
    ambient_T: float = 300.0
    t_min: float = 290.0
    t_max: float = 400.0
    diffusion_sigma: float = 0.0

    def __post_init__(self):
        self.ground_types = tuple(self.ground_types)
        unknown = [g for g in self.ground_types if g not in GROUND_TYPES]
        if unknown or not self.ground_types:
            raise ParameterDomainError(f"ground_types must be a non-empty subset of {sorted(GROUND_TYPES)}, "
                                       f"got {self.ground_types}")

    @property
    def scene(self):
        return SceneConditions(self.irradiance_G, self.emissivity_eps, self.ambient_T)

    @property
    def camera(self):
        return ThermalCameraConfig(self.t_min, self.t_max, self.diffusion_sigma)


def _ir_of_color(rgb, cfg):
    return float(temperature_to_intensity(_equilibrium_temperature(color_to_absorptivity(rgb), cfg.scene), cfg.camera))


# ground cover: mean RGB, half-width of a per-image brightness offset, and the
# material's own solar absorptivity range (None: behaves like paint of its color)
GROUND_TYPES = {
    "asphalt": ((0.25, 0.25, 0.25), 0.10, None),
    "road": ((0.25, 0.25, 0.25), 0.10, (0.55, 0.62)),
    "concrete": ((0.65, 0.65, 0.62), 0.08, None),
    "grass": ((0.28, 0.42, 0.20), 0.06, None),
    "soil": ((0.55, 0.45, 0.32), 0.08, None),
}


def _background(rng, cfg):
    """Ground image, its mean color and its per-pixel absorptivity map."""
    S = cfg.image_size
    kind = cfg.ground_types[int(rng.integers(len(cfg.ground_types)))]
    base, spread, material = GROUND_TYPES[kind]
    color = np.clip(np.asarray(base) + rng.uniform(-spread, spread) + rng.uniform(-0.03, 0.03, size=3), 0.0, 1.0)
    coarse = gaussian_filter(rng.normal(0, 1, (S, S)), sigma=S / 12.0, mode="wrap")
    coarse = coarse / (coarse.std() + 1e-12) * 0.04
    fine = rng.normal(0, 0.015, (S, S, 3))
    img = np.clip(color[None, None, :] + coarse[:, :, None] + fine, 0.0, 1.0)
    alpha = color_to_absorptivity(img)
    if material is not None:
        # keep the visible texture, shift the level to the material's absorptivity
        alpha = np.clip(alpha - color_to_absorptivity(color) + rng.uniform(*material), 0.0, 1.0)
    return img, alpha


def _vehicle_color(rng, bg_alpha, cfg):
    bg_ir = float(temperature_to_intensity(_equilibrium_temperature(bg_alpha, cfg.scene), cfg.camera))
    for _ in range(1000):
        h = rng.uniform(0, 1)
        s = rng.uniform(0.7, 1.0)
        v = rng.uniform(0.75, 1.0)
        rgb = np.array(colorsys.hsv_to_rgb(h, s, v))
        if abs(_ir_of_color(rgb, cfg) - bg_ir) >= cfg.min_ir_contrast:
            return rgb
    raise ParameterDomainError("could not draw a vehicle color with the requested infrared contrast")


def _place_boxes(rng, n, cfg):
    S = cfg.image_size
    lo, hi = cfg.vehicle_size_range
    boxes = []
    for _ in range(200 * n):
        if len(boxes) == n:
            break
        w = int(round(rng.uniform(lo, hi) * S))
        h = int(round(rng.uniform(lo, hi) * S))
        x1 = int(rng.integers(0, S - w + 1))
        y1 = int(rng.integers(0, S - h + 1))
        cand = (x1, y1, x1 + w, y1 + h)
        if all(cand[2] + 2 <= b[0] or b[2] + 2 <= cand[0] or cand[3] + 2 <= b[1] or b[3] + 2 <= cand[1]
               for b in boxes):
            boxes.append(cand)
    return boxes


def _sub_rect(rng, x1, y1, x2, y2, area_range):
    w, h = x2 - x1, y2 - y1
    frac = rng.uniform(*area_range)
    aspect = rng.uniform(0.6, 1.6)
    sw = int(np.clip(round(math.sqrt(frac * w * h * aspect)), 2, w))
    sh = int(np.clip(round(frac * w * h / sw), 2, h))
    sx = int(rng.integers(x1, x2 - sw + 1))
    sy = int(rng.integers(y1, y2 - sh + 1))
    return sx, sy, sw, sh


def synthesize_scene(rng, cfg, sample_id=""):
    """One RGB scene with vehicles, its rendered infrared twin and vehicle boxes.

    Vehicles are uniform-colored rectangles. Some carry a marking (one solid
    color or pixel noise) so that a detector cannot rely on vehicles being
    perfectly uniform.
    """
    img, alpha = _background(rng, cfg)
    bg_alpha = float(alpha.mean())
    paint = np.zeros(img.shape[:2], dtype=bool)
    n = int(rng.integers(cfg.min_vehicles, cfg.max_vehicles + 1))
    boxes = []
    for (x1, y1, x2, y2) in _place_boxes(rng, n, cfg):
        paint[y1:y2, x1:x2] = True
        color = _vehicle_color(rng, bg_alpha, cfg)
        body = color[None, None, :] + rng.normal(0, 0.01, (y2 - y1, x2 - x1, 3))
        img[y1:y2, x1:x2] = np.clip(body, 0.0, 1.0)
        if rng.random() < cfg.marking_prob:
            sx, sy, sw, sh = _sub_rect(rng, x1, y1, x2, y2, cfg.marking_area_range)
            if rng.random() >= cfg.noise_marking_fraction:
                img[sy:sy + sh, sx:sx + sw] = rng.uniform(0, 1, 3)
            else:
                img[sy:sy + sh, sx:sx + sw] = rng.uniform(0, 1, (sh, sw, 3))
        boxes.append((0, (float(x1), float(y1), float(x2), float(y2))))
    # painted surfaces follow the paint law, bare ground keeps its own absorptivity
    alpha = np.where(paint, color_to_absorptivity(img), alpha)
    ir = render_absorptivity_ir(alpha, cfg.scene, cfg.camera)
    return ImagePair(img, ir, boxes, sample_id)


def synthesize_board(rng, cfg, sample_id="", grid=4):
    """Smooth color-gradient board: bilinear upsampling of a random color grid."""
    coarse = rng.uniform(0, 1, (grid, grid, 3))
    f = cfg.board_size / grid
    img = np.clip(zoom(coarse, (f, f, 1), order=1, mode="nearest", grid_mode=True), 0.0, 1.0)
    ir = render_synthetic_ir(img, cfg.scene, cfg.camera)
    return ImagePair(img, ir, [], sample_id)


def gen_synthetic_dataset(n_images, config=None, rng_seed=0, out_root="data"):
    """Write ``n_images`` synthetic scene pairs (split into train/val) plus color boards.

    Returns the manifests ``[train, val, boards]`` (val or boards omitted when
    empty). Output is byte-identical for the same seed and config.
    """
    cfg = SyntheticConfig() if config is None else config
    if int(n_images) < 1:
        raise ParameterDomainError(f"n_images must be >= 1, got {n_images}")
    n_val = int(round(n_images * cfg.val_fraction)) if n_images > 1 else 0
    n_train = n_images - n_val
    os.makedirs(out_root, exist_ok=True)
    manifests = []
    for split, count, offset in (("train", n_train, 0), ("val", n_val, n_train)):
        if count == 0:
            continue
        ids = []
        for k in range(count):
            sample_id = f"{offset + k:06d}"
            rng = np.random.default_rng([int(rng_seed), offset + k])
            write_pair(synthesize_scene(rng, cfg, sample_id), out_root, split)
            ids.append(sample_id)
        manifests.append(DatasetManifest(str(out_root), ids, split))
    if cfg.n_boards > 0:
        ids = []
        for k in range(cfg.n_boards):
            sample_id = f"board{k:03d}"
            rng = np.random.default_rng([int(rng_seed), 1_000_000 + k])
            write_pair(synthesize_board(rng, cfg, sample_id), out_root, "boards")
            ids.append(sample_id)
        manifests.append(DatasetManifest(str(out_root), ids, "boards"))
    meta = {"n_images": int(n_images), "rng_seed": int(rng_seed), "config": asdict(cfg)}
    with open(os.path.join(out_root, "dataset.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return manifests
