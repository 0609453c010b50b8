"""Attack success rate, threshold sweeps, transfer matrices, baselines and reports.

ASR is ``(n_clean - n_patch) / n_clean`` where the counts are detections at or
above a confidence threshold on the clean and on the patched images. In
matched mode (the default) a detection only counts when it matches a
ground-truth box one-to-one at IoU >= 0.5, so background false positives
cannot inflate or mask the effect. The fused modality counts an object as
detected when either branch matches it; it is only defined in matched mode.
"""
import csv
import dataclasses
import logging
import os
from dataclasses import dataclass

import numpy as np
import torch

from .attack import Patch, apply_patch, train_patch
from .data import multiscale_clip
from .detectors.boxes import match_count
from .detectors.gateway import MODALITIES, finalize, raw_batch
from .errors import ParameterDomainError, UndefinedASRError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)
SOLID_COLORS = {
    "blue": (0.0, 0.0, 1.0),
    "green": (0.0, 1.0, 0.0),
    "red": (1.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
CSV_HEADER = ("variant", "modality", "threshold", "n_clean", "n_patch", "asr")


@dataclass(frozen=True)
class AsrReport:
    modality: str
    threshold: float
    n_clean: int
    n_patch: int
    variant: str = ""

    def __post_init__(self):
        if self.n_clean <= 0:
            raise UndefinedASRError(f"ASR undefined for {self.modality} at threshold {self.threshold}: "
                                    "no clean detections")

    @property
    def asr(self):
        return (self.n_clean - self.n_patch) / self.n_clean

    def row(self):
        return (self.variant, self.modality, f"{self.threshold:.4f}", str(self.n_clean), str(self.n_patch),
                f"{self.asr:.6f}")


@dataclass
class TransferMatrix:
    """``cells[i, j]``: ASR of the patch trained on victim ``i`` evaluated on victim ``j``."""

    victim_ids: list
    cells: np.ndarray
    modality: str = "fused"
    threshold: float = 0.5

    def cell(self, source, target):
        return float(self.cells[self.victim_ids.index(source), self.victim_ids.index(target)])

    @property
    def diagonal(self):
        return np.diag(self.cells).copy()

    def reports(self):
        return [(f"{s}->{t}", self.modality, self.threshold, float(self.cells[i, j]))
                for i, s in enumerate(self.victim_ids) for j, t in enumerate(self.victim_ids)]


def _stack(images):
    return torch.as_tensor(np.stack(images).astype(np.float32))


def _raw_pass(victim, modality, images, batch_size=64):
    """Raw candidates for a list of images, batching runs of equally shaped images."""
    out = []
    start = 0
    while start < len(images):
        shape = images[start].shape
        stop = start
        while stop < len(images) and stop - start < batch_size and images[stop].shape == shape:
            stop += 1
        with torch.no_grad():
            out.extend(raw_batch(victim, modality, _stack(images[start:stop])))
        start = stop
    return out


class DetectionPasses:
    """Raw detector output on clean and patched copies of a dataset, computed once.

    Counting at any threshold only re-filters the cached raw candidates, which
    is what makes threshold sweeps consistent with single-threshold calls.
    """

    def __init__(self, dataset, patch, victim, ir_source="physics", adapter=None, coverage_cap=0.3):
        self.pairs = [p for p in dataset]
        self.victim = victim
        self.modalities = [m for m in MODALITIES if victim.has(m)]
        patched = [apply_patch(p, patch, ir_source=ir_source, adapter=adapter, coverage_cap=coverage_cap)
                   for p in self.pairs]
        self.raw = {}
        for m in self.modalities:
            self.raw[("clean", m)] = _raw_pass(victim, m, [getattr(p, m) for p in self.pairs])
            self.raw[("patch", m)] = _raw_pass(victim, m, [getattr(p, m) for p in patched])

    def _detections(self, which, modality, threshold):
        return [finalize(self.victim, modality, r, p.hw, threshold)
                for r, p in zip(self.raw[(which, modality)], self.pairs)]

    def counts(self, threshold, matched=True, iou_min=0.5):
        """``{modality: (n_clean, n_patch)}``; includes ``fused`` in matched mode for dual victims."""
        res = {}
        masks = {}
        for m in self.modalities:
            pair_counts = []
            for which in ("clean", "patch"):
                dets = self._detections(which, m, threshold)
                if matched:
                    ms = [match_count([d.bbox for d in dl], p.gt_boxes, iou_min)[1] for dl, p in zip(dets, self.pairs)]
                    masks[(which, m)] = ms
                    pair_counts.append(int(sum(mk.sum() for mk in ms)))
                else:
                    pair_counts.append(sum(len(dl) for dl in dets))
            res[m] = tuple(pair_counts)
        if matched and len(self.modalities) == 2:
            res["fused"] = tuple(
                int(sum((a | b).sum() for a, b in zip(masks[(w, "visible")], masks[(w, "infrared")])))
                for w in ("clean", "patch"))
        return res

    def reports(self, threshold, matched=True, variant="", iou_min=0.5):
        return {m: AsrReport(m, float(threshold), nc, npch, variant)
                for m, (nc, npch) in self.counts(threshold, matched, iou_min).items()}


def compute_asr(dataset, patch, victim, threshold=0.5, matched=True, ir_source="physics", adapter=None,
                coverage_cap=0.3, variant=""):
    """ASR per modality (plus ``fused`` for dual victims in matched mode).

    Patches are pasted on every ground-truth box with the identity transform;
    the infrared appearance of the patch comes from ``ir_source`` (see
    :func:`~dualpatch.attack.apply_patch`).
    """
    passes = DetectionPasses(dataset, patch, victim, ir_source, adapter, coverage_cap)
    return passes.reports(threshold, matched, variant)


def threshold_sweep(dataset, patch, victim, thresholds=DEFAULT_THRESHOLDS, matched=True, ir_source="physics",
                    adapter=None, coverage_cap=0.3, variant=""):
    """One :class:`AsrReport` per (threshold, modality), from a single pair of detection passes."""
    passes = DetectionPasses(dataset, patch, victim, ir_source, adapter, coverage_cap)
    out = []
    for t in thresholds:
        out.extend(passes.reports(t, matched, variant).values())
    return out


def transfer_eval(patches, victims, dataset, threshold=0.5, modality="fused", **kwargs):
    """Cross product of patch sources (rows) and evaluated victims (columns)."""
    ids = [v.id for v in victims]
    missing = [i for i in ids if i not in patches]
    if missing:
        raise KeyError(f"no patch for victim(s) {missing}")
    cells = np.zeros((len(ids), len(ids)))
    for j, victim in enumerate(victims):
        for i, src in enumerate(ids):
            reps = compute_asr(dataset, patches[src], victim, threshold, **kwargs)
            if modality not in reps:
                raise ParameterDomainError(f"victim {victim.id!r} yields no {modality!r} report")
            cells[i, j] = reps[modality].asr
    return TransferMatrix(ids, cells, modality, float(threshold))


def baseline_patches(kind, size=256, rng_seed=0, color=None):
    """``random`` (seeded i.i.d. uniform) or ``solid`` (``color`` by name or RGB triple).

    ``kind`` may also be written ``"solid:<name>"``.
    """
    if kind.startswith("solid:"):
        kind, color = "solid", kind.split(":", 1)[1]
    if kind == "random":
        px = np.random.default_rng(rng_seed).uniform(0.0, 1.0, (size, size, 3))
        return Patch(px, {"baseline": "random", "seed": int(rng_seed)})
    if kind == "solid":
        if isinstance(color, str):
            if color not in SOLID_COLORS:
                raise ParameterDomainError(f"unknown color {color!r}; known: {sorted(SOLID_COLORS)}")
            rgb = SOLID_COLORS[color]
        else:
            rgb = tuple(float(c) for c in color)
            if len(rgb) != 3 or not all(0.0 <= c <= 1.0 for c in rgb):
                raise ParameterDomainError(f"solid color must be an RGB triple in [0, 1], got {color!r}")
        px = np.broadcast_to(np.asarray(rgb, dtype=np.float64), (size, size, 3)).copy()
        return Patch(px, {"baseline": f"solid:{color}"})
    raise ParameterDomainError(f"unknown baseline kind {kind!r}")


def multiscale_test_split(dataset, dilation_factors=(2, 4, 8), rng_seed=0, out_size=None):
    """Every pair clipped around every target at every factor (crops keep the pair's size by default)."""
    out = []
    for k, pair in enumerate(dataset):
        if not pair.boxes:
            continue
        size = pair.hw if out_size is None else out_size
        out.extend(multiscale_clip(pair, dilation_factors, rng_seed=[int(rng_seed), k], out_size=size))
    return out


ABLATION_VARIANTS = (
    ("full", {}),
    ("no_adapter", {"use_adapter": False}),
    ("no_augmentation", {"use_augmentation": False}),
)


@dataclass
class AblationResult:
    rows: list  # (variant, visible ASR, infrared ASR)
    reports: dict  # variant -> {modality: AsrReport}
    patches: dict  # variant -> Patch

    def asr(self, variant, modality):
        return self.reports[variant][modality].asr


def ablation_suite(dataset, victim, adapter, base_cfg, test_set, threshold=0.5, ir_source="physics"):
    """Train the full attack and its no-adapter / no-augmentation variants with one seed and evaluate each.

    ``test_set`` is the evaluation data, typically :func:`multiscale_test_split`
    of held-out pairs.
    """
    rows, reports, patches = [], {}, {}
    for name, change in ABLATION_VARIANTS:
        cfg = dataclasses.replace(base_cfg, **change)
        patch, _ = train_patch(dataset, victim, adapter, cfg)
        rep = compute_asr(test_set, patch, victim, threshold, ir_source=ir_source, adapter=adapter,
                          coverage_cap=cfg.coverage_cap, variant=name)
        reports[name], patches[name] = rep, patch
        rows.append((name, rep["visible"].asr, rep["infrared"].asr))
        logger.info("ablation %s: visible %.3f infrared %.3f", name, rows[-1][1], rows[-1][2])
    return AblationResult(rows, reports, patches)


def _flatten(results):
    if isinstance(results, dict):
        results = list(results.values())
    flat = []
    for r in results:
        if isinstance(r, dict):
            flat.extend(r.values())
        else:
            flat.append(r)
    return flat


def emit_report(results, out_dir, config_hash, name="asr"):
    """Write ``<name>_<hash>.csv`` plus plots; returns the written paths.

    ``results`` is a list (or dict) of :class:`AsrReport`, an
    :class:`AblationResult` or a :class:`TransferMatrix`. With several
    thresholds per (variant, modality) an ASR-vs-threshold plot is written;
    a transfer matrix yields a heatmap.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if isinstance(results, AblationResult):
        results = _flatten(results.reports)
    if isinstance(results, TransferMatrix):
        if results.cells.size == 0:
            raise ParameterDomainError("empty transfer matrix")
        rows = [(label, mod, f"{thr:.4f}", "", "", f"{asr:.6f}") for label, mod, thr, asr in results.reports()]
    else:
        results = _flatten(results)
        if not results:
            raise ParameterDomainError("no results to report")
        rows = [r.row() for r in results]
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.join(out_dir, f"{name}_{config_hash}")
    written = [stem + ".csv"]
    with open(stem + ".csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(rows)
    if isinstance(results, TransferMatrix):
        fig, ax = plt.subplots(figsize=(4, 3.5))
        im = ax.imshow(results.cells, vmin=0, vmax=1, cmap="viridis")
        ax.set_xticks(range(len(results.victim_ids)), results.victim_ids, rotation=45, ha="right")
        ax.set_yticks(range(len(results.victim_ids)), results.victim_ids)
        ax.set_xlabel("evaluated victim")
        ax.set_ylabel("patch source")
        for i in range(results.cells.shape[0]):
            for j in range(results.cells.shape[1]):
                ax.text(j, i, f"{results.cells[i, j]:.2f}", ha="center", va="center", color="w")
        fig.colorbar(im, ax=ax, label=f"ASR ({results.modality})")
        fig.tight_layout()
        fig.savefig(stem + "_heatmap.png", metadata={"Software": None})
        plt.close(fig)
        written.append(stem + "_heatmap.png")
        return written
    series = {}
    for r in results:
        series.setdefault((r.variant, r.modality), []).append((r.threshold, r.asr))
    if any(len(v) > 1 for v in series.values()):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for (variant, mod), pts in sorted(series.items()):
            pts = sorted(pts)
            label = f"{variant} {mod}".strip()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
        ax.set_xlabel("confidence threshold")
        ax.set_ylabel("ASR")
        ax.set_ylim(min(0.0, min(p[1] for v in series.values() for p in v)), 1.0)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(stem + "_sweep.png", metadata={"Software": None})
        plt.close(fig)
        written.append(stem + "_sweep.png")
    return written
