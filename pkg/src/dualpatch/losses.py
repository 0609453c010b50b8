"""Attack objective: total variation, mean target score, and their weighted sum."""
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ParameterDomainError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    """``gamma`` weighs the TV term, ``delta`` the score term.

    ``tv_reduction`` is ``"sum"`` (plain total variation) or ``"mean"``
    (divided by the number of pixel-channel terms, which keeps the two terms
    on a comparable scale for large patches).
    """

    gamma: float = 2.5
    delta: float = 1.0
    tv_reduction: str = "sum"

    def __post_init__(self):
        if self.gamma < 0 or self.delta < 0:
            raise ParameterDomainError(f"loss weights must be >= 0, got gamma={self.gamma}, delta={self.delta}")
        if self.tv_reduction not in ("sum", "mean"):
            raise ParameterDomainError(f"tv_reduction must be 'sum' or 'mean', got {self.tv_reduction!r}")


def _tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def tv_loss(patch, reduction="sum"):
    """Isotropic total variation of an H x W x C patch.

    Each pixel contributes ``sqrt(dv**2 + dh**2)`` with forward differences;
    differences that would leave the patch count as zero. Where both are zero
    the subgradient is taken as zero.
    """
    p = _tensor(patch)
    if p.ndim == 2:
        p = p.unsqueeze(-1)
    if p.ndim != 3 or p.numel() == 0:
        raise ShapeError(f"patch must be a non-empty H x W x C array, got shape {tuple(p.shape)}")
    dv = torch.zeros_like(p)
    dh = torch.zeros_like(p)
    dv[:-1] = p[:-1] - p[1:]
    dh[:, :-1] = p[:, :-1] - p[:, 1:]
    sq = dv ** 2 + dh ** 2
    nz = sq > 0
    # sqrt has an infinite derivative at 0; route zeros through a safe branch
    safe = torch.where(nz, sq, torch.ones_like(sq))
    total = torch.where(nz, torch.sqrt(safe), torch.zeros_like(sq)).sum()
    if reduction == "mean":
        return total / p.numel()
    if reduction != "sum":
        raise ParameterDomainError(f"unknown reduction {reduction!r}")
    return total


def ap_loss(scores):
    """Arithmetic mean of target detection scores; 0 for an empty set."""
    s = _tensor(scores).reshape(-1)
    if s.numel() == 0:
        return torch.zeros((), dtype=s.dtype if s.is_floating_point() else torch.float64)
    if bool(((s < 0) | (s > 1) | ~torch.isfinite(s)).any()):
        raise ParameterDomainError("scores must lie in [0, 1]")
    return s.sum() / s.numel()


def adv_loss(patch, scores_visible, scores_infrared, weights=None):
    """``gamma * tv_loss(patch) + delta * ap_loss(visible ++ infrared)``."""
    w = LossWeights() if weights is None else weights
    sv = _tensor(scores_visible).reshape(-1)
    si = _tensor(scores_infrared).reshape(-1)
    if sv.numel() and si.numel() and sv.dtype != si.dtype:
        si = si.to(sv.dtype)
    scores = torch.cat([sv, si]) if si.numel() else sv
    return w.gamma * tv_loss(patch, w.tv_reduction) + w.delta * ap_loss(scores)
