"""Small anchor-free single-class detector used as a white-box victim.

A strided convolutional trunk produces, for every cell of a coarse grid, an
objectness logit and a box (center offset plus log-size relative to a prior).
Every cell is a raw candidate; final detections are thresholded and
suppressed. The whole path from pixels to raw scores is differentiable.
"""
import hashlib
import logging

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..errors import ShapeError, TrainingDivergenceError
from .boxes import nms

logger = logging.getLogger(__name__)


class _Net(torch.nn.Module):
    def __init__(self, in_channels, width):
        super().__init__()
        w = width
        self.trunk = torch.nn.Sequential(
            torch.nn.Conv2d(in_channels, w, 3, padding=1), torch.nn.ReLU(),
            torch.nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), torch.nn.ReLU(),
            torch.nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), torch.nn.ReLU(),
            torch.nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), torch.nn.ReLU(),
            torch.nn.Conv2d(4 * w, 4 * w, 3, padding=2, dilation=2), torch.nn.ReLU(),
        )
        self.head = torch.nn.Conv2d(4 * w, 5, 1)

    def forward(self, x):
        return self.head(self.trunk(x - 0.5))


STRIDE = 8


class ToyDetector(BaseEstimator):
    """Single-modality grid detector with a scikit-learn style interface.

    Parameters
    ----------
    in_channels : int
        3 for visible images, 1 for infrared.
    width : int, default=16
        Base channel count of the trunk.
    epochs, learning_rate, batch_size : training schedule (Adam).
    score_threshold : float, default=0.5
    nms_iou : float, default=0.5
    random_state : int, default=0
        Seeds initialisation, shuffling and flip augmentation.
    """

    def __init__(self, in_channels=3, width=16, epochs=30, learning_rate=2e-3, batch_size=32,
                 score_threshold=0.5, nms_iou=0.5, pos_weight=4.0, iou_aware=True, random_state=0):
        self.in_channels = in_channels
        self.width = width
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.pos_weight = pos_weight
        self.iou_aware = iou_aware
        self.random_state = random_state

    @property
    def prior(self):
        return 2.0 * STRIDE

    def _targets(self, boxes_list, gh, gw):
        n = len(boxes_list)
        obj = torch.zeros(n, gh, gw)
        box = torch.zeros(n, 4, gh, gw)
        area = torch.zeros(n, gh, gw)
        for k, boxes in enumerate(boxes_list):
            for (x1, y1, x2, y2) in boxes:
                cx, cy, w, h = (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1
                jc = min(int(cx // STRIDE), gw - 1)
                ic = min(int(cy // STRIDE), gh - 1)
                # center sampling: the center cell plus neighbours whose centers
                # fall inside the box and within one stride of its center
                for i in range(max(ic - 1, 0), min(ic + 2, gh)):
                    for j in range(max(jc - 1, 0), min(jc + 2, gw)):
                        px, py = (j + 0.5) * STRIDE, (i + 0.5) * STRIDE
                        central = (i, j) == (ic, jc)
                        if not central and not (x1 < px < x2 and y1 < py < y2
                                                and abs(px - cx) < STRIDE and abs(py - cy) < STRIDE):
                            continue
                        if obj[k, i, j] > 0 and area[k, i, j] <= w * h:
                            continue
                        area[k, i, j] = w * h
                        obj[k, i, j] = 1.0
                        box[k, :, i, j] = torch.tensor([cx / STRIDE - j, cy / STRIDE - i,
                                                        np.log(w / self.prior), np.log(h / self.prior)])
        return obj, box

    def _cell_iou(self, out, box_t):
        """IoU between each cell's decoded box and its target (same layout as ``_targets``)."""
        n, _, gh, gw = out.shape
        pred, _ = self._decode(out)
        jj = torch.arange(gw, dtype=out.dtype).view(1, 1, gw)
        ii = torch.arange(gh, dtype=out.dtype).view(1, gh, 1)
        cx, cy = (jj + box_t[:, 0]) * STRIDE, (ii + box_t[:, 1]) * STRIDE
        w, h = self.prior * torch.exp(box_t[:, 2]), self.prior * torch.exp(box_t[:, 3])
        tgt = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1).reshape(n, -1, 4)
        ix = (torch.minimum(pred[..., 2], tgt[..., 2]) - torch.maximum(pred[..., 0], tgt[..., 0])).clamp(min=0)
        iy = (torch.minimum(pred[..., 3], tgt[..., 3]) - torch.maximum(pred[..., 1], tgt[..., 1])).clamp(min=0)
        inter = ix * iy
        union = ((pred[..., 2] - pred[..., 0]) * (pred[..., 3] - pred[..., 1]) + w.reshape(n, -1) * h.reshape(n, -1)
                 - inter)
        return (inter / union.clamp(min=1e-9)).reshape(n, gh, gw)

    def _decode(self, out):
        n, _, gh, gw = out.shape
        jj = torch.arange(gw, dtype=out.dtype).view(1, 1, gw)
        ii = torch.arange(gh, dtype=out.dtype).view(1, gh, 1)
        cx = (jj + 2.0 * torch.sigmoid(out[:, 1]) - 0.5) * STRIDE
        cy = (ii + 2.0 * torch.sigmoid(out[:, 2]) - 0.5) * STRIDE
        w = self.prior * torch.exp(out[:, 3].clamp(-4, 4))
        h = self.prior * torch.exp(out[:, 4].clamp(-4, 4))
        boxes = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)
        return boxes.reshape(n, -1, 4), torch.sigmoid(out[:, 0]).reshape(n, -1)

    def fit(self, X, y):
        """Fit on images ``X`` (N x H x W x C in [0, 1]) and per-image box lists ``y``."""
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 4 or X.shape[-1] != self.in_channels:
            raise ShapeError(f"expected N x H x W x {self.in_channels} images, got {X.shape}")
        if len(y) != len(X):
            raise ShapeError("X and y differ in length")
        H, W = X.shape[1:3]
        gen = torch.Generator().manual_seed(int(self.random_state))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(self.random_state))
            net = _Net(self.in_channels, self.width)
        xt = torch.from_numpy(X).permute(0, 3, 1, 2).contiguous()
        gh, gw = -(-H // STRIDE), -(-W // STRIDE)
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, int(self.epochs)))
        self.loss_history_ = []
        n = len(X)
        for epoch in range(int(self.epochs)):
            order = torch.randperm(n, generator=gen)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                xb = xt[idx]
                boxes = [list(y[int(i)]) for i in idx]
                flips = torch.randint(0, 4, (1,), generator=gen).item()
                if flips & 1:
                    xb = xb.flip(-1)
                    boxes = [[(W - b[2], b[1], W - b[0], b[3]) for b in bl] for bl in boxes]
                if flips & 2:
                    xb = xb.flip(-2)
                    boxes = [[(b[0], H - b[3], b[2], H - b[1]) for b in bl] for bl in boxes]
                obj_t, box_t = self._targets(boxes, gh, gw)
                out = net(xb)
                pos = obj_t > 0
                if self.iou_aware:
                    obj_t = obj_t.clone()
                    obj_t[pos] = self._cell_iou(out.detach(), box_t)[pos]
                obj_loss = F.binary_cross_entropy_with_logits(
                    out[:, 0], obj_t, pos_weight=torch.tensor(self.pos_weight), reduction="sum") / len(idx)
                pred = torch.stack([2.0 * torch.sigmoid(out[:, 1]) - 0.5, 2.0 * torch.sigmoid(out[:, 2]) - 0.5,
                                    out[:, 3], out[:, 4]], dim=1)
                pm = pos.unsqueeze(1).expand_as(pred)
                box_loss = F.smooth_l1_loss(pred[pm], box_t[pm], reduction="sum", beta=0.1) / len(idx)
                loss = obj_loss + 2.0 * box_loss
                if not torch.isfinite(loss):
                    raise TrainingDivergenceError(f"detector loss became non-finite at epoch {epoch}", epoch=epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            sched.step()
            self.loss_history_.append(total / n)
            logger.debug("detector epoch %d loss %.4f", epoch, self.loss_history_[-1])
        net.requires_grad_(False)
        net.eval()
        self.net_ = net
        return self

    def _net_for(self, dtype):
        check_is_fitted(self, "net_")
        if dtype == torch.float32:
            return self.net_
        cache = self.__dict__.setdefault("_net_cache", {})
        if dtype not in cache:
            net = _Net(self.in_channels, self.width).to(dtype)
            net.load_state_dict({k: v.to(dtype) for k, v in self.net_.state_dict().items()})
            net.requires_grad_(False)
            cache[dtype] = net
        return cache[dtype]

    def raw_candidates(self, images):
        """Decoded boxes (N x K x 4) and scores (N x K) for every grid cell.

        ``images`` is an N x H x W x C tensor (or array); scores keep the
        autograd graph of a tensor input.
        """
        x = images if isinstance(images, torch.Tensor) else torch.as_tensor(np.asarray(images, dtype=np.float32))
        if x.ndim == 3:
            x = x.unsqueeze(0)
        if x.ndim != 4 or x.shape[-1] != self.in_channels:
            raise ShapeError(f"expected N x H x W x {self.in_channels} input, got {tuple(x.shape)}")
        out = self._net_for(x.dtype)(x.permute(0, 3, 1, 2))
        return self._decode(out)

    def filter(self, boxes, scores, threshold=None):
        """Threshold then suppress one image's raw candidates -> (boxes, scores) arrays."""
        thr = self.score_threshold if threshold is None else threshold
        b = boxes.detach().cpu().numpy().astype(np.float64) if isinstance(boxes, torch.Tensor) else np.asarray(boxes)
        s = scores.detach().cpu().numpy().astype(np.float64) if isinstance(scores, torch.Tensor) else np.asarray(scores)
        sel = np.flatnonzero(s >= thr)
        keep = sel[nms(b[sel], s[sel], self.nms_iou)] if len(sel) else sel
        return b[keep], s[keep]

    def predict(self, X, threshold=None):
        """List (per image) of ``(boxes, scores)`` after thresholding and suppression."""
        with torch.no_grad():
            boxes, scores = self.raw_candidates(X)
        return [self.filter(boxes[k], scores[k], threshold) for k in range(len(boxes))]

    def checksum(self):
        check_is_fitted(self, "net_")
        h = hashlib.sha256()
        for k, v in sorted(self.net_.state_dict().items()):
            h.update(k.encode())
            h.update(v.numpy().tobytes())
        return h.hexdigest()

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_net_cache", None)
        return state
