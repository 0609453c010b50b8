"""Pixel-wise RGB -> infrared intensity regressor.

The adapter is a 3 -> 64 -> 64 -> 1 perceptron with rectifier hidden units and
a logistic output, fitted by mean squared error on aligned (rgb, ir) pixel
pairs. Once fitted it is used as a frozen, differentiable color-to-thermal
map so that infrared-branch gradients reach the RGB patch.
"""
import logging
import os
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .errors import FormatError, ShapeError, TrainingDivergenceError
from .validation import check_image

logger = logging.getLogger(__name__)

ADAPTER_FORMAT_VERSION = 1


@dataclass
class PixelPairSet:
    inputs: np.ndarray   # N x 3
    targets: np.ndarray  # N x 1

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64).reshape(-1, 3)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 1)
        if len(self.inputs) != len(self.targets):
            raise ShapeError(f"inputs ({len(self.inputs)}) and targets ({len(self.targets)}) differ in length")
        if len(self.inputs) < 1:
            raise ShapeError("a PixelPairSet needs at least one pair")

    def __len__(self):
        return len(self.inputs)


def sample_pixel_pairs(image_pairs, n, rng_seed=0):
    """Draw ``n`` aligned (rgb, ir) pixels uniformly over all pixels of all pairs.

    Sampling is with replacement, so ``n`` may exceed the pixel count.
    """
    image_pairs = list(image_pairs)
    if not image_pairs:
        raise ValueError("image_pairs is empty")
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    for p in image_pairs:
        if p.visible.shape[:2] != p.infrared.shape[:2]:
            raise ShapeError(f"pair {p.id!r} is not aligned: {p.visible.shape} vs {p.infrared.shape}")
    sizes = np.array([p.visible.shape[0] * p.visible.shape[1] for p in image_pairs])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(rng_seed)
    flat = rng.integers(0, offsets[-1], size=n)
    which = np.searchsorted(offsets, flat, side="right") - 1
    local = flat - offsets[which]
    x = np.empty((n, 3))
    y = np.empty((n, 1))
    for k in np.unique(which):
        sel = which == k
        vis = image_pairs[k].visible.reshape(-1, 3)
        ir = image_pairs[k].infrared.reshape(-1, 1)
        x[sel] = vis[local[sel]]
        y[sel] = ir[local[sel]]
    return PixelPairSet(x, y)


def _build_mlp(sizes):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(torch.nn.Linear(a, b))
        layers.append(torch.nn.ReLU() if i < len(sizes) - 2 else torch.nn.Sigmoid())
    return torch.nn.Sequential(*layers)


class RGBToIRAdapter(RegressorMixin, BaseEstimator):
    """Fit a pixel-wise map from RGB in [0, 1]^3 to IR intensity in (0, 1).

    Parameters
    ----------
    hidden : tuple of int, default=(64, 64)
        Widths of the two hidden layers.
    learning_rate : float, default=1e-3
        Adam step size.
    epochs : int, default=200
    batch_size : int, default=256
    random_state : int, default=0
        Seeds weight initialisation and minibatch order.

    Attributes
    ----------
    module_ : torch.nn.Sequential
    loss_history_ : list of float
        Mean training MSE per epoch.
    """

    def __init__(self, hidden=(64, 64), learning_rate=1e-3, epochs=200, batch_size=256, random_state=0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    @property
    def layer_sizes(self):
        return (3, *self.hidden, 1)

    def fit(self, X, y):
        pairs = PixelPairSet(X, y)
        gen = torch.Generator().manual_seed(int(self.random_state))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(self.random_state))
            module = _build_mlp(self.layer_sizes)
        opt = torch.optim.Adam(module.parameters(), lr=self.learning_rate)
        xt = torch.as_tensor(pairs.inputs, dtype=torch.float32)
        yt = torch.as_tensor(pairs.targets, dtype=torch.float32)
        n = len(pairs)
        self.loss_history_ = []
        for epoch in range(int(self.epochs)):
            order = torch.randperm(n, generator=gen)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                loss = torch.mean((module(xt[idx]) - yt[idx]) ** 2)
                if not torch.isfinite(loss):
                    raise TrainingDivergenceError(f"adapter loss became non-finite at epoch {epoch}", epoch=epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            self.loss_history_.append(total / n)
        module.requires_grad_(False)
        module.eval()
        self.module_ = module
        return self

    def predict(self, X):
        check_is_fitted(self, "module_")
        X = np.asarray(X, dtype=np.float32).reshape(-1, 3)
        with torch.no_grad():
            return self.module_(torch.as_tensor(X)).numpy()[:, 0].astype(np.float64)

    def predict_ir(self, rgb_image):
        """Apply the adapter to every pixel of an H x W x 3 image -> H x W x 1."""
        rgb = check_image(rgb_image, channels=3, name="rgb_image")
        h, w, _ = rgb.shape
        return self.predict(rgb.reshape(-1, 3)).reshape(h, w, 1)

    def torch_module(self, dtype=torch.float32):
        """Frozen copy of the network in ``dtype`` for use inside autograd graphs."""
        check_is_fitted(self, "module_")
        cache = self.__dict__.setdefault("_module_cache", {})
        if dtype not in cache:
            mod = _build_mlp(self.layer_sizes).to(dtype)
            mod.load_state_dict({k: v.to(dtype) for k, v in self.module_.state_dict().items()})
            mod.requires_grad_(False)
            cache[dtype] = mod
        return cache[dtype]

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_module_cache", None)
        return state


def predict_ir_torch(adapter, rgb):
    """Differentiable per-pixel map of a ``... x 3`` tensor to ``... x 1``.

    Exact reverse-mode derivatives come from torch autograd; the adapter
    weights stay frozen.
    """
    if rgb.shape[-1] != 3:
        raise ShapeError(f"expected trailing RGB axis of size 3, got shape {tuple(rgb.shape)}")
    return adapter.torch_module(rgb.dtype)(rgb)


def train_adapter(pairs, epochs=200, lr=1e-3, rng_seed=0, batch_size=256):
    """Fit an adapter on a :class:`PixelPairSet`; returns ``(adapter, loss_history)``."""
    model = RGBToIRAdapter(learning_rate=lr, epochs=epochs, batch_size=batch_size, random_state=rng_seed)
    model.fit(pairs.inputs, pairs.targets)
    return model, list(model.loss_history_)


def save_adapter(model, path):
    check_is_fitted(model, "module_")
    arrays = {
        "version": np.array(ADAPTER_FORMAT_VERSION),
        "layer_sizes": np.array(model.layer_sizes, dtype=np.int64),
        "hyperparams": np.array([model.learning_rate, model.epochs, model.batch_size, model.random_state],
                                dtype=np.float64),
    }
    linears = [m for m in model.module_ if isinstance(m, torch.nn.Linear)]
    for i, lin in enumerate(linears):
        arrays[f"W{i}"] = np.ascontiguousarray(lin.weight.detach().numpy())
        arrays[f"b{i}"] = np.ascontiguousarray(lin.bias.detach().numpy())
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_adapter(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"adapter file not found: {path}")
    try:
        data = np.load(path, allow_pickle=False)
        version = int(data["version"])
        sizes = tuple(int(s) for s in data["layer_sizes"])
        hyper = data["hyperparams"]
    except (KeyError, ValueError, OSError) as exc:
        raise FormatError(f"{path}: not a valid adapter file ({exc})") from exc
    if version != ADAPTER_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported adapter format version {version}")
    if len(sizes) != 4 or sizes[0] != 3 or sizes[-1] != 1:
        raise FormatError(f"{path}: layer sizes {sizes} do not describe a 3-layer RGB->IR perceptron")
    model = RGBToIRAdapter(hidden=sizes[1:-1], learning_rate=float(hyper[0]), epochs=int(hyper[1]),
                           batch_size=int(hyper[2]), random_state=int(hyper[3]))
    module = _build_mlp(sizes)
    state = {}
    for i in range(3):
        try:
            w, b = data[f"W{i}"], data[f"b{i}"]
        except KeyError as exc:
            raise FormatError(f"{path}: missing weights for layer {i}") from exc
        if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
            raise FormatError(f"{path}: layer {i} weights have shape {w.shape}, header says "
                              f"{(sizes[i + 1], sizes[i])}")
        state[f"{2 * i}.weight"] = torch.from_numpy(w.copy())
        state[f"{2 * i}.bias"] = torch.from_numpy(b.copy())
    module.load_state_dict(state)
    module.requires_grad_(False)
    module.eval()
    model.module_ = module
    model.loss_history_ = []
    return model
