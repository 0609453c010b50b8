"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
import numpy as np

from .errors import ParameterDomainError, ShapeError


def check_image(image, channels=None, name="image", dtype=np.float64):
    """Return ``image`` as an H x W x C float array with values in [0, 1].

    2-D input is promoted to a single channel. ``channels`` may be an int or a
    tuple of allowed channel counts.
    """
    arr = np.asarray(image, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be H x W x C, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} is empty: shape {arr.shape}")
    if channels is not None:
        allowed = (channels,) if isinstance(channels, int) else tuple(channels)
        if arr.shape[2] not in allowed:
            raise ShapeError(f"{name} must have {allowed} channels, got {arr.shape[2]}")
    if not np.all(np.isfinite(arr)):
        raise ParameterDomainError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ParameterDomainError(f"{name} values must lie in [0, 1]")
    return arr


def check_box(box, name="box"):
    """Validate a pixel box ``(x1, y1, x2, y2)`` with positive width and height."""
    b = tuple(float(v) for v in box)
    if len(b) != 4:
        raise ShapeError(f"{name} must have 4 coordinates, got {len(b)}")
    x1, y1, x2, y2 = b
    if not (x2 > x1 and y2 > y1):
        raise ParameterDomainError(f"{name} is degenerate: {b}")
    return b


def check_unit_interval(value, name):
    v = float(value)
    if not 0.0 <= v <= 1.0:
        raise ParameterDomainError(f"{name} must lie in [0, 1], got {v}")
    return v


def check_positive(value, name, strict=True):
    v = float(value)
    if strict and not v > 0:
        raise ParameterDomainError(f"{name} must be > 0, got {v}")
    if not strict and not v >= 0:
        raise ParameterDomainError(f"{name} must be >= 0, got {v}")
    return v
