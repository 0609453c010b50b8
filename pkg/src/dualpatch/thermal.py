"""Color-dependent solar heating and synthetic infrared rendering.

A painted surface in sunlight settles at the radiative-equilibrium temperature

    T = (alpha * G / (eps * sigma) + T_ambient**4) ** (1/4)

where ``alpha`` is the solar absorptivity of its color. Darker colors absorb
more and therefore appear hotter (brighter) to a thermal camera.
"""
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ParameterDomainError, ShapeError
from .validation import check_image

STEFAN_BOLTZMANN = 5.670374419e-8  # W / (m^2 K^4)

# absorptivity = ABSORPTIVITY_BLACK - RGB_WEIGHTS . rgb
ABSORPTIVITY_BLACK = 0.9
RGB_WEIGHTS = np.array([0.40, 0.15, 0.15])


@dataclass(frozen=True)
class SceneConditions:
    """Illumination and material constants shared by every pixel of a scene."""

    irradiance_G: float = 1000.0
    emissivity_eps: float = 0.95
    ambient_T: float = 300.0

    def __post_init__(self):
        if not np.isfinite(self.irradiance_G) or self.irradiance_G < 0:
            raise ParameterDomainError(f"irradiance_G must be >= 0, got {self.irradiance_G}")
        if not 0.0 < self.emissivity_eps <= 1.0:
            raise ParameterDomainError(f"emissivity_eps must lie in (0, 1], got {self.emissivity_eps}")
        if not self.ambient_T > 0:
            raise ParameterDomainError(f"ambient_T must be > 0 K, got {self.ambient_T}")

    @property
    def sigma(self):
        return STEFAN_BOLTZMANN


@dataclass(frozen=True)
class ThermalParams(SceneConditions):
    """Scene conditions plus the absorptivity of one surface."""

    alpha: float = 0.5

    def __post_init__(self):
        super().__post_init__()
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterDomainError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def scene(self):
        return SceneConditions(self.irradiance_G, self.emissivity_eps, self.ambient_T)


@dataclass(frozen=True)
class ThermalCameraConfig:
    """Linear radiometric ramp of a thermal camera.

    ``t_min`` maps to intensity 0 and ``t_max`` to intensity 1; values outside
    are clamped. ``diffusion_sigma`` is a Gaussian blur in pixels (0 disables).
    """

    t_min: float = 290.0
    t_max: float = 400.0
    diffusion_sigma: float = 0.0

    def __post_init__(self):
        if not self.t_max > self.t_min:
            raise ParameterDomainError(f"t_max ({self.t_max}) must exceed t_min ({self.t_min})")
        if not self.diffusion_sigma >= 0:
            raise ParameterDomainError(f"diffusion_sigma must be >= 0, got {self.diffusion_sigma}")


def _equilibrium_temperature(alpha, scene):
    alpha = np.asarray(alpha, dtype=np.float64)
    absorbed = alpha * scene.irradiance_G / (scene.emissivity_eps * STEFAN_BOLTZMANN)
    return (absorbed + scene.ambient_T ** 4) ** 0.25


def surface_temperature(params):
    """Equilibrium surface temperature in Kelvin for a :class:`ThermalParams`."""
    if not isinstance(params, ThermalParams):
        raise TypeError("params must be a ThermalParams instance")
    if params.alpha == 0.0:
        return float(params.ambient_T)
    return float(_equilibrium_temperature(params.alpha, params))


def color_to_absorptivity(rgb):
    """Affine map from an RGB color (or an ``... x 3`` array) to solar absorptivity.

    Black gives 0.9, white 0.2, and green absorbs more than red.
    """
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.shape[-1:] != (3,):
        raise ParameterDomainError(f"expected trailing RGB axis of size 3, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ParameterDomainError("RGB channels must lie in [0, 1]")
    alpha = ABSORPTIVITY_BLACK - arr @ RGB_WEIGHTS
    return float(alpha) if alpha.ndim == 0 else alpha


def temperature_to_intensity(temperature, camera):
    t = np.asarray(temperature, dtype=np.float64)
    return np.clip((t - camera.t_min) / (camera.t_max - camera.t_min), 0.0, 1.0)


def render_synthetic_ir(rgb_image, scene=None, camera=None):
    """Render the infrared counterpart (H x W x 1, in [0, 1]) of an RGB image.

    Each pixel goes through absorptivity -> equilibrium temperature -> camera
    ramp. When ``camera.diffusion_sigma > 0`` a Gaussian blur is applied last.
    """
    scene = SceneConditions() if scene is None else scene
    camera = ThermalCameraConfig() if camera is None else camera
    if isinstance(scene, ThermalParams):
        scene = scene.scene
    rgb = check_image(rgb_image, channels=3, name="rgb_image")
    return render_absorptivity_ir(color_to_absorptivity(rgb), scene, camera)


def render_absorptivity_ir(alpha_map, scene=None, camera=None):
    """Infrared image (H x W x 1) from a per-pixel absorptivity map (H x W)."""
    scene = SceneConditions() if scene is None else scene
    camera = ThermalCameraConfig() if camera is None else camera
    alpha = np.asarray(alpha_map, dtype=np.float64)
    if alpha.ndim != 2:
        raise ShapeError(f"alpha_map must be H x W, got shape {alpha.shape}")
    if not np.all(np.isfinite(alpha)) or alpha.min() < 0.0 or alpha.max() > 1.0:
        raise ParameterDomainError("absorptivity values must lie in [0, 1]")
    ir = temperature_to_intensity(_equilibrium_temperature(alpha, scene), camera)
    if camera.diffusion_sigma > 0:
        ir = gaussian_filter(ir, sigma=camera.diffusion_sigma, mode="nearest")
    return ir[:, :, None]


class ThermalRenderer(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapping :func:`render_synthetic_ir`.

    Accepts a single H x W x 3 image or a batch N x H x W x 3.
    """

    def __init__(self, irradiance_G=1000.0, emissivity_eps=0.95, ambient_T=300.0,
                 t_min=290.0, t_max=400.0, diffusion_sigma=0.0):
        self.irradiance_G = irradiance_G
        self.emissivity_eps = emissivity_eps
        self.ambient_T = ambient_T
        self.t_min = t_min
        self.t_max = t_max
        self.diffusion_sigma = diffusion_sigma

    def fit(self, X=None, y=None):
        self.scene_ = SceneConditions(self.irradiance_G, self.emissivity_eps, self.ambient_T)
        self.camera_ = ThermalCameraConfig(self.t_min, self.t_max, self.diffusion_sigma)
        return self

    def transform(self, X):
        if not hasattr(self, "scene_"):
            self.fit()
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 4:
            return np.stack([render_synthetic_ir(x, self.scene_, self.camera_) for x in X])
        return render_synthetic_ir(X, self.scene_, self.camera_)
