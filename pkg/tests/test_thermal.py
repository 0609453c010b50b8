import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualpatch.errors import ParameterDomainError, ShapeError
from dualpatch.thermal import (SceneConditions, ThermalCameraConfig, ThermalParams, ThermalRenderer,
                               color_to_absorptivity, render_absorptivity_ir, render_synthetic_ir, surface_temperature,
                               temperature_to_intensity)

SIGMA = 5.670374419e-8


def direct(alpha, G=1000.0, eps=0.95, T=300.0):
    return (alpha * G / (eps * SIGMA) + T ** 4) ** 0.25


def test_equilibrium_matches_direct_evaluation():
    got = surface_temperature(ThermalParams(1000.0, 0.95, 300.0, alpha=0.9))
    assert got == pytest.approx(direct(0.9), rel=1e-6)
    assert got == pytest.approx(396.867, abs=1e-3)


def test_zero_absorptivity_returns_ambient_exactly():
    assert surface_temperature(ThermalParams(1000.0, 0.95, 300.0, alpha=0.0)) == 300.0
    assert surface_temperature(ThermalParams(1000.0, 0.95, 287.5, alpha=0.0)) == 287.5


def test_no_sun_returns_ambient():
    assert surface_temperature(ThermalParams(0.0, 0.95, 300.0, alpha=0.7)) == pytest.approx(300.0, rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_temperature_monotone_in_absorptivity(a, b):
    lo, hi = sorted((a, b))
    t_lo = surface_temperature(ThermalParams(alpha=lo))
    t_hi = surface_temperature(ThermalParams(alpha=hi))
    assert t_lo <= t_hi


def test_absorptivity_of_reference_colors():
    assert color_to_absorptivity([0, 0, 0]) == pytest.approx(0.9)
    assert color_to_absorptivity([1, 1, 1]) == pytest.approx(0.2)
    assert color_to_absorptivity([1, 0, 0]) == pytest.approx(0.5)
    # red reflects more sunlight than green or blue under this weighting
    assert color_to_absorptivity([0, 1, 0]) > color_to_absorptivity([1, 0, 0])


def test_camera_ramp_and_clamping():
    cam = ThermalCameraConfig(290.0, 400.0)
    assert temperature_to_intensity(290.0, cam) == 0.0
    assert temperature_to_intensity(400.0, cam) == 1.0
    assert temperature_to_intensity(345.0, cam) == pytest.approx(0.5)
    assert temperature_to_intensity(250.0, cam) == 0.0
    assert temperature_to_intensity(500.0, cam) == 1.0


def test_render_black_hotter_than_white():
    img = np.zeros((4, 8, 3))
    img[:, 4:] = 1.0
    ir = render_synthetic_ir(img)
    assert ir.shape == (4, 8, 1)
    assert ir[0, 0, 0] > ir[0, 7, 0]
    expected = (direct(0.9) - 290.0) / 110.0
    assert ir[0, 0, 0] == pytest.approx(expected, rel=1e-12)


def test_render_diffusion_preserves_mean_of_constant():
    img = np.full((16, 16, 3), 0.3)
    a = render_synthetic_ir(img)
    b = render_synthetic_ir(img, camera=ThermalCameraConfig(diffusion_sigma=2.0))
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("kwargs", [dict(emissivity_eps=0.0), dict(emissivity_eps=1.5), dict(ambient_T=-1.0),
                                    dict(irradiance_G=-5.0)])
def test_scene_validation(kwargs):
    with pytest.raises(ParameterDomainError):
        SceneConditions(**kwargs)


def test_params_and_camera_validation():
    with pytest.raises(ParameterDomainError):
        ThermalParams(alpha=1.2)
    with pytest.raises(ParameterDomainError):
        ThermalCameraConfig(t_min=400.0, t_max=300.0)


def test_render_rejects_bad_input():
    with pytest.raises(ShapeError):
        render_synthetic_ir(np.zeros((4, 4, 2)))
    with pytest.raises(ParameterDomainError):
        render_synthetic_ir(np.full((4, 4, 3), 1.5))


def test_renderer_estimator_batches():
    r = ThermalRenderer(ambient_T=295.0)
    assert r.get_params()["ambient_T"] == 295.0
    batch = np.random.default_rng(0).uniform(size=(3, 5, 5, 3))
    out = r.fit().transform(batch)
    assert out.shape == (3, 5, 5, 1)
    np.testing.assert_array_equal(out[1], r.transform(batch[1]))
    assert math.isfinite(float(out.sum()))


def test_absorptivity_render_matches_color_render():
    rgb = np.random.default_rng(1).uniform(0, 1, (6, 7, 3))
    np.testing.assert_allclose(render_absorptivity_ir(color_to_absorptivity(rgb)), render_synthetic_ir(rgb))
    with pytest.raises(ParameterDomainError):
        render_absorptivity_ir(np.full((2, 2), 1.5))
