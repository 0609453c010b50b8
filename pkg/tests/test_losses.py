import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualpatch.errors import ParameterDomainError, ShapeError
from dualpatch.losses import LossWeights, adv_loss, ap_loss, tv_loss


def test_tv_of_constant_is_zero():
    assert float(tv_loss(np.full((5, 7, 3), 0.37))) == 0.0


def test_tv_two_by_two_oracle():
    # only the two left pixels have a horizontal neighbour that differs by 1
    assert float(tv_loss(np.array([[0.0, 1.0], [0.0, 1.0]]))) == 2.0


def test_tv_diagonal_uses_isotropic_norm():
    p = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert float(tv_loss(p)) == pytest.approx(np.sqrt(2.0), abs=1e-15)


def test_tv_mean_reduction_divides_by_element_count():
    p = np.random.default_rng(0).uniform(size=(6, 6, 3))
    assert float(tv_loss(p, "mean")) == pytest.approx(float(tv_loss(p)) / p.size, rel=1e-12)


def test_tv_gradient_finite_on_flat_regions():
    p = torch.zeros(4, 4, 3, dtype=torch.float64, requires_grad=True)
    tv_loss(p).backward()
    assert torch.isfinite(p.grad).all()
    assert float(p.grad.abs().sum()) == 0.0


def test_tv_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        tv_loss(np.zeros((2, 2, 2, 2)))
    with pytest.raises(ParameterDomainError):
        tv_loss(np.zeros((2, 2)), reduction="max")


def test_ap_oracle_and_empty():
    assert float(ap_loss([0.8, 0.6])) == 0.7
    assert float(ap_loss([])) == 0.0
    with pytest.raises(ParameterDomainError):
        ap_loss([0.2, 1.3])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0.0, 1.0)))
def test_ap_is_mean(scores):
    assert float(ap_loss(scores)) == pytest.approx(float(np.mean(scores)), rel=1e-12, abs=1e-15)


def test_adv_loss_linear_in_weights():
    rng = np.random.default_rng(3)
    p = rng.uniform(size=(8, 8, 3))
    sv, si = rng.uniform(size=5), rng.uniform(size=4)
    tv = float(tv_loss(p))
    ap = float(ap_loss(np.concatenate([sv, si])))
    for g, d in [(0.0, 1.0), (2.5, 1.0), (0.3, 7.0), (1.0, 0.0)]:
        got = float(adv_loss(p, sv, si, LossWeights(g, d)))
        assert abs(got - (g * tv + d * ap)) <= 1e-12 * max(1.0, abs(got))


def test_adv_loss_pools_both_modalities():
    p = np.zeros((2, 2, 3))
    assert float(adv_loss(p, [1.0], [0.0, 0.0, 0.5], LossWeights(0.0, 1.0))) == pytest.approx(0.375)
    assert float(adv_loss(p, [0.4], [], LossWeights(0.0, 1.0))) == pytest.approx(0.4)


def test_weights_validation():
    with pytest.raises(ParameterDomainError):
        LossWeights(gamma=-1.0)
    with pytest.raises(ParameterDomainError):
        LossWeights(tv_reduction="median")
