import math

import pytest
import torch

from eyeshift.config import LossWeights
from eyeshift.errors import GeometryError
from eyeshift import losses
from eyeshift.imagecore import hflip


def half(n=4):
    return torch.full((n,), 0.5)


def test_l1_mean_reduction():
    a = torch.zeros(2, 3, 4, 4)
    b = torch.full((2, 3, 4, 4), 0.5)
    assert losses.l1(a, b).item() == pytest.approx(0.5)
    with pytest.raises(GeometryError):
        losses.l1(a, b[:1])


def test_discriminator_objectives_at_chance():
    assert losses.loss_adv_x_d(half(), half(), half()).item() == pytest.approx(3 * math.log(0.5), abs=1e-3)
    assert losses.loss_adv_x_d(half(), half()).item() == pytest.approx(-1.386, abs=1e-3)
    assert losses.loss_adv_y_d(half(), half()).item() == pytest.approx(-1.386, abs=1e-3)
    assert losses.loss_adv_h_d(half(), half(), half(), half()).item() == pytest.approx(-2.773, abs=1e-3)


def test_discriminator_objective_is_finite_at_saturation():
    ones, zeros = torch.ones(4), torch.zeros(4)
    worst = losses.loss_adv_y_d(zeros, ones)
    assert torch.isfinite(worst)
    assert worst.item() < -30
    assert losses.loss_adv_y_d(ones, zeros).item() == pytest.approx(0.0, abs=1e-5)


def test_generator_adversarial_terms():
    assert losses.loss_adv_x_g(half()).item() == pytest.approx(math.log(2), abs=1e-5)
    assert losses.loss_adv_y_g(torch.ones(4)).item() == pytest.approx(0.0, abs=1e-5)
    assert losses.loss_adv_h_g(half(), half()).item() == pytest.approx(2 * math.log(2), abs=1e-5)
    assert losses.loss_adv_h_g(d_fake_y=half()).item() == pytest.approx(math.log(2), abs=1e-5)
    with pytest.raises(ValueError):
        losses.loss_adv_h_g()


def test_loss_pre_identity_on_mirrored_pair():
    left = torch.rand(2, 3, 4, 8) * 2 - 1
    assert losses.loss_pre(left, hflip(left), lambda x: x).item() == pytest.approx(0.0)


def test_loss_pre_zero_autoencoder():
    left = torch.full((2, 3, 4, 8), 0.5)
    right = torch.full((2, 3, 4, 8), -0.25)
    value = losses.loss_pre(left, right, torch.zeros_like)
    assert value.item() == pytest.approx(2 * 0.5 + 2 * 0.25)


def test_loss_pre_shape_mismatch():
    with pytest.raises(GeometryError):
        losses.loss_pre(torch.zeros(1, 3, 4, 8), torch.zeros(1, 3, 4, 6), lambda x: x)


def test_loss_rec_with_and_without_high_resolution_term():
    x = torch.zeros(1, 3, 8, 8)
    x_tilde = torch.full((1, 3, 8, 8), 0.2)
    assert losses.loss_rec(x, x_tilde).item() == pytest.approx(0.2)
    eye, eye_hat = torch.zeros(1, 3, 4, 8), torch.full((1, 3, 4, 8), 0.3)
    assert losses.loss_rec_y(x, x_tilde, eye, eye_hat).item() == pytest.approx(0.5)
    assert losses.loss_rec_x(x, x).item() == 0.0


def test_loss_fp_optional_synthesized_term():
    c = torch.zeros(2, 16)
    assert losses.loss_fp(c, torch.ones(2, 16)).item() == pytest.approx(1.0)
    assert losses.loss_fp(c, c, c, torch.full((2, 16), 2.0)).item() == pytest.approx(2.0)


def test_totals_with_unit_terms():
    weights = LossWeights()
    one = torch.tensor(1.0)
    gx = losses.total_g_x({'adv_x': one, 'adv_h_x': one, 'rec_x': one}, weights)
    assert gx.item() == pytest.approx(3.0)
    terms_y = {k: one for k in ('adv_y', 'adv_h_y', 'adv_yx', 'rec_y', 'rec_yx', 'fp')}
    assert losses.total_g_y(terms_y, weights).item() == pytest.approx(5.1)


def test_totals_skip_missing_terms():
    weights = LossWeights(lambda3=2.0)
    one = torch.tensor(1.0)
    assert losses.total_g_y({'adv_y': one, 'rec_y': one}, weights).item() == pytest.approx(3.0)
    assert losses.total_g_x({}, weights) == 0.0


def test_weights_zero_out_terms():
    weights = LossWeights(lambda1=0.0)
    assert losses.total_g_x({'rec_x': torch.tensor(7.0)}, weights).item() == 0.0
