"""Objective terms and their weighted totals.

Reconstruction terms are mean-reduced L1. Discriminator objectives are returned in
their ascent form (log-likelihoods, <= 0); the trainer minimizes their negation.
Generator adversarial terms use the non-saturating -log D(fake) form.
"""

import torch

from eyeshift.errors import GeometryError
from eyeshift.imagecore import hflip

PROB_EPS = 1e-7


def _log(p):
    return torch.log(torch.clamp(p, PROB_EPS, 1.0 - PROB_EPS))


def _log1m(p):
    return torch.log(torch.clamp(1.0 - p, PROB_EPS, 1.0 - PROB_EPS))


def l1(a, b):
    if a.shape != b.shape:
        raise GeometryError('L1 between shapes {} and {}'.format(tuple(a.shape), tuple(b.shape)))
    return torch.mean(torch.abs(a - b))


def loss_pre(y_left, y_right, g_pre):
    """Mirror autoencoder objective: each eye reconstructs itself and its mirrored partner."""
    if y_left.shape != y_right.shape:
        raise GeometryError('eye crops differ in shape: {} / {}'.format(tuple(y_left.shape), tuple(y_right.shape)))
    return (l1(y_left, g_pre(y_left)) + l1(y_left, g_pre(hflip(y_right))) +
            l1(y_right, g_pre(y_right)) + l1(y_right, g_pre(hflip(y_left))))


def loss_rec(x, x_tilde, x_h_eye=None, x_hat_h_eye=None):
    """Full low-resolution image term plus the high-resolution eye-crop term (when given)."""
    loss = l1(x, x_tilde)
    if x_h_eye is not None:
        loss = loss + l1(x_h_eye, x_hat_h_eye)
    return loss


loss_rec_x = loss_rec
loss_rec_y = loss_rec
loss_rec_yx = loss_rec


def loss_adv_x_d(d_real_x, d_fake_x, d_fake_yx=None):
    """D_x objective: log D(x) + log(1 - D(x_tilde)) + log(1 - D(y_tilde^x))."""
    objective = _log(d_real_x).mean() + _log1m(d_fake_x).mean()
    if d_fake_yx is not None:
        objective = objective + _log1m(d_fake_yx).mean()
    return objective


def loss_adv_g(d_fake):
    """Non-saturating generator term -log D(fake)."""
    return -_log(d_fake).mean()


def loss_adv_x_g(d_fake_x):
    return loss_adv_g(d_fake_x)


def loss_adv_y_d(d_real_y, d_fake_y):
    return _log(d_real_y).mean() + _log1m(d_fake_y).mean()


def loss_adv_y_g(d_fake_y):
    return loss_adv_g(d_fake_y)


def loss_adv_h_d(d_real_x, d_fake_x, d_real_y, d_fake_y):
    """D_h objective over real/refined crops of both domains."""
    return (_log(d_real_x).mean() + _log1m(d_fake_x).mean() +
            _log(d_real_y).mean() + _log1m(d_fake_y).mean())


def loss_adv_h_g(d_fake_x=None, d_fake_y=None):
    """Generator side of the refiner critic; either fake may be omitted."""
    terms = [loss_adv_g(d) for d in (d_fake_x, d_fake_y) if d is not None]
    if not terms:
        raise ValueError('loss_adv_h_g needs at least one fake batch')
    return sum(terms)


def loss_fp(c_y, c_of_y_tilde, c_yx=None, c_of_yx_tilde=None):
    """Content-code reconstruction; the second term is skipped when the synthesized pair is absent."""
    loss = l1(c_y, c_of_y_tilde)
    if c_yx is not None:
        loss = loss + l1(c_yx, c_of_yx_tilde)
    return loss


def total_g_x(terms, weights):
    """adv_x + adv_h + lambda1 * rec_x; missing terms count as 0."""
    return (terms.get('adv_x', 0.0) + terms.get('adv_h_x', 0.0) +
            weights.lambda1 * terms.get('rec_x', 0.0))


def total_g_y(terms, weights):
    """adv_y + adv_h + lambda2 * adv_yx + lambda3 * rec_y + lambda4 * rec_yx + lambda5 * fp."""
    return (terms.get('adv_y', 0.0) + terms.get('adv_h_y', 0.0) +
            weights.lambda2 * terms.get('adv_yx', 0.0) +
            weights.lambda3 * terms.get('rec_y', 0.0) +
            weights.lambda4 * terms.get('rec_yx', 0.0) +
            weights.lambda5 * terms.get('fp', 0.0))
