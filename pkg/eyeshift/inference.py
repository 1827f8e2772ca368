"""High-resolution gaze correction and gaze animation.

Both pipelines generate at low resolution, lift the result back with the Laplacian
residual of the input, refine the eye crops and finally paste only the eye crops
into the original portrait. Everything outside the eye rectangles is therefore the
input, bit for bit.

The ``*_batch`` functions are differentiable and leave module modes alone; the
training loop builds on them. ``correct_gaze`` and ``animate`` are the user-facing
single-portrait entry points and run the networks in eval mode without autograd.
"""

import logging
import math
import os
from collections import namedtuple
from dataclasses import dataclass

import torch

from data.utils import write_gif, write_png, write_strip
from eyeshift.errors import ConfigError
from eyeshift.imagecore import EyeCrops, apply_mask, composite, crop_regions
from eyeshift.pyramid import downsample2x, laplacian_residual, reconstruct_highres, refine_local, upsample2x
from eyeshift.pytorch_utils import evaluating

logger = logging.getLogger(__name__)

LAYOUTS = ('frames', 'strip')

AnimationCodes = namedtuple('AnimationCodes', ['r_y', 'r_yx', 'c_y', 'low', 'masks_low'])


@dataclass(frozen=True)
class PortraitSample(object):
    image: torch.Tensor      # (3, H, W) in [-1, 1] at the profile's high resolution
    masks: object            # MaskPair in high-resolution pixels
    gaze: tuple = None


@dataclass(frozen=True)
class AnimationSpec(object):
    alphas: tuple
    layout: str = 'frames'

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        if not alphas:
            raise ConfigError('an animation needs at least one alpha')
        if not all(math.isfinite(a) for a in alphas):
            raise ConfigError('alphas must be finite, got {}'.format(alphas))
        if self.layout not in LAYOUTS:
            raise ConfigError('unknown layout {!r}; choose from {}'.format(self.layout, LAYOUTS))
        object.__setattr__(self, 'alphas', alphas)


def _device_of(models):
    return next(models.parameters()).device


def _warn_untrained(models):
    if models.global_step == 0:
        logger.warning('running inference with an untrained model set (global step 0)')


def gcm_forward(models, images_h, masks_h):
    """Low-resolution correction pass: returns (x, masks_low, x_tilde)."""
    masks_l = models.profile.masks_low(masks_h)
    low = downsample2x(images_h)
    c_codes = models.content_codes(crop_regions(low, masks_l))
    x_tilde = models.inpaint_x(apply_mask(low, masks_l), masks_l, c_codes)
    return low, masks_l, x_tilde


def gam_forward(models, low, masks_l, r_codes, c_codes):
    return models.inpaint_y(apply_mask(low, masks_l), masks_l, r_codes, c_codes)


def highres_output(models, generated_low, images_h, masks_h):
    """Coarse-to-fine lift of a low-resolution generator output to the input's resolution.

    The residual of *images_h* is reinjected outside the eyes and the eye crops are
    refined by ``g_h``. Without the coarse-to-fine module the output is a plain
    bilinear upsample.
    """
    if not models.flags.use_cfm:
        return upsample2x(generated_low)
    residual = laplacian_residual(images_h).residual
    coarse = reconstruct_highres(generated_low, residual, masks_h)
    return refine_local(coarse, masks_h, models.g_h)


def paste_eyes(original_h, generated_h, masks_h):
    """Eye crops of *generated_h*, clamped to [-1, 1], pasted into *original_h*."""
    crops = crop_regions(generated_h, masks_h)
    patches = EyeCrops(torch.clamp(crops.left, -1.0, 1.0), torch.clamp(crops.right, -1.0, 1.0))
    return composite(original_h, patches, masks_h)


def correct_batch(models, images_h, masks_h, full_frame=False):
    """Gaze-corrected high-resolution batch. With *full_frame* the whole coarse-to-fine frame is returned."""
    _, _, x_tilde = gcm_forward(models, images_h, masks_h)
    generated_h = highres_output(models, x_tilde, images_h, masks_h)
    if full_frame:
        return torch.clamp(generated_h, -1.0, 1.0)
    return paste_eyes(images_h, generated_h, masks_h)


def correct_gaze(sample, models, full_frame=False):
    """Redirect the gaze of one portrait towards the camera. Returns a (3, H, W) CPU tensor."""
    _warn_untrained(models)
    image = sample.image.to(_device_of(models)).unsqueeze(0)
    with evaluating(models):
        out = correct_batch(models, image, [sample.masks], full_frame=full_frame)
    return out[0].cpu()


def interpolate_r(r_a, r_b, alpha):
    return (1 - alpha) * r_a + alpha * r_b


def animation_codes(models, images_h, masks_h):
    """Angle codes of the input and of its gaze-corrected version, plus the input's content codes."""
    low = downsample2x(images_h)
    masks_l = models.profile.masks_low(masks_h)
    corrected_low = downsample2x(correct_batch(models, images_h, masks_h))
    crops_y = crop_regions(low, masks_l)
    return AnimationCodes(r_y=models.angle_codes(crops_y),
                          r_yx=models.angle_codes(crop_regions(corrected_low, masks_l)),
                          c_y=models.content_codes(crops_y),
                          low=low,
                          masks_low=masks_l)


def animate_batch(models, images_h, masks_h, alphas):
    """One composited high-resolution batch per alpha, in order; also returns the codes used."""
    codes = animation_codes(models, images_h, masks_h)
    frames = []
    for alpha in alphas:
        r = interpolate_r(codes.r_y, codes.r_yx, alpha)
        y_tilde = gam_forward(models, codes.low, codes.masks_low, r, codes.c_y)
        frames.append(paste_eyes(images_h, highres_output(models, y_tilde, images_h, masks_h), masks_h))
    return frames, codes


def animate(sample, spec, models):
    """Frames of a gaze animation of one portrait, one (3, H, W) CPU tensor per alpha of *spec*."""
    _warn_untrained(models)
    image = sample.image.to(_device_of(models)).unsqueeze(0)
    with evaluating(models):
        frames, _ = animate_batch(models, image, [sample.masks], spec.alphas)
    return [f[0].cpu() for f in frames]


def format_alpha(alpha):
    return '{:g}'.format(alpha)


def write_frames(frames, spec, out_dir, stem, gif=False, duration=0.1):
    """Write *frames* following the layout of *spec*; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if spec.layout == 'frames':
        for alpha, frame in zip(spec.alphas, frames):
            path = os.path.join(out_dir, '{}_alpha{}.png'.format(stem, format_alpha(alpha)))
            write_png(path, frame)
            paths.append(path)
    else:
        path = os.path.join(out_dir, '{}_strip.png'.format(stem))
        write_strip(path, frames)
        paths.append(path)
    if gif:
        path = os.path.join(out_dir, '{}.gif'.format(stem))
        write_gif(path, frames, duration=duration)
        paths.append(path)
    return paths
