"""Single-level Laplacian pyramid and the non-parametric half of coarse-to-fine reconstruction."""

from collections import namedtuple

import torch
import torch.nn.functional as F

from eyeshift.errors import GeometryError, ModelError
from eyeshift.imagecore import crop_regions, composite, zero_regions, EyeCrops

LaplacianDecomp = namedtuple('LaplacianDecomp', ['low', 'residual'])


def _as_batch(x):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise GeometryError('expected a (C, H, W) or (N, C, H, W) tensor, got shape {}'.format(tuple(x.shape)))


def downsample2x(x_h):
    """Mean of every 2x2 block."""
    h, w = x_h.shape[-2:]
    if h % 2 or w % 2:
        raise GeometryError('cannot halve an image of size {}x{}'.format(h, w))
    x, squeeze = _as_batch(x_h)
    out = F.avg_pool2d(x, kernel_size=2, stride=2)
    return out.squeeze(0) if squeeze else out


def upsample2x(x):
    """Bilinear 2x upsampling with half-pixel centers; edges replicate, constants stay constant."""
    x, squeeze = _as_batch(x)
    h, w = x.shape[-2:]
    out = F.interpolate(x, size=(2 * h, 2 * w), mode='bilinear', align_corners=False)
    return out.squeeze(0) if squeeze else out


def laplacian_residual(x_h):
    low = downsample2x(x_h)
    return LaplacianDecomp(low, x_h - upsample2x(low))


def reconstruct_highres(x_tilde, residual, masks_h):
    """u(x_tilde) plus the residual with its eye rectangles zeroed."""
    if tuple(residual.shape[-2:]) != (2 * x_tilde.shape[-2], 2 * x_tilde.shape[-1]):
        raise GeometryError('low image {} is not half the size of residual {}'.format(
            tuple(x_tilde.shape[-2:]), tuple(residual.shape[-2:])))
    return upsample2x(x_tilde) + zero_regions(residual, masks_h)


def refine_local(x_tilde_h, masks_h, refiner):
    """Add *refiner*'s residual to both eye crops and paste them back.

    *refiner* maps a batch of crops to a residual of the same shape; both eyes are
    passed together, left eyes first. Refined crops are clamped to [-1, 1].
    """
    crops = crop_regions(x_tilde_h, masks_h)
    unbatched = x_tilde_h.dim() == 3
    left, right = (crops.left.unsqueeze(0), crops.right.unsqueeze(0)) if unbatched else crops
    stacked = torch.cat([left, right], dim=0)
    residual = refiner(stacked)
    if residual.shape != stacked.shape:
        raise ModelError('refiner returned {} for crops of shape {}'.format(
            tuple(residual.shape), tuple(stacked.shape)))
    refined = torch.clamp(stacked + residual, -1.0, 1.0)
    n = left.shape[0]
    patches = EyeCrops(refined[:n], refined[n:])
    if unbatched:
        patches = EyeCrops(patches.left[0], patches.right[0])
    return composite(x_tilde_h, patches, masks_h)
