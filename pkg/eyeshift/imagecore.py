"""Eye-region image algebra: masking (M), cropping (M'), compositing and mirroring (F).

Images are channel-first tensors, either ``(3, H, W)`` or ``(N, 3, H, W)``, coded in
[-1, 1]. Every operation acts on the trailing two axes. ``masks`` arguments accept a
single ``MaskPair`` (applied to every image of a batch) or a sequence with one
``MaskPair`` per batch item.
"""

from collections import namedtuple
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from eyeshift.errors import GeometryError

EyeCrops = namedtuple('EyeCrops', ['left', 'right'])

# fraction of the rectangle size added on every side of the crops fed to the local refiner critic
INFLATE_FRACTION = 0.25


@dataclass(frozen=True)
class Rect(object):
    center_row: int
    center_col: int
    height: int
    width: int

    # odd remainders go to the top-left
    @property
    def top(self):
        return self.center_row - (self.height + 1) // 2

    @property
    def left(self):
        return self.center_col - (self.width + 1) // 2

    @property
    def bottom(self):
        return self.top + self.height

    @property
    def right(self):
        return self.left + self.width

    @property
    def rows(self):
        return slice(self.top, self.bottom)

    @property
    def cols(self):
        return slice(self.left, self.right)

    @property
    def size(self):
        return (self.height, self.width)

    @property
    def area(self):
        return self.height * self.width

    def fits(self, bounds):
        return (self.height >= 0 and self.width >= 0 and
                self.top >= 0 and self.left >= 0 and
                self.bottom <= bounds[0] and self.right <= bounds[1])

    def overlaps(self, other):
        if self.area == 0 or other.area == 0:
            return False
        return (self.top < other.bottom and other.top < self.bottom and
                self.left < other.right and other.left < self.right)

    def inflated(self, bounds, fraction=INFLATE_FRACTION):
        """Return (top, bottom, left, right) grown by *fraction* of the size on each side, clipped to *bounds*."""
        pad_r = int(round(fraction * self.height))
        pad_c = int(round(fraction * self.width))
        return (max(self.top - pad_r, 0), min(self.bottom + pad_r, bounds[0]),
                max(self.left - pad_c, 0), min(self.right + pad_c, bounds[1]))

    def to_dict(self):
        return {'center_row': self.center_row, 'center_col': self.center_col,
                'height': self.height, 'width': self.width}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d['center_row']), int(d['center_col']), int(d['height']), int(d['width']))


@dataclass(frozen=True)
class MaskPair(object):
    left: Rect
    right: Rect
    image_bounds: tuple

    def __post_init__(self):
        object.__setattr__(self, 'image_bounds', tuple(int(b) for b in self.image_bounds))
        for name, rect in (('left', self.left), ('right', self.right)):
            if not rect.fits(self.image_bounds):
                raise GeometryError('{} rectangle {} does not fit image bounds {}'.format(
                    name, rect, self.image_bounds))
        if self.left.overlaps(self.right):
            raise GeometryError('eye rectangles overlap: {} / {}'.format(self.left, self.right))

    def rects(self):
        return (self.left, self.right)

    @classmethod
    def empty(cls, bounds):
        """A pair of zero-area rectangles; masking with it is the identity."""
        return cls(Rect(0, 0, 0, 0), Rect(0, 0, 0, 0), bounds)

    @classmethod
    def from_centers(cls, left_center, right_center, size, bounds):
        return cls(mask_from_center(left_center, size, bounds),
                   mask_from_center(right_center, size, bounds), bounds)

    def rescaled(self, size, bounds, factor=0.5):
        """Move the pair to another resolution: centers are scaled by *factor*, sizes set to *size*."""
        def move(rect):
            return mask_from_center((int(rect.center_row * factor), int(rect.center_col * factor)),
                                    size, bounds)
        return MaskPair(move(self.left), move(self.right), bounds)

    def to_dict(self):
        return {'left': self.left.to_dict(), 'right': self.right.to_dict(),
                'image_bounds': list(self.image_bounds)}

    @classmethod
    def from_dict(cls, d):
        return cls(Rect.from_dict(d['left']), Rect.from_dict(d['right']), tuple(d['image_bounds']))


def mask_from_center(center, size, bounds):
    """Rectangle of *size* centered at *center*; raises GeometryError if it does not fit *bounds*."""
    rect = Rect(int(center[0]), int(center[1]), int(size[0]), int(size[1]))
    if not rect.fits(bounds):
        raise GeometryError('rectangle of size {} centered at {} does not fit {}'.format(
            tuple(size), tuple(center), tuple(bounds)))
    return rect


def _pairs(image, masks):
    """Yield (view, MaskPair) for every image in *image*, checking bounds."""
    if image.dim() not in (3, 4):
        raise GeometryError('expected a (C, H, W) or (N, C, H, W) tensor, got shape {}'.format(
            tuple(image.shape)))
    bounds = tuple(image.shape[-2:])
    if image.dim() == 3:
        items = [(image, masks if isinstance(masks, MaskPair) else _single(masks))]
    elif isinstance(masks, MaskPair):
        items = [(image[i], masks) for i in range(image.shape[0])]
    else:
        masks = list(masks)
        if len(masks) != image.shape[0]:
            raise GeometryError('got {} mask pairs for a batch of {}'.format(len(masks), image.shape[0]))
        items = [(image[i], m) for i, m in enumerate(masks)]
    for view, pair in items:
        if pair.image_bounds != bounds:
            raise GeometryError('masks drawn for {} applied to a {} image'.format(pair.image_bounds, bounds))
        yield view, pair


def _single(masks):
    masks = list(masks)
    if len(masks) != 1:
        raise GeometryError('an unbatched image takes exactly one mask pair')
    return masks[0]


def apply_mask(image, masks, fill=0.0):
    """M: return a copy of *image* with both eye rectangles set to *fill* (mid-gray by default)."""
    out = image.clone()
    for view, pair in _pairs(out, masks):
        for rect in pair.rects():
            view[..., rect.rows, rect.cols] = fill
    return out


def zero_regions(residual, masks):
    """Additive masking for residual images, where 0 is the neutral element."""
    return apply_mask(residual, masks, fill=0.0)


def mask_tensor(image, masks):
    """Binary map with a single channel, 1 inside the rectangles and 0 elsewhere."""
    shape = list(image.shape)
    shape[-3] = 1
    out = torch.zeros(shape, dtype=image.dtype, device=image.device)
    for view, pair in _pairs(out, masks):
        for rect in pair.rects():
            view[..., rect.rows, rect.cols] = 1.0
    return out


def crop_regions(image, masks):
    """M': extract the two eye rectangles, returned as EyeCrops of the same batch layout."""
    left, right = [], []
    for view, pair in _pairs(image, masks):
        left.append(view[..., pair.left.rows, pair.left.cols])
        right.append(view[..., pair.right.rows, pair.right.cols])
    if image.dim() == 3:
        return EyeCrops(left[0], right[0])
    try:
        return EyeCrops(torch.stack(left), torch.stack(right))
    except RuntimeError:
        raise GeometryError('eye rectangles differ in size across the batch')


def composite(base, patches, masks):
    """Paste *patches* into a copy of *base* at the mask rectangles. Differentiable in both inputs."""
    out = base.clone()
    pairs = list(_pairs(out, masks))
    for idx, (view, pair) in enumerate(pairs):
        for rect, patch in zip(pair.rects(), patches):
            if base.dim() == 4:
                patch = patch[idx]
            if tuple(patch.shape[-2:]) != rect.size:
                raise GeometryError('patch of size {} does not match rectangle {}'.format(
                    tuple(patch.shape[-2:]), rect.size))
            view[..., rect.rows, rect.cols] = patch
    return out


def hflip(image):
    """F: mirror the columns."""
    return torch.flip(image, dims=(-1,))


def inflated_crops(image, masks, size, fraction=INFLATE_FRACTION):
    """Crop each rectangle grown by *fraction* per side and resample it to *size*.

    Crops whose clipped extent already equals *size* are returned untouched; others are
    resized bilinearly. Both eyes are concatenated along the batch axis (left first).
    """
    size = tuple(size)
    out = []
    for side in (0, 1):
        crops = []
        for view, pair in _pairs(image, masks):
            top, bottom, lft, rgt = pair.rects()[side].inflated(pair.image_bounds, fraction)
            crop = view[..., top:bottom, lft:rgt]
            if tuple(crop.shape[-2:]) != size:
                crop = F.interpolate(crop.unsqueeze(0), size=size, mode='bilinear',
                                     align_corners=False).squeeze(0)
            crops.append(crop)
        out.append(torch.stack(crops))
    return torch.cat(out, dim=0)
