"""Procedural portraits with a known gaze offset, the analytic gaze oracle and the dataset writer.

Gaze offsets are (dx, dy) in high-resolution pixels: dx to the right, dy downwards.
Profiles bound them per axis in generation (low-resolution) pixels, and only offsets
that keep the iris inside the sclera are drawn.
Both eyes of a portrait share the same offset. A portrait belongs to domain X
(looking at the camera) iff its offset has norm at most 1 pixel.
"""

import logging
import math
import os
from collections import namedtuple
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndimage
import torch

from data.load_synthgaze import (DomainManifest, ManifestRecord, MANIFEST_NAME, save_manifest,
                                 held_out_count)
from data.utils import read_png, write_png
from eyeshift.errors import ConfigError, GeometryError, ValidationError
from eyeshift.imagecore import MaskPair, crop_regions
from networks import load_profile

logger = logging.getLogger(__name__)

NOISE_SIGMA = 0.01          # per-pixel noise in [-1, 1] coding
X_GAZE_RADIUS = 1.0
Y_GAZE_MIN = 2.0
SCLERA_LEVEL = 0.95
PUPIL_FRACTION = 0.45
MIN_DISC_RESPONSE = 0.2     # mean darkness under the iris-sized disc

GazeEstimate = namedtuple('GazeEstimate', ['left', 'right'])


def iris_radius_for(mask_size):
    return max(1.0, mask_size[0] * 5.0 / 32.0)


def sclera_axes(mask_size):
    """Semi-axes (rows, cols) of the sclera ellipse drawn in a socket of *mask_size*."""
    return (mask_size[0] / 2.0 - 1.0, mask_size[1] / 2.0 - 1.0)


def _render_settings(profile):
    if not profile.render:
        raise ConfigError('profile %r has no render settings' % profile.name)
    return profile.render


def gaze_limit(profile):
    """Per-axis gaze bound in render pixels; profiles state it at generation resolution."""
    render = _render_settings(profile)
    return render['gaze_limit'] * profile.image_size[0] / float(profile.low_size[0])


def iris_fits(gaze, iris_radius, mask_size):
    """True iff an iris of *iris_radius* at offset *gaze* lies inside the sclera of a *mask_size* socket."""
    a_r, a_c = sclera_axes(mask_size)
    dx, dy = gaze
    theta = np.linspace(0.0, 2 * np.pi, 72, endpoint=False)
    rim_r = dy + iris_radius * np.sin(theta)
    rim_c = dx + iris_radius * np.cos(theta)
    return not np.any((rim_r / a_r) ** 2 + (rim_c / a_c) ** 2 > 1.0)


@dataclass(frozen=True)
class FaceParams(object):
    skin_color: tuple
    hair_color: tuple
    iris_color: tuple
    background_color: tuple
    head_center: tuple
    head_axes: tuple
    socket_centers: tuple       # ((row, col), (row, col)), left eye first
    iris_radius: float
    gaze: tuple                 # (dx, dy)
    seed: int

    @property
    def domain(self):
        return 'X' if math.hypot(*self.gaze) <= X_GAZE_RADIUS else 'Y'

    def masks(self, profile):
        return MaskPair.from_centers(self.socket_centers[0], self.socket_centers[1],
                                     profile.mask_size_high, profile.image_size)

    def validate(self, profile):
        _render_settings(profile)
        for name in ('skin_color', 'hair_color', 'iris_color', 'background_color'):
            color = getattr(self, name)
            if len(color) != 3 or min(color) < 0 or max(color) > 1:
                raise ValidationError('{} must be an RGB triple in [0, 1], got {}'.format(name, color))
        limit = gaze_limit(profile)
        dx, dy = self.gaze
        if not (abs(dx) <= limit and abs(dy) <= limit):
            raise ValidationError('gaze offset {} outside [-{}, {}]'.format(self.gaze, limit, limit))
        if not self.iris_radius > 0:
            raise ValidationError('iris radius must be positive')
        try:
            self.masks(profile)
        except GeometryError as e:
            raise ValidationError('eye sockets do not fit the image: {}'.format(e))
        if not iris_fits(self.gaze, self.iris_radius, profile.mask_size_high):
            raise ValidationError('iris of radius {} at offset {} leaves the sclera'.format(
                self.iris_radius, self.gaze))


def sample_gaze(rng, domain, limit, iris_radius=None, mask_size=None):
    """Uniform offset of *domain*; Y offsets are redrawn until the iris fits a *mask_size* socket."""
    if domain == 'X':
        radius = X_GAZE_RADIUS * math.sqrt(rng.uniform())
        angle = rng.uniform(0.0, 2 * np.pi)
        return (radius * math.cos(angle), radius * math.sin(angle))
    elif domain == 'Y':
        while True:
            dx, dy = rng.uniform(-limit, limit, size=2)
            if math.hypot(dx, dy) < Y_GAZE_MIN:
                continue
            if mask_size is None or iris_fits((dx, dy), iris_radius, mask_size):
                return (float(dx), float(dy))
    raise ValueError('unknown domain %r' % domain)


def sample_face_params(rng, profile, domain, seed, gaze=None):
    """Draw a random face of *domain*; *gaze* pins the offset instead of sampling it."""
    render = _render_settings(profile)
    jitter = render['socket_jitter']
    # even offsets keep sockets on the 2x grid, so low-resolution masks stay aligned
    row = render['socket_row'] + 2 * int(rng.integers(-jitter, jitter + 1))
    spread = 2 * int(rng.integers(0, jitter + 1))
    mid = profile.image_size[1] // 2
    offset = render['socket_col_offset'] + spread
    sockets = ((row, mid - offset), (row, mid + offset))

    lum = rng.uniform(0.68, 0.88)
    warmth = rng.uniform(0.5, 1.0)
    skin = tuple(float(np.clip(lum + d * warmth, 0, 1)) for d in (0.08, 0.0, -0.06))
    head_center = tuple(c + float(rng.uniform(-2, 2)) for c in render['head_center'])
    head_axes = tuple(a * float(rng.uniform(0.97, 1.03)) for a in render['head_axes'])
    iris_radius = iris_radius_for(profile.mask_size_high)
    if gaze is None:
        gaze = sample_gaze(rng, domain, gaze_limit(profile), iris_radius, profile.mask_size_high)
    params = FaceParams(
        skin_color=skin,
        hair_color=tuple(float(c) for c in rng.uniform(0.05, 0.35, size=3)),
        iris_color=tuple(float(c) for c in rng.uniform(0.05, 0.3, size=3)),
        background_color=tuple(float(c) for c in rng.uniform(0.3, 0.9, size=3)),
        head_center=head_center,
        head_axes=head_axes,
        socket_centers=sockets,
        iris_radius=iris_radius,
        gaze=tuple(gaze),
        seed=int(seed))
    params.validate(profile)
    return params


def _disc_coverage(rows, cols, center, radius):
    dist = np.sqrt((rows - center[0]) ** 2 + (cols - center[1]) ** 2)
    return np.clip(radius - dist + 0.5, 0.0, 1.0)


def _ellipse_coverage(rows, cols, center, axes):
    level = np.sqrt(((rows - center[0]) / axes[0]) ** 2 + ((cols - center[1]) / axes[1]) ** 2)
    return np.clip(0.5 - (level - 1.0) * min(axes), 0.0, 1.0)


def _paint(img, coverage, color):
    coverage = coverage[..., None]
    img *= 1.0 - coverage
    img += coverage * np.asarray(color)


def render_face(params, profile):
    """Render *params* at the profile's high resolution.

    Returns (image, masks, gaze): a (3, H, W) float32 tensor in [-1, 1], the eye
    MaskPair and the per-eye gaze offsets. Deterministic given ``params.seed``.
    """
    params.validate(profile)
    H, W = profile.image_size
    rng = np.random.default_rng(params.seed)
    rows = np.arange(H, dtype=np.float64)[:, None] + 0.5
    cols = np.arange(W, dtype=np.float64)[None, :] + 0.5

    texture = np.zeros((H, W))
    for _ in range(3):
        fr, fc = rng.uniform(0.02, 0.12, size=2)
        phase = rng.uniform(0.0, 2 * np.pi)
        texture += 0.05 * np.sin(2 * np.pi * (fr * rows + fc * cols) + phase)
    texture += 0.08 * (rows / H - 0.5)
    img = np.asarray(params.background_color)[None, None, :] + texture[..., None]

    hc, ha = params.head_center, params.head_axes
    _paint(img, _ellipse_coverage(rows, cols, (hc[0] - 0.3 * ha[0], hc[1]), (0.8 * ha[0], 1.08 * ha[1])),
           params.hair_color)
    shading = 1.0 - 0.06 * (((rows - hc[0]) / ha[0]) ** 2 + ((cols - hc[1]) / ha[1]) ** 2)
    skin = np.asarray(params.skin_color)[None, None, :] * shading[..., None]
    head = _ellipse_coverage(rows, cols, hc, ha)[..., None]
    img = img * (1.0 - head) + skin * head
    mouth_color = (0.6 * params.skin_color[0], 0.3, 0.3)
    _paint(img, _ellipse_coverage(rows, cols, (hc[0] + 0.55 * ha[0], hc[1]), (0.05 * ha[0], 0.28 * ha[1])),
           mouth_color)

    a_r, a_c = sclera_axes(profile.mask_size_high)
    dx, dy = params.gaze
    for (sr, sc) in params.socket_centers:
        _paint(img, _ellipse_coverage(rows, cols, (sr, sc), (a_r, a_c)), (SCLERA_LEVEL,) * 3)
        iris_center = (sr + dy, sc + dx)
        _paint(img, _disc_coverage(rows, cols, iris_center, params.iris_radius), params.iris_color)
        _paint(img, _disc_coverage(rows, cols, iris_center, PUPIL_FRACTION * params.iris_radius),
               (0.02, 0.02, 0.02))

    img = np.clip(img, 0.0, 1.0) * 2.0 - 1.0
    img = np.clip(img + rng.normal(0.0, NOISE_SIGMA, size=img.shape), -1.0, 1.0)
    image = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32))
    return image, params.masks(profile), (tuple(params.gaze), tuple(params.gaze))


def _disc_kernel(radius):
    extent = int(math.ceil(radius))
    r = np.arange(-extent, extent + 1, dtype=np.float64)
    return (r[:, None] ** 2 + r[None, :] ** 2 <= radius ** 2).astype(np.float64)


def _estimate_eye(crop, iris_radius):
    lum = ((crop.detach().cpu().double().numpy() + 1.0) / 2.0).mean(axis=0)
    h, w = lum.shape
    radius = iris_radius or iris_radius_for((h, w))
    rows = np.arange(h, dtype=np.float64)[:, None] + 0.5 - h / 2.0
    cols = np.arange(w, dtype=np.float64)[None, :] + 0.5 - w / 2.0
    a_r, a_c = sclera_axes((h, w))
    if a_r <= 0.5 or a_c <= 0.5:
        return None
    # pixels fully inside the socket ellipse
    inside = (rows / (a_r - 0.5)) ** 2 + (cols / (a_c - 0.5)) ** 2 <= 1.0
    if not inside.any():
        return None

    sclera = np.percentile(lum[inside], 95)
    darkness = np.clip(sclera - lum, 0.0, None) * inside
    kernel = _disc_kernel(radius)
    response = ndimage.correlate(darkness, kernel / kernel.sum(), mode='constant', cval=0.0)
    i, j = np.unravel_index(np.argmax(response), response.shape)
    if response[i, j] < MIN_DISC_RESPONSE:
        return None

    window = ((rows - rows[i, 0]) ** 2 + (cols - cols[0, j]) ** 2 <= (radius + 1.5) ** 2) & inside
    iris = np.percentile(lum[window], 5)
    threshold = iris + 0.5 * (sclera - iris)
    weights = np.clip(threshold - lum, 0.0, None) * window
    total = weights.sum()
    if total <= 0:
        return None
    dy = float((weights * rows).sum() / total)
    dx = float((weights * cols).sum() / total)
    return (dx, dy)


def estimate_gaze(image, masks, iris_radius=None):
    """Per-eye (dx, dy) of the darkest iris-sized disc relative to each socket center.

    An eye without a disc response above MIN_DISC_RESPONSE yields None. *iris_radius*
    defaults to the radius the renderer uses for the crop size.
    """
    crops = crop_regions(image, masks)
    return GazeEstimate(_estimate_eye(crops.left, iris_radius), _estimate_eye(crops.right, iris_radius))


def gaze_norms(estimate):
    """Norms of the successful per-eye estimates."""
    return [math.hypot(*g) for g in estimate if g is not None]


def _render_record(job):
    out_root, profile, domain, index, seed, split = job
    params = sample_face_params(np.random.default_rng(seed), profile, domain, seed)
    image, masks, gaze = render_face(params, profile)
    image_path = os.path.join('images', '{}_{:05d}.png'.format(domain.lower(), index))
    write_png(os.path.join(out_root, image_path), image)
    return ManifestRecord(image_path=image_path, resolution=tuple(profile.image_size), masks=masks,
                          domain=domain, split=split, gaze=gaze, seed=seed)


def generate_dataset(out_root, count_x, count_y, seed=0, profile='desk',
                     test_fraction=0.1, min_test=8, workers=1):
    """Render *count_x* + *count_y* portraits under OUT_ROOT and write its manifest.

    The last ``held_out_count`` records of each domain form the held-out test split.
    Deterministic per *seed* regardless of *workers*.
    """
    if count_x < 1 or count_y < 1:
        raise ConfigError('both domains need at least one image, got {} / {}'.format(count_x, count_y))
    if isinstance(profile, str):
        profile = load_profile(profile)
    _render_settings(profile)
    os.makedirs(os.path.join(out_root, 'images'), exist_ok=True)

    rng = np.random.default_rng(seed)
    seeds = [int(s) for s in rng.integers(0, 2 ** 31 - 1, size=count_x + count_y)]
    jobs = []
    for domain, count, offset in (('X', count_x, 0), ('Y', count_y, count_x)):
        n_test = held_out_count(count, test_fraction, min_test)
        for index in range(count):
            split = 'test' if index >= count - n_test else 'train'
            jobs.append((out_root, profile, domain, index, seeds[offset + index], split))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_render_record, jobs))
    else:
        records = [_render_record(job) for job in jobs]

    manifest = DomainManifest(profile=profile.name, seed=seed, records=records, root=out_root,
                              config={'count_x': count_x, 'count_y': count_y, 'seed': seed,
                                      'profile': profile.name, 'test_fraction': test_fraction,
                                      'min_test': min_test})
    save_manifest(manifest, os.path.join(out_root, MANIFEST_NAME))
    logger.info('wrote %d portraits (%s) to %s', len(records), manifest.counts, out_root)
    return manifest


def import_images(entries, out_root, profile='desk'):
    """Build a dataset from user images with hand-specified eye centers.

    *entries* is a list of dicts with keys ``path``, ``left_center``, ``right_center``,
    ``domain`` and optionally ``split`` (default ``train``). Images must already have the
    profile's resolution. Gaze is unknown for imported images.
    """
    if isinstance(profile, str):
        profile = load_profile(profile)
    os.makedirs(os.path.join(out_root, 'images'), exist_ok=True)
    records = []
    counters = {'X': 0, 'Y': 0}
    for entry in entries:
        domain = entry['domain']
        if domain not in counters:
            raise ConfigError('unknown domain %r' % domain)
        image = read_png(entry['path'])
        if tuple(image.shape[-2:]) != tuple(profile.image_size):
            raise GeometryError('{} is {}, profile {} expects {}'.format(
                entry['path'], tuple(image.shape[-2:]), profile.name, tuple(profile.image_size)))
        masks = MaskPair.from_centers(entry['left_center'], entry['right_center'],
                                      profile.mask_size_high, profile.image_size)
        image_path = os.path.join('images', '{}_{:05d}.png'.format(domain.lower(), counters[domain]))
        counters[domain] += 1
        write_png(os.path.join(out_root, image_path), image)
        records.append(ManifestRecord(image_path=image_path, resolution=tuple(profile.image_size),
                                      masks=masks, domain=domain, split=entry.get('split', 'train')))
    manifest = DomainManifest(profile=profile.name, seed=None, records=records, root=out_root,
                              config={'imported': len(records), 'profile': profile.name})
    save_manifest(manifest, os.path.join(out_root, MANIFEST_NAME))
    return manifest
