"""Evaluation: region preservation, eye-region distribution distance, gaze accuracy, speed."""

import functools
import json
import logging
import math
import time
from collections import namedtuple
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F

from data.load_synthgaze import SynthGazeDataset, collate_portraits
from data.synthgaze import estimate_gaze, gaze_norms
from eyeshift.errors import MetricError
from eyeshift.imagecore import apply_mask, crop_regions
from eyeshift.inference import PortraitSample, correct_batch, gam_forward
from eyeshift.pyramid import downsample2x
from eyeshift.pytorch_utils import evaluating
from networks import count_params

logger = logging.getLogger(__name__)

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
GAUSSIAN_WINDOW = 11
GAUSSIAN_SIGMA = 1.5
MIN_MSSSIM_SIDE = 32
DATA_RANGE = 2.0
FEATURE_SEED = 1729
FEATURE_CHANNELS = (16, 32, 64)

Throughput = namedtuple('Throughput', ['fps', 'variance', 'seconds'])


# ************************* MS-SSIM ************************************************************************************
def _gaussian_window(size, sigma):
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _blur(x, window):
    c = x.shape[1]
    k = window.numel()
    x = F.conv2d(x, window.view(1, 1, 1, k).expand(c, 1, 1, k), groups=c)
    return F.conv2d(x, window.view(1, 1, k, 1).expand(c, 1, k, 1), groups=c)


def _ssim_terms(a, b, data_range):
    side = min(a.shape[-2:])
    size = min(GAUSSIAN_WINDOW, side if side % 2 else side - 1)
    window = _gaussian_window(size, GAUSSIAN_SIGMA)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _blur(a, window), _blur(b, window)
    var_a = _blur(a * a, window) - mu_a * mu_a
    var_b = _blur(b * b, window) - mu_b * mu_b
    cov = _blur(a * b, window) - mu_a * mu_b
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    luminance = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    return (luminance * cs).mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


def msssim_scales(side):
    return min(len(MSSSIM_WEIGHTS), 1 + int(math.floor(math.log2(side / 8.0))))


def msssim(a, b, data_range=DATA_RANGE):
    """Multi-scale SSIM averaged over the batch; inputs in [-1, 1], (3, H, W) or (N, 3, H, W).

    As many dyadic scales as fit (at least 3) are used, with the conventional weights
    truncated and renormalized.
    """
    if a.shape != b.shape:
        raise MetricError('msssim of shapes {} and {}'.format(tuple(a.shape), tuple(b.shape)))
    side = min(a.shape[-2:])
    if side < MIN_MSSSIM_SIDE:
        raise MetricError('msssim needs images of at least {0}x{0}, got {1}'.format(
            MIN_MSSSIM_SIDE, tuple(a.shape[-2:])))
    a = a.detach().cpu().double()
    b = b.detach().cpu().double()
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)

    levels = msssim_scales(side)
    weights = torch.tensor(MSSSIM_WEIGHTS[:levels], dtype=torch.float64)
    weights = weights / weights.sum()
    score = torch.ones(a.shape[0], dtype=torch.float64)
    for level in range(levels):
        ssim, cs = _ssim_terms(a, b, data_range)
        if level == levels - 1:
            score = score * torch.relu(ssim) ** weights[level]
        else:
            score = score * torch.relu(cs) ** weights[level]
            a = F.avg_pool2d(a, kernel_size=2, stride=2)
            b = F.avg_pool2d(b, kernel_size=2, stride=2)
    return float(score.mean())


def msssim_irrelevant(inputs, outputs, masks):
    """MS-SSIM with the eye rectangles blanked in both images."""
    return msssim(apply_mask(inputs, masks), apply_mask(outputs, masks))


# ************************* Feature extractor **************************************************************************
class FeatureExtractor(nn.Module):
    """Fixed random convolutional features; weights depend only on FEATURE_SEED."""

    def __init__(self, channels=FEATURE_CHANNELS, seed=FEATURE_SEED):
        super(FeatureExtractor, self).__init__()
        generator = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        in_ch = 3
        for out_ch in channels:
            conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator) *
                                  math.sqrt(2.0 / (in_ch * 9)))
                conv.bias.zero_()
            self.convs.append(conv)
            in_ch = out_ch
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats

    def embed(self, x):
        """Global-average-pooled last layer, one vector per image."""
        return self.forward(x)[-1].mean(dim=(2, 3))


@functools.lru_cache(maxsize=1)
def feature_extractor():
    return FeatureExtractor()


def _unit(f, eps=1e-10):
    return f / (f.norm(dim=1, keepdim=True) + eps)


def perceptual_distance(a, b):
    """Mean over layers of the L2 distance between channel-normalized feature vectors, averaged over positions."""
    if a.shape != b.shape:
        raise MetricError('perceptual distance of shapes {} and {}'.format(tuple(a.shape), tuple(b.shape)))
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    net = feature_extractor()
    with torch.no_grad():
        feats_a = net(a.detach().cpu().float())
        feats_b = net(b.detach().cpu().float())
        per_layer = [(_unit(fa) - _unit(fb)).norm(dim=1).mean() for fa, fb in zip(feats_a, feats_b)]
    return float(sum(per_layer) / len(per_layer))


# ************************* Frechet distance ***************************************************************************
def _sqrtm_psd(m):
    values, vectors = scipy.linalg.eigh(m)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_distance(feats_a, feats_b, eps=1e-6):
    """Frechet distance between Gaussians fitted to two (n, d) feature arrays."""
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    if len(feats_a) < 2 or len(feats_b) < 2:
        raise MetricError('Frechet distance needs at least 2 samples per set, got {} and {}'.format(
            len(feats_a), len(feats_b)))
    dim = feats_a.shape[1]
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    sigma_a = np.cov(feats_a, rowvar=False).reshape(dim, dim) + eps * np.eye(dim)
    sigma_b = np.cov(feats_b, rowvar=False).reshape(dim, dim) + eps * np.eye(dim)
    root_a = _sqrtm_psd(sigma_a)
    inner = root_a @ sigma_b @ root_a
    cross = np.sqrt(np.clip(scipy.linalg.eigvalsh((inner + inner.T) / 2.0), 0.0, None)).sum()
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * cross)
    return max(value, 0.0)


def fid_eyes(real_crops, fake_crops):
    """Frechet distance between eye crops, in the fixed extractor's feature space."""
    net = feature_extractor()
    with torch.no_grad():
        feats_real = net.embed(real_crops.detach().cpu().float()).numpy()
        feats_fake = net.embed(fake_crops.detach().cpu().float()).numpy()
    return frechet_distance(feats_real, feats_fake)


# ************************* Model-level metrics ************************************************************************
def _device_of(models):
    return next(models.parameters()).device


def _test_batches(manifest, domain, split='test', batch_size=16, limit=None):
    dataset = SynthGazeDataset(manifest, domain, split)
    n = len(dataset) if limit is None else min(limit, len(dataset))
    for start in range(0, n, batch_size):
        yield collate_portraits([dataset[i] for i in range(start, min(n, start + batch_size))])


def corrected_set(models, manifest, domain='Y', split='test', batch_size=16, limit=None):
    """Inputs, corrected outputs and masks of a manifest split, on the CPU."""
    dev = _device_of(models)
    inputs, outputs, masks = [], [], []
    with evaluating(models):
        for batch in _test_batches(manifest, domain, split, batch_size, limit):
            out = correct_batch(models, batch['image'].to(dev), batch['masks'])
            inputs.append(batch['image'])
            outputs.append(out.cpu())
            masks += batch['masks']
    return torch.cat(inputs), torch.cat(outputs), masks


def _eye_stack(images, masks):
    crops = crop_regions(images, masks)
    return torch.cat([crops.left, crops.right], dim=0)


def _mean_gaze_norm(images, masks):
    norms = []
    failures = 0
    for image, pair in zip(images, masks):
        estimate = estimate_gaze(image, pair)
        failures += sum(1 for g in estimate if g is None)
        norms += gaze_norms(estimate)
    if failures:
        logger.warning('gaze estimation failed on %d of %d eyes', failures, 2 * len(masks))
    return float(np.mean(norms)) if norms else None


def gaze_error(models, manifest, domain='Y', split='test', batch_size=16, limit=None):
    """Mean per-eye estimated gaze norm (pixels) before and after correction."""
    inputs, outputs, masks = corrected_set(models, manifest, domain, split, batch_size, limit)
    return _mean_gaze_norm(inputs, masks), _mean_gaze_norm(outputs, masks)


def throughput(models, sample, n_warmup=2, n_timed=10):
    """Frames per second of single-portrait correction: median over timed runs, and its variance."""
    if n_timed < 1:
        raise MetricError('throughput needs at least one timed run')
    dev = _device_of(models)
    image = sample.image.to(dev).unsqueeze(0)
    masks = [sample.masks]

    def run():
        out = correct_batch(models, image, masks)
        if out.is_cuda:
            torch.cuda.synchronize()

    seconds = []
    with evaluating(models):
        for _ in range(n_warmup):
            run()
        for _ in range(n_timed):
            start = time.perf_counter()
            run()
            seconds.append(time.perf_counter() - start)
    fps = 1.0 / np.maximum(np.asarray(seconds), 1e-9)
    return Throughput(float(np.median(fps)), float(np.var(fps)), seconds)


def eye_reconstruction(models, manifest, split='test', batch_size=16, limit=None):
    """MS-SSIM and perceptual distance between X eye crops and their correction-branch reconstruction."""
    inputs, outputs, masks = corrected_set(models, manifest, 'X', split, batch_size, limit)
    real, fake = _eye_stack(inputs, masks), _eye_stack(outputs, masks)
    return msssim(real, fake), perceptual_distance(real, fake)


def y_reconstruction_msssim(models, manifest, split='test', batch_size=16, limit=None):
    """Full-image MS-SSIM between low-resolution y and the animation branch fed its own codes."""
    dev = _device_of(models)
    scores, weights = [], []
    with evaluating(models):
        for batch in _test_batches(manifest, 'Y', split, batch_size, limit):
            images_h = batch['image'].to(dev)
            masks_l = models.profile.masks_low(batch['masks'])
            y = downsample2x(images_h)
            crops = crop_regions(y, masks_l)
            y_tilde = gam_forward(models, y, masks_l, models.angle_codes(crops), models.content_codes(crops))
            scores.append(msssim(y, torch.clamp(y_tilde, -1.0, 1.0)))
            weights.append(len(masks_l))
    return float(np.average(scores, weights=weights))


def angle_codes_with_gaze(models, manifest, split, batch_size=16):
    """Per-eye angle codes and ground-truth (dx, dy) of the records with known gaze."""
    dev = _device_of(models)
    codes, targets = [], []
    dim = models.profile.angle_dim
    with evaluating(models):
        for batch in _test_batches(manifest, None, split, batch_size):
            keep = ~torch.isnan(batch['gaze']).any(dim=2).any(dim=1)
            if not keep.any():
                continue
            images = batch['image'][keep].to(dev)
            masks = [m for m, k in zip(batch['masks'], keep.tolist()) if k]
            low = downsample2x(images)
            r = models.angle_codes(crop_regions(low, models.profile.masks_low(masks))).cpu()
            codes += [r[:, :dim], r[:, dim:]]
            targets += [batch['gaze'][keep][:, 0], batch['gaze'][keep][:, 1]]
    if not codes:
        return np.zeros((0, dim)), np.zeros((0, 2))
    return torch.cat(codes).numpy().astype(np.float64), torch.cat(targets).numpy().astype(np.float64)


def linear_probe_r2(models, manifest, batch_size=16):
    """Held-out R^2 of a least-squares map from angle codes to gaze offsets (train -> test)."""
    x_train, y_train = angle_codes_with_gaze(models, manifest, 'train', batch_size)
    x_test, y_test = angle_codes_with_gaze(models, manifest, 'test', batch_size)
    if len(x_train) < 2 or len(x_test) < 2:
        raise MetricError('linear probe needs gaze labels in both splits')
    design = np.hstack([x_train, np.ones((len(x_train), 1))])
    coef, _, _, _ = np.linalg.lstsq(design, y_train, rcond=None)
    pred = np.hstack([x_test, np.ones((len(x_test), 1))]) @ coef
    ss_res = ((y_test - pred) ** 2).sum()
    ss_tot = ((y_test - y_test.mean(axis=0)) ** 2).sum()
    if ss_tot <= 0:
        raise MetricError('test gaze labels have no variance')
    return float(1.0 - ss_res / ss_tot)


# ************************* Report *************************************************************************************
@dataclass
class EvalReport(object):
    msssim_irrelevant: float = None
    perceptual_irrelevant: float = None
    fid_eyes: float = None
    gaze_error_before: float = None
    gaze_error_after: float = None
    gaze_error_x: float = None
    eye_recon_msssim: float = None
    eye_recon_perceptual: float = None
    y_recon_msssim: float = None
    probe_r2: float = None
    fps: float = None
    fps_variance: float = None
    params: dict = field(default_factory=dict)
    sample_counts: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    METRICS = ('msssim_irrelevant', 'perceptual_irrelevant', 'fid_eyes', 'gaze_error_before',
               'gaze_error_after', 'gaze_error_x', 'eye_recon_msssim', 'eye_recon_perceptual',
               'y_recon_msssim', 'probe_r2', 'fps')

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        with open(path, 'w') as f:
            f.write(self.to_json() + '\n')
        return path

    def format(self):
        lines = ['{:<24s}{}'.format(name, _fmt(getattr(self, name))) for name in self.METRICS]
        lines.append('{:<24s}{}'.format('params', self.params.get('total')))
        lines.append('{:<24s}{}'.format('samples', self.sample_counts))
        if self.skipped:
            lines.append('{:<24s}{}'.format('skipped', ', '.join(self.skipped)))
        return '\n'.join(lines)


def _fmt(value):
    return 'n/a' if value is None else '{:.4f}'.format(value)


def evaluate(models, manifest, config=None, batch_size=16, limit=None, n_warmup=2, n_timed=10):
    """Run every metric that the profile's image sizes and the manifest's labels allow."""
    report = EvalReport(params=count_params(models), config=config or {})
    report.sample_counts = {d: len(manifest.select(d, 'test')) for d in ('X', 'Y')}
    if limit is not None:
        report.sample_counts = {d: min(limit, n) for d, n in report.sample_counts.items()}

    def attempt(name, fn):
        try:
            return fn()
        except MetricError as e:
            logger.warning('skipping %s: %s', name, e)
            report.skipped.append(name)
            return None

    y_in, y_out, y_masks = corrected_set(models, manifest, 'Y', 'test', batch_size, limit)
    x_in, x_out, x_masks = corrected_set(models, manifest, 'X', 'test', batch_size, limit)

    report.msssim_irrelevant = attempt('msssim_irrelevant', lambda: msssim_irrelevant(y_in, y_out, y_masks))
    report.perceptual_irrelevant = perceptual_distance(apply_mask(y_in, y_masks), apply_mask(y_out, y_masks))
    report.fid_eyes = attempt('fid_eyes', lambda: fid_eyes(_eye_stack(x_in, x_masks), _eye_stack(y_out, y_masks)))
    report.gaze_error_before = _mean_gaze_norm(y_in, y_masks)
    report.gaze_error_after = _mean_gaze_norm(y_out, y_masks)
    report.gaze_error_x = _mean_gaze_norm(x_in, x_masks)

    x_real, x_fake = _eye_stack(x_in, x_masks), _eye_stack(x_out, x_masks)
    report.eye_recon_msssim = attempt('eye_recon_msssim', lambda: msssim(x_real, x_fake))
    report.eye_recon_perceptual = perceptual_distance(x_real, x_fake)
    report.y_recon_msssim = attempt('y_recon_msssim',
                                    lambda: y_reconstruction_msssim(models, manifest, 'test', batch_size, limit))
    report.probe_r2 = attempt('probe_r2', lambda: linear_probe_r2(models, manifest, batch_size))

    speed = attempt('fps', lambda: throughput(models, PortraitSample(y_in[0], y_masks[0]), n_warmup, n_timed))
    if speed is not None:
        report.fps, report.fps_variance = speed.fps, speed.variance
    return report
