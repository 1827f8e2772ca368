#!/usr/bin/env python
# -----------------------------------------------------------------------------
# File Name : training.py
#
# Mirror-autoencoder pretraining, joint adversarial training with
# synthesis-as-training, learning-rate schedules and checkpoints.
#
# Licence : Apache License, Version 2.0
# -----------------------------------------------------------------------------

import hashlib
import io
import json
import logging
import os
import time
from collections import namedtuple

import numpy as np
import torch
from tensorboardX import SummaryWriter

from data.load_synthgaze import get_synthgaze_loader
from eyeshift import losses
from eyeshift.config import AblationFlags, config_diff
from eyeshift.errors import ConfigError, IntegrityError, TrainingError
from eyeshift.experiment_tools import prepare_run_dir, save_source
from eyeshift.imagecore import apply_mask, crop_regions, inflated_crops
from eyeshift.inference import animate_batch, correct_batch, gam_forward, gcm_forward, highres_output, paste_eyes
from eyeshift.layers import device as default_device
from eyeshift.pyramid import downsample2x
from eyeshift.pytorch_utils import NetworkDumper, evaluating, set_requires_grad
from networks import ModelSet, Profile, build_model_set, load_profile

logger = logging.getLogger(__name__)

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

CHECKPOINT_FORMAT = 'eyeshift-checkpoint'
CHECKPOINT_VERSION = 1
JOINT_MODELS = ('e_r', 'g_x', 'g_y', 'g_h', 'd_x', 'd_y', 'd_h')
LOSS_TERMS = ('d_x', 'd_y', 'd_h', 'adv_x', 'adv_h_x', 'rec_x', 'adv_y', 'adv_h_y',
              'adv_yx', 'rec_y', 'rec_yx', 'fp', 'g_x', 'g_y')

TrainResult = namedtuple('TrainResult', ['checkpoint', 'out_dir', 'history', 'completed', 'step'])


# ************************* Schedules **********************************************************************************
def lr_schedule(step, config, model_tag):
    """Constant base rate for ``step < warm_steps``, then linear decay reaching 0 at ``max_steps``.

    The pretraining tag ``g_pre`` keeps a constant rate.
    """
    base = config.base_rate(model_tag)
    if model_tag == 'g_pre' or step < config.warm_steps:
        return base
    span = config.max_steps - config.warm_steps
    if span <= 0:
        return 0.0
    return base * max(0.0, min(1.0, float(config.max_steps - step) / span))


def make_optimizers(models, config, names=JOINT_MODELS):
    return {name: torch.optim.Adam(net.parameters(), lr=config.base_rate(name),
                                   betas=(config.beta1, config.beta2))
            for name, net in models.named_networks(names)}


def set_learning_rates(optimizers, step, config):
    rates = {}
    for name, optimizer in optimizers.items():
        rates[name] = lr_schedule(step, config, name)
        for group in optimizer.param_groups:
            group['lr'] = rates[name]
    return rates


# ************************* Checkpoints ********************************************************************************
def save_checkpoint(path, models, optimizers=None, step=0, config=None, extra=None):
    """Write weights, power-iteration buffers, optimizer moments, step and config echo.

    The payload is serialized once, hashed, and wrapped in a small container so that
    truncation and bit flips are detected on load. The file is replaced atomically.
    """
    payload = {'models': {name: net.state_dict() for name, net in models.named_networks()},
               'profile': models.profile.to_dict(),
               'flags': models.flags.to_dict(),
               'optimizers': {name: opt.state_dict() for name, opt in (optimizers or {}).items()},
               'step': int(step),
               'config': None if config is None else config.to_dict(),
               'rng': {'torch': torch.get_rng_state(), 'numpy': np.random.get_state()},
               'extra': extra or {}}
    buf = io.BytesIO()
    torch.save(payload, buf)
    blob = buf.getvalue()
    container = {'format': CHECKPOINT_FORMAT,
                 'version': CHECKPOINT_VERSION,
                 'sha256': hashlib.sha256(blob).hexdigest(),
                 'payload': blob}
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp = path + '.tmp'
    torch.save(container, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, profile=None):
    """Read and verify a checkpoint. With *profile* given, an architecture mismatch raises ConfigError."""
    try:
        container = torch.load(path, map_location='cpu', weights_only=False)
    except (FileNotFoundError, IsADirectoryError, PermissionError):
        raise
    except Exception as e:
        raise IntegrityError('cannot read checkpoint {}: {}'.format(path, e))
    if not isinstance(container, dict) or container.get('format') != CHECKPOINT_FORMAT:
        raise IntegrityError('{} is not an eyeshift checkpoint'.format(path))
    if container.get('version') != CHECKPOINT_VERSION:
        raise IntegrityError('checkpoint {} has unsupported version {!r}'.format(path, container.get('version')))
    blob = container.get('payload')
    if not isinstance(blob, bytes) or hashlib.sha256(blob).hexdigest() != container.get('sha256'):
        raise IntegrityError('checkpoint {} failed its integrity check'.format(path))
    try:
        state = torch.load(io.BytesIO(blob), map_location='cpu', weights_only=False)
    except Exception as e:
        raise IntegrityError('cannot decode checkpoint {}: {}'.format(path, e))

    if profile is not None:
        if isinstance(profile, str):
            profile = load_profile(profile)
        diff = config_diff(profile.to_dict(), state['profile'])
        if diff:
            raise ConfigError('checkpoint {} was written for a different architecture:\n  {}'.format(
                path, '\n  '.join(diff)))
    return state


def load_networks(models, state, names=None):
    for name, net in models.named_networks(names):
        if name in state['models']:
            net.load_state_dict(state['models'][name])


def restore_model_set(state):
    """Rebuild the ModelSet a checkpoint state was written from."""
    profile = Profile.from_dict(state['profile'])
    models = build_model_set(profile, AblationFlags.from_dict(state['flags']))
    load_networks(models, state)
    models.global_step = state['step']
    return models


def load_model_set(path, profile=None, map_location=None):
    models = restore_model_set(load_checkpoint(path, profile))
    return models.to(map_location or default_device)


# ************************* Bookkeeping ********************************************************************************
class BatchStream(object):
    """Endless iteration over a DataLoader, restarting it when exhausted."""

    def __init__(self, loader):
        self.loader = loader
        self.it = iter(loader)

    def next(self):
        try:
            return next(self.it)
        except StopIteration:
            self.it = iter(self.loader)
            return next(self.it)


class TrainingLog(object):
    """Per-step scalars to tensorboard and one JSON object per line to *filename*."""

    def __init__(self, out_dir, filename, writer, log_interval=10, title='TRAINING'):
        self.path = os.path.join(out_dir, filename)
        self.f = open(self.path, 'a')
        self.writer = writer
        self.log_interval = log_interval
        self.title = title
        self.start = time.time()

    def record(self, step, terms, rates):
        entry = {'step': step, 'wall_time': time.time() - self.start}
        for name, value in terms.items():
            entry[name] = value
            self.writer.add_scalar('loss/' + name, value, step)
        for name, lr in rates.items():
            entry['lr_' + name] = lr
            self.writer.add_scalar('lr/' + name, lr, step)
        self.f.write(json.dumps(entry, sort_keys=True) + '\n')
        self.f.flush()
        if step % self.log_interval == 0:
            shown = ', '.join('{} {:.4f}'.format(k, v) for k, v in sorted(terms.items()))
            logger.info('[%s] step %s, %s', self.title, str(step).zfill(5), shown)
        return entry

    def close(self):
        self.f.close()


def read_training_log(path):
    with open(path, 'r') as f:
        return [json.loads(line) for line in f if line.strip()]


def resolve_device(config):
    return torch.device(config.device or default_device)


def _seed_everything(config):
    torch.manual_seed(config.seed)
    np.random.seed(config.seed)
    if config.deterministic:
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False


def _loader(manifest, domain, config, seed_offset=0):
    return get_synthgaze_loader(manifest, domain, split='train', batch_size=config.batch_size,
                                shuffle=True, seed=config.seed + seed_offset,
                                num_workers=0 if config.deterministic else config.num_workers)


def _check_manifest(manifest, profile, domains):
    if manifest.profile != profile.name:
        raise ConfigError('manifest was rendered for profile {}, training uses {}'.format(
            manifest.profile, profile.name))
    for domain in domains:
        if not manifest.select(domain, 'train'):
            raise ConfigError('manifest has no {} training records'.format(domain or 'any'))


def _dump_batch(out_dir, step, batches):
    path = os.path.join(out_dir, 'nonfinite_batch_{:06d}.pt'.format(step))
    torch.save({k: {'image': b['image'].detach().cpu(),
                    'masks': [m.to_dict() for m in b['masks']],
                    'index': b['index']}
                for k, b in batches.items()}, path)
    return path


def _check_finite(loss, name, step, out_dir, batches):
    if not torch.isfinite(loss).all():
        path = _dump_batch(out_dir, step, batches) if out_dir else None
        raise TrainingError('{} became non-finite at step {}; batch dumped to {}'.format(name, step, path))


# ************************* Mirror autoencoder pretraining *************************************************************
def pretrain_pam(config, manifest, out_dir=None):
    """Train the mirror autoencoder on eye pairs of every training record (both domains)."""
    profile = load_profile(config.profile)
    _check_manifest(manifest, profile, [None])
    _seed_everything(config)
    dev = resolve_device(config)

    models = build_model_set(profile, config.flags, seed=config.seed)
    g_pre = models.g_pre.to(dev)
    optimizer = torch.optim.Adam(g_pre.parameters(), lr=config.lr_pam, betas=(config.beta1, config.beta2))

    out_dir = prepare_run_dir(out_dir, config.to_dict())
    writer = SummaryWriter(log_dir=os.path.join(out_dir, 'tensorboard'), comment='pam')
    log = TrainingLog(out_dir, 'pam_log.jsonl', writer, config.log_interval, title='PAM')
    stream = BatchStream(_loader(manifest, None, config))

    history = []
    g_pre.train()
    for step in range(config.pam_steps):
        batch = stream.next()
        images_h = batch['image'].to(dev)
        crops = crop_regions(downsample2x(images_h), profile.masks_low(batch['masks']))
        loss = losses.loss_pre(crops.left, crops.right, g_pre)
        _check_finite(loss, 'L_pre', step, out_dir, {'batch': batch})

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append(log.record(step, {'pre': loss.item()}, {'g_pre': config.lr_pam}))

    path = save_checkpoint(os.path.join(out_dir, 'pam.pth'), models, {'g_pre': optimizer},
                           step=config.pam_steps, config=config, extra={'stage': 'pam'})
    log.close()
    writer.close()
    logger.info('PAM checkpoint written to %s', path)
    return TrainResult(path, out_dir, history, True, config.pam_steps)


# ************************* Joint training *****************************************************************************
def generator_forward(models, x_h, masks_xh, y_h, masks_yh):
    """Every generator-side tensor of one joint step, keyed by name.

    The synthesized pair ``y_hx``/``y_x`` is produced in eval mode without autograd and
    enters the animation branch as a constant.
    """
    profile, flags = models.profile, models.flags
    out = {'x_h': x_h, 'masks_xh': masks_xh, 'y_h': y_h, 'masks_yh': masks_yh}

    # correction branch on X
    out['x'], out['masks_xl'], out['x_tilde'] = gcm_forward(models, x_h, masks_xh)
    if flags.use_cfm:
        out['x_hat_h'] = highres_output(models, out['x_tilde'], x_h, masks_xh)

    # animation branch on Y
    masks_yl = profile.masks_low(masks_yh)
    y = downsample2x(y_h)
    crops_y = crop_regions(y, masks_yl)
    out['y'], out['masks_yl'] = y, masks_yl
    out['c_y'] = models.content_codes(crops_y)
    out['y_tilde'] = gam_forward(models, y, masks_yl, models.angle_codes(crops_y), out['c_y'])
    if flags.use_cfm:
        out['y_hat_h'] = highres_output(models, out['y_tilde'], y_h, masks_yh)

    # synthesis as training
    if flags.use_synthesis_as_training:
        with evaluating(models):
            y_hx = correct_batch(models, y_h, masks_yh)
        y_x = downsample2x(y_hx)
        crops_yx = crop_regions(y_x, masks_yl)
        out['y_hx'], out['y_x'] = y_hx, y_x
        out['c_yx'] = models.content_codes(crops_yx)
        out['y_tilde_x'] = gam_forward(models, y_x, masks_yl, models.angle_codes(crops_yx), out['c_yx'])
        if flags.use_cfm:
            out['y_hat_hx'] = highres_output(models, out['y_tilde_x'], y_hx, masks_yh)
    return out


def _eyes(image, masks):
    crops = crop_regions(image, masks)
    return torch.cat([crops.left, crops.right], dim=0)


def _refined_eyes(models, image_h, generated_h, masks_h):
    """Inflated eye crops the local critic sees, taken from the composited output."""
    return inflated_crops(paste_eyes(image_h, generated_h, masks_h), masks_h, models.profile.eye_crop_size)


def discriminator_objectives(models, out):
    """Ascent-form objectives of the critics on real images and detached fakes."""
    flags = models.flags
    d_x, d_y = models.d_x, models.d_y
    objectives = {}
    fake_yx = None
    if flags.use_synthesis_as_training:
        fake_yx = models.discriminate_global_local(d_x, out['y_tilde_x'].detach(), out['masks_yl'])
    objectives['d_x'] = losses.loss_adv_x_d(
        models.discriminate_global_local(d_x, out['x'], out['masks_xl']),
        models.discriminate_global_local(d_x, out['x_tilde'].detach(), out['masks_xl']),
        fake_yx)
    objectives['d_y'] = losses.loss_adv_y_d(
        models.discriminate_global_local(d_y, out['y'], out['masks_yl']),
        models.discriminate_global_local(d_y, out['y_tilde'].detach(), out['masks_yl']))
    if flags.use_cfm:
        size = models.profile.eye_crop_size
        objectives['d_h'] = losses.loss_adv_h_d(
            models.discriminate_local(inflated_crops(out['x_h'], out['masks_xh'], size)),
            models.discriminate_local(_refined_eyes(models, out['x_h'], out['x_hat_h'].detach(), out['masks_xh'])),
            models.discriminate_local(inflated_crops(out['y_h'], out['masks_yh'], size)),
            models.discriminate_local(_refined_eyes(models, out['y_h'], out['y_hat_h'].detach(), out['masks_yh'])))
    return objectives


def generator_terms(models, out):
    """Generator-side loss terms. Terms of ablated components are absent."""
    flags = models.flags
    cfm = flags.use_cfm
    terms = {}

    terms['adv_x'] = losses.loss_adv_x_g(
        models.discriminate_global_local(models.d_x, out['x_tilde'], out['masks_xl']))
    terms['rec_x'] = losses.loss_rec_x(
        out['x'], out['x_tilde'],
        _eyes(out['x_h'], out['masks_xh']) if cfm else None,
        _eyes(out['x_hat_h'], out['masks_xh']) if cfm else None)

    terms['adv_y'] = losses.loss_adv_y_g(
        models.discriminate_global_local(models.d_y, out['y_tilde'], out['masks_yl']))
    terms['rec_y'] = losses.loss_rec_y(
        out['y'], out['y_tilde'],
        _eyes(out['y_h'], out['masks_yh']) if cfm else None,
        _eyes(out['y_hat_h'], out['masks_yh']) if cfm else None)

    if cfm:
        terms['adv_h_x'] = losses.loss_adv_h_g(d_fake_x=models.discriminate_local(
            _refined_eyes(models, out['x_h'], out['x_hat_h'], out['masks_xh'])))
        terms['adv_h_y'] = losses.loss_adv_h_g(d_fake_y=models.discriminate_local(
            _refined_eyes(models, out['y_h'], out['y_hat_h'], out['masks_yh'])))

    if flags.use_synthesis_as_training:
        terms['adv_yx'] = losses.loss_adv_x_g(
            models.discriminate_global_local(models.d_x, out['y_tilde_x'], out['masks_yl']))
        terms['rec_yx'] = losses.loss_rec_yx(
            out['y_x'], out['y_tilde_x'],
            _eyes(out['y_hx'], out['masks_yh']) if cfm else None,
            _eyes(out['y_hat_hx'], out['masks_yh']) if cfm else None)

    if flags.use_latent_recon:
        c_of_y_tilde = models.content_codes(crop_regions(out['y_tilde'], out['masks_yl']))
        if flags.use_synthesis_as_training:
            c_of_yx_tilde = models.content_codes(crop_regions(out['y_tilde_x'], out['masks_yl']))
            terms['fp'] = losses.loss_fp(out['c_y'], c_of_y_tilde, out['c_yx'], c_of_yx_tilde)
        else:
            terms['fp'] = losses.loss_fp(out['c_y'], c_of_y_tilde)
    return terms


def joint_step(models, optimizers, batch_x, batch_y, config, step=0, out_dir=None):
    """One critic update followed by one generator update. Returns every logged term as a float."""
    dev = resolve_device(config)
    batches = {'x': batch_x, 'y': batch_y}
    out = generator_forward(models, batch_x['image'].to(dev), batch_x['masks'],
                            batch_y['image'].to(dev), batch_y['masks'])
    discriminators = models.networks(ModelSet.DISCRIMINATORS)

    # critics
    set_requires_grad(discriminators, True)
    objectives = discriminator_objectives(models, out)
    d_loss = -sum(objectives.values())
    _check_finite(d_loss, 'discriminator loss', step, out_dir, batches)
    for name in ModelSet.DISCRIMINATORS:
        if name in optimizers:
            optimizers[name].zero_grad()
    d_loss.backward()
    for name in ModelSet.DISCRIMINATORS:
        if name in optimizers:
            optimizers[name].step()

    # generators, critics held fixed
    set_requires_grad(discriminators, False)
    terms = generator_terms(models, out)
    g_x_total = losses.total_g_x(terms, config.weights)
    g_y_total = losses.total_g_y(terms, config.weights)
    g_loss = g_x_total + g_y_total
    _check_finite(g_loss, 'generator loss', step, out_dir, batches)
    for name in ModelSet.GENERATORS:
        if name in optimizers:
            optimizers[name].zero_grad()
    g_loss.backward()
    for name in ModelSet.GENERATORS:
        if name in optimizers:
            optimizers[name].step()
    set_requires_grad(discriminators, True)

    logged = {name: 0.0 for name in LOSS_TERMS}
    logged.update({name: -obj.item() for name, obj in objectives.items()})
    logged.update({name: float(v) for name, v in terms.items()})
    logged['g_x'] = float(g_x_total)
    logged['g_y'] = float(g_y_total)
    return logged


def _write_samples(dumper, models, batch_y, dev, step):
    images_h = batch_y['image'][:4].to(dev)
    masks_h = batch_y['masks'][:4]
    with evaluating(models):
        corrected = correct_batch(models, images_h, masks_h)
        frames, _ = animate_batch(models, images_h, masks_h, (0.5,))
    dumper.samples([images_h, apply_mask(images_h, masks_h), corrected, frames[0]], 'samples', step)


def train_joint(config, manifest, pam_checkpoint=None, out_dir=None, resume=None):
    """Joint adversarial training of every generator and critic.

    The content encoder comes from *pam_checkpoint* and stays frozen. With *resume*,
    weights, optimizer moments, step counter and RNG state are restored from that
    checkpoint and *pam_checkpoint* is ignored.
    """
    profile = load_profile(config.profile)
    _check_manifest(manifest, profile, ['X', 'Y'])
    _seed_everything(config)
    dev = resolve_device(config)

    models = build_model_set(profile, config.flags, seed=config.seed)
    start_step = 0
    state = None
    if resume is not None:
        state = load_checkpoint(resume, profile)
        load_networks(models, state)
        start_step = state['step']
        torch.set_rng_state(state['rng']['torch'])
        np.random.set_state(state['rng']['numpy'])
        logger.info('resuming from %s at step %d', resume, start_step)
    elif pam_checkpoint is not None:
        pam = load_checkpoint(pam_checkpoint, profile)
        models.g_pre.load_state_dict(pam['models']['g_pre'])
    else:
        logger.warning('no PAM checkpoint given; content codes come from an untrained encoder')
    models.g_pre.requires_grad_(False)
    models.global_step = start_step
    models.to(dev)

    optimizers = make_optimizers(models, config)
    if state is not None:
        for name, opt in optimizers.items():
            if name in state['optimizers']:
                opt.load_state_dict(state['optimizers'][name])

    out_dir = prepare_run_dir(out_dir, config.to_dict())
    save_source(out_dir, root=REPO_ROOT)
    writer = SummaryWriter(log_dir=os.path.join(out_dir, 'tensorboard'), comment='joint')
    dumper = NetworkDumper(writer, models)
    log = TrainingLog(out_dir, 'train_log.jsonl', writer, config.log_interval)
    stream_x = BatchStream(_loader(manifest, 'X', config))
    stream_y = BatchStream(_loader(manifest, 'Y', config, seed_offset=1))

    history = []
    completed = True
    start = time.time()
    step = start_step
    models.train()
    while step < config.max_steps:
        if config.time_budget is not None and time.time() - start >= config.time_budget:
            logger.warning('time budget of %.0fs exhausted at step %d of %d', config.time_budget,
                           step, config.max_steps)
            completed = False
            break
        rates = set_learning_rates(optimizers, step, config)
        batch_x, batch_y = stream_x.next(), stream_y.next()
        terms = joint_step(models, optimizers, batch_x, batch_y, config, step=step, out_dir=out_dir)
        history.append(log.record(step, terms, rates))
        step += 1
        models.global_step = step

        if step % config.checkpoint_interval == 0 or step == config.max_steps:
            path = os.path.join(out_dir, 'checkpoint_{:06d}.pth'.format(step))
            save_checkpoint(path, models, optimizers, step=step, config=config, extra={'stage': 'joint'})
            dumper.histogram(prefix='weights/', t=step)
            _write_samples(dumper, models, batch_y, dev, step)
            logger.info('checkpoint written to %s', path)

    final = save_checkpoint(os.path.join(out_dir, 'checkpoint_final.pth'), models, optimizers, step=step,
                            config=config, extra={'stage': 'joint', 'completed': completed})
    log.close()
    writer.close()
    return TrainResult(final, out_dir, history, completed, step)
