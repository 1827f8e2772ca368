"""Command-line interface: ``python3 gaze.py <command> [options]``.

Exit codes: 0 on success, 1 on runtime failures, 2 on usage or configuration errors.
"""

import argparse
import logging
import os
import sys

import numpy as np
import torch

from data.load_synthgaze import load_manifest
from data.synthgaze import generate_dataset
from data.utils import read_png, write_png
from eyeshift.ablation import run_ablation_suite
from eyeshift.config import ABLATION_AXES, AblationFlags, load_train_config
from eyeshift.errors import ConfigError, EyeshiftError, GeometryError
from eyeshift.evalsuite import evaluate
from eyeshift.experiment_tools import echo_config
from eyeshift.imagecore import MaskPair
from eyeshift.inference import AnimationSpec, PortraitSample, animate, correct_gaze, write_frames
from eyeshift.training import load_model_set, pretrain_pam, train_joint

logger = logging.getLogger(__name__)

PROFILES = ('desk', 'hq', 'mini')


def parse_center(text):
    try:
        row, col = [int(v) for v in text.split(',')]
    except ValueError:
        raise argparse.ArgumentTypeError('expected ROW,COL, got %r' % text)
    return (row, col)


def parse_alphas(text):
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError('expected comma-separated numbers, got %r' % text)


def parse_axes(text):
    axes = [a.strip().upper() for a in text.split(',') if a.strip()]
    for axis in axes:
        if axis not in ABLATION_AXES:
            raise argparse.ArgumentTypeError('unknown ablation axis %r (expected A, B, C or D)' % axis)
    return axes


def _add_common(p, profile=True):
    p.add_argument('--seed', type=int, default=None,
                   metavar='N', help='random seed')
    if profile:
        p.add_argument('--profile', type=str, default=None, choices=PROFILES,
                       help='architecture and resolution profile (default: desk)')


def _add_training(p):
    p.add_argument('--data', type=str, required=True,
                   metavar='DIR', help='dataset directory holding manifest.json')
    p.add_argument('--config', type=str, default=None,
                   metavar='YAML', help='training config file; flags override it')
    p.add_argument('--out', type=str, default=None,
                   metavar='DIR', help='run directory (default: a fresh numbered one under results/)')
    p.add_argument('--batch-size', type=int, default=None,
                   metavar='N', help='portraits per domain per step')
    p.add_argument('--device', type=str, default=None,
                   metavar='S', help='torch device (default: cuda when available)')
    _add_common(p)


def _add_portrait(p):
    p.add_argument('--ckpt', type=str, required=True,
                   metavar='PATH', help='joint training checkpoint')
    p.add_argument('--in', dest='input', type=str, required=True,
                   metavar='PNG', help='portrait at the profile resolution')
    p.add_argument('--mask-center-l', type=parse_center, required=True,
                   metavar='ROW,COL', help='left eye center in image pixels')
    p.add_argument('--mask-center-r', type=parse_center, required=True,
                   metavar='ROW,COL', help='right eye center in image pixels')
    _add_common(p, profile=False)


def build_parser():
    parser = argparse.ArgumentParser(prog='gaze.py', description='Unsupervised gaze correction and animation')
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    p = sub.add_parser('generate-data', help='render a synthetic two-domain portrait dataset')
    p.add_argument('--out', type=str, required=True,
                   metavar='DIR', help='output dataset directory')
    p.add_argument('--count-x', type=int, default=1000,
                   metavar='N', help='portraits looking at the camera')
    p.add_argument('--count-y', type=int, default=1000,
                   metavar='N', help='portraits looking elsewhere')
    p.add_argument('--test-fraction', type=float, default=0.1,
                   metavar='F', help='held-out fraction per domain (at least 8 records)')
    p.add_argument('--workers', type=int, default=1,
                   metavar='N', help='rendering processes')
    _add_common(p)

    p = sub.add_parser('pretrain', help='pretrain the mirror autoencoder on eye pairs')
    _add_training(p)
    p.add_argument('--steps', type=int, default=None,
                   metavar='N', help='pretraining steps')

    p = sub.add_parser('train', help='joint adversarial training')
    _add_training(p)
    p.add_argument('--pam', type=str, default=None,
                   metavar='PATH', help='mirror autoencoder checkpoint')
    p.add_argument('--resume', type=str, default=None,
                   metavar='PATH', help='joint checkpoint to resume from')
    p.add_argument('--max-steps', type=int, default=None,
                   metavar='N', help='training steps (decay starts at half of them unless configured)')
    p.add_argument('--time-budget', type=float, default=None,
                   metavar='SEC', help='stop after this many seconds of wall clock')
    p.add_argument('--ablate', type=parse_axes, default=None,
                   metavar='AXES', help='components to switch off, e.g. C or A,D')

    p = sub.add_parser('correct', help='redirect the gaze of one portrait to the camera')
    _add_portrait(p)
    p.add_argument('--out', type=str, required=True,
                   metavar='PNG', help='output image')
    p.add_argument('--full-frame', action='store_true',
                   help='write the whole generated frame instead of pasting eyes into the input')

    p = sub.add_parser('animate', help='gaze animation by angle-code interpolation')
    _add_portrait(p)
    p.add_argument('--alphas', type=parse_alphas, default=[0.0, 0.25, 0.5, 0.75, 1.0],
                   metavar='A,B,...', help='interpolation weights; use --alphas=-0.5,1.5 for negative values')
    p.add_argument('--layout', type=str, default='frames', choices=('frames', 'strip'),
                   help='one PNG per alpha or a single strip')
    p.add_argument('--gif', action='store_true',
                   help='also write an animated GIF')
    p.add_argument('--out', type=str, required=True,
                   metavar='DIR', help='output directory')
    p.add_argument('--stem', type=str, default=None,
                   metavar='S', help='file name stem (default: input file name)')

    p = sub.add_parser('eval', help='evaluate a checkpoint on the test split')
    p.add_argument('--ckpt', type=str, required=True,
                   metavar='PATH', help='joint training checkpoint')
    p.add_argument('--data', type=str, required=True,
                   metavar='DIR', help='dataset directory holding manifest.json')
    p.add_argument('--out', type=str, default=None,
                   metavar='DIR', help='directory for report.json (default: next to the checkpoint)')
    p.add_argument('--limit', type=int, default=None,
                   metavar='N', help='test records per domain')
    p.add_argument('--batch-size', type=int, default=16,
                   metavar='N', help='evaluation batch size')
    p.add_argument('--n-warmup', type=int, default=2,
                   metavar='N', help='untimed throughput runs')
    p.add_argument('--n-timed', type=int, default=10,
                   metavar='N', help='timed throughput runs')
    _add_common(p, profile=False)

    p = sub.add_parser('ablate', help='train and compare the full model with ablated variants')
    _add_training(p)
    p.add_argument('--axes', type=parse_axes, default=list(ABLATION_AXES),
                   metavar='AXES', help='components to ablate one at a time (default: A,B,C,D)')
    p.add_argument('--seeds', type=int, default=1,
                   metavar='N', help='seeds averaged per variant')
    p.add_argument('--max-steps', type=int, default=None,
                   metavar='N', help='joint training steps per variant')
    p.add_argument('--time-budget', type=float, default=None,
                   metavar='SEC', help='wall-clock budget per variant')
    p.add_argument('--limit', type=int, default=None,
                   metavar='N', help='test records per domain used in evaluation')
    return parser


def _banner(**entries):
    print('#' * 120)
    for name, value in entries.items():
        print('- {}: {}'.format(name, value))
    print('#' * 120)


def _seed(seed):
    seed = 0 if seed is None else seed
    torch.manual_seed(seed)
    np.random.seed(seed)
    return seed


def _train_config(args, **extra):
    overrides = {'profile': args.profile, 'seed': args.seed, 'batch_size': args.batch_size,
                 'device': args.device, 'out_dir': args.out, 'data_root': args.data}
    overrides.update(extra)
    return load_train_config(args.config, overrides)


def _portrait(args, models):
    profile = models.profile
    image = read_png(args.input)
    if tuple(image.shape[-2:]) != tuple(profile.image_size):
        raise GeometryError('{} is {}x{}, the checkpoint expects {}x{}'.format(
            args.input, image.shape[-2], image.shape[-1], *profile.image_size))
    masks = MaskPair.from_centers(args.mask_center_l, args.mask_center_r, profile.mask_size_high,
                                  profile.image_size)
    return PortraitSample(image, masks)


def _provenance(args):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items())}


def cmd_generate_data(args):
    manifest = generate_dataset(args.out, args.count_x, args.count_y, seed=_seed(args.seed),
                                profile=args.profile or 'desk', test_fraction=args.test_fraction,
                                workers=args.workers)
    _banner(**{'Dataset directory': args.out, 'Records': len(manifest.records), 'Counts': manifest.counts})


def cmd_pretrain(args):
    config = _train_config(args, pam_steps=args.steps)
    manifest = load_manifest(args.data)
    result = pretrain_pam(config, manifest, out_dir=config.out_dir)
    _banner(**{'Output directory': result.out_dir, 'Checkpoint': result.checkpoint})


def cmd_train(args):
    extra = {'max_steps': args.max_steps, 'time_budget': args.time_budget}
    if args.ablate:
        extra['flags'] = AblationFlags.without(args.ablate)
    config = _train_config(args, **extra)
    manifest = load_manifest(args.data)
    _banner(**{'Output directory': config.out_dir or 'results/', 'Variant': config.flags.label()})
    result = train_joint(config, manifest, args.pam, out_dir=config.out_dir, resume=args.resume)
    _banner(**{'Output directory': result.out_dir, 'Checkpoint': result.checkpoint,
               'Steps': result.step, 'Completed': result.completed})


def cmd_correct(args):
    _seed(args.seed)
    models = load_model_set(args.ckpt)
    out = correct_gaze(_portrait(args, models), models, full_frame=args.full_frame)
    write_png(args.out, out)
    stem = os.path.splitext(os.path.basename(args.out))[0]
    echo_config(os.path.dirname(os.path.abspath(args.out)), _provenance(args), filename=stem + '.yaml')
    _banner(**{'Corrected portrait': args.out})


def cmd_animate(args):
    _seed(args.seed)
    spec = AnimationSpec(tuple(args.alphas), layout=args.layout)
    models = load_model_set(args.ckpt)
    frames = animate(_portrait(args, models), spec, models)
    stem = args.stem or os.path.splitext(os.path.basename(args.input))[0]
    paths = write_frames(frames, spec, args.out, stem, gif=args.gif)
    echo_config(args.out, _provenance(args), filename=stem + '.yaml')
    _banner(**{'Output directory': args.out, 'Files': len(paths)})


def cmd_eval(args):
    _seed(args.seed)
    models = load_model_set(args.ckpt)
    manifest = load_manifest(args.data)
    report = evaluate(models, manifest, config=_provenance(args), batch_size=args.batch_size,
                      limit=args.limit, n_warmup=args.n_warmup, n_timed=args.n_timed)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.ckpt))
    os.makedirs(out_dir, exist_ok=True)
    path = report.save(os.path.join(out_dir, 'report.json'))
    print(report.format())
    _banner(**{'Report': path})


def cmd_ablate(args):
    config = _train_config(args, max_steps=args.max_steps, time_budget=args.time_budget)
    manifest = load_manifest(args.data)
    out_dir = config.out_dir or os.path.join('results', 'ablation')
    eval_kwargs = {'limit': args.limit}
    report = run_ablation_suite(config, args.axes, manifest, out_dir, seeds=args.seeds, eval_kwargs=eval_kwargs)
    print(report.format_table())
    _banner(**{'Output directory': out_dir, 'Partial': report.partial})


COMMANDS = {'generate-data': cmd_generate_data,
            'pretrain': cmd_pretrain,
            'train': cmd_train,
            'correct': cmd_correct,
            'animate': cmd_animate,
            'eval': cmd_eval,
            'ablate': cmd_ablate}


def run(argv=None):
    """Parse *argv* and dispatch; returns the process exit code."""
    logging.basicConfig(level=logging.INFO,
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error('configuration error: %s', e)
        return 2
    except (EyeshiftError, OSError, RuntimeError) as e:
        logger.error('%s: %s', type(e).__name__, e)
        return 1
    return 0


def main():
    sys.exit(run())
