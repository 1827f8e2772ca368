"""Ablation suite: the full model against variants with single components switched off."""

import dataclasses
import json
import logging
import os

import numpy as np

from eyeshift.config import ABLATION_AXES, AblationFlags
from eyeshift.errors import ConfigError
from eyeshift.evalsuite import EvalReport, evaluate
from eyeshift.training import load_model_set, pretrain_pam, train_joint

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ('gaze_error_after', 'fid_eyes', 'msssim_irrelevant', 'eye_recon_msssim',
                 'y_recon_msssim', 'probe_r2')


def variant_config(base, axes):
    """*base* with the components of *axes* switched off and nothing else changed."""
    flags = base.flags.to_dict()
    for axis in axes:
        if axis not in ABLATION_AXES:
            raise ConfigError('unknown ablation axis %r (expected one of A, B, C, D)' % axis)
        flags[AblationFlags.AXIS_FIELDS[axis]] = False
    return dataclasses.replace(base, flags=AblationFlags.from_dict(flags))


def _mean_metrics(reports):
    metrics = {}
    for name in EvalReport.METRICS:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        metrics[name] = float(np.mean(values)) if values else None
    return metrics


class AblationReport(object):
    """One row per variant (seed-averaged metrics) plus deltas against the full model."""

    def __init__(self, axes, seeds):
        self.axes = list(axes)
        self.seeds = seeds
        self.rows = []

    def add(self, label, metrics, completed, runs):
        self.rows.append({'variant': label, 'metrics': metrics, 'partial': not completed, 'runs': runs})

    @property
    def partial(self):
        return any(row['partial'] for row in self.rows)

    def row(self, label):
        for row in self.rows:
            if row['variant'] == label:
                return row
        raise KeyError(label)

    def deltas(self):
        full = self.row('full')['metrics']
        out = {}
        for row in self.rows:
            out[row['variant']] = {
                name: (None if row['metrics'][name] is None or full[name] is None
                       else row['metrics'][name] - full[name])
                for name in TABLE_COLUMNS}
        return out

    def format_table(self):
        header = '{:<12s}'.format('variant') + ''.join('{:>20s}'.format(c) for c in TABLE_COLUMNS)
        lines = [header, '-' * len(header)]
        for row in self.rows:
            cells = []
            for name in TABLE_COLUMNS:
                value = row['metrics'][name]
                cells.append('{:>20s}'.format('n/a' if value is None else '{:.4f}'.format(value)))
            label = row['variant'] + (' *' if row['partial'] else '')
            lines.append('{:<12s}'.format(label) + ''.join(cells))
        if self.partial:
            lines.append('* stopped by the time budget before max_steps')
        return '\n'.join(lines)

    def to_dict(self):
        return {'axes': self.axes, 'seeds': self.seeds, 'partial': self.partial,
                'rows': self.rows, 'deltas': self.deltas()}

    def save(self, out_dir):
        with open(os.path.join(out_dir, 'ablation.json'), 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write('\n')
        with open(os.path.join(out_dir, 'ablation.txt'), 'w') as f:
            f.write(self.format_table() + '\n')


def run_ablation_suite(base_config, axes, manifest, out_dir, seeds=1, pam_checkpoints=None, eval_kwargs=None):
    """Train and evaluate the full model and one variant per axis, with identical seeds and budgets.

    The mirror autoencoder does not depend on the ablation flags, so one pretraining
    run per seed is shared by every variant (pass *pam_checkpoints*, one per seed, to
    skip pretraining).
    """
    axes = sorted(set(axes))
    for axis in axes:
        if axis not in ABLATION_AXES:
            raise ConfigError('unknown ablation axis %r (expected one of A, B, C, D)' % axis)
    if seeds < 1:
        raise ConfigError('seeds must be >= 1')
    eval_kwargs = eval_kwargs or {}
    os.makedirs(out_dir, exist_ok=True)

    seed_list = [base_config.seed + i for i in range(seeds)]
    if pam_checkpoints is None:
        pam_checkpoints = [pretrain_pam(base_config.replace(seed=seed), manifest,
                                        out_dir=os.path.join(out_dir, 'pam', 'seed{}'.format(seed))).checkpoint
                           for seed in seed_list]

    report = AblationReport(axes, seeds)
    variants = [('full', [])] + [('W/O ' + axis, [axis]) for axis in axes]
    for label, off in variants:
        reports, runs, completed = [], [], True
        for seed, pam in zip(seed_list, pam_checkpoints):
            config = variant_config(base_config.replace(seed=seed), off)
            run_dir = os.path.join(out_dir, label.replace('W/O ', 'wo_'), 'seed{}'.format(seed))
            logger.info('training %s (seed %d) in %s', label, seed, run_dir)
            result = train_joint(config, manifest, pam, out_dir=run_dir)
            completed = completed and result.completed
            models = load_model_set(result.checkpoint)
            reports.append(evaluate(models, manifest, config=config.to_dict(), **eval_kwargs))
            runs.append({'seed': seed, 'checkpoint': result.checkpoint, 'steps': result.step,
                         'completed': result.completed})
        if not completed:
            logger.warning('%s did not finish within its time budget; the report is partial', label)
        report.add(label, _mean_metrics(reports), completed, runs)

    report.save(out_dir)
    return report
