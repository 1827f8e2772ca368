"""Training configuration: loss weights, ablation flags and the TrainConfig dataclass.

Defaults live here; a YAML file (``configs/train_desk.yaml``) may override any field and
command-line flags override the file.
"""

import dataclasses
from dataclasses import dataclass, field

import yaml

from eyeshift.errors import ConfigError

ABLATION_AXES = ('A', 'B', 'C', 'D')


@dataclass(frozen=True)
class LossWeights(object):
    lambda1: float = 1.0   # G_x reconstruction
    lambda2: float = 1.0   # D_x on the synthesized corrected sample, G_y side
    lambda3: float = 1.0   # G_y reconstruction
    lambda4: float = 1.0   # G_y reconstruction of the synthesized sample
    lambda5: float = 0.1   # content-code reconstruction

    def __post_init__(self):
        for name, value in self.to_dict().items():
            if value < 0:
                raise ConfigError('loss weight {} must be nonnegative, got {}'.format(name, value))

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class AblationFlags(object):
    use_pam_content: bool = True            # A
    use_synthesis_as_training: bool = True  # B
    use_latent_recon: bool = True           # C
    use_cfm: bool = True                    # D

    AXIS_FIELDS = {'A': 'use_pam_content', 'B': 'use_synthesis_as_training',
                   'C': 'use_latent_recon', 'D': 'use_cfm'}

    @classmethod
    def without(cls, axes):
        """Flags with every axis in *axes* (e.g. ``['A', 'C']``) switched off."""
        off = {}
        for axis in axes:
            if axis not in cls.AXIS_FIELDS:
                raise ConfigError('unknown ablation axis %r (expected one of A, B, C, D)' % axis)
            off[cls.AXIS_FIELDS[axis]] = False
        return cls(**off)

    def disabled_axes(self):
        return [axis for axis in ABLATION_AXES if not getattr(self, self.AXIS_FIELDS[axis])]

    def label(self):
        axes = self.disabled_axes()
        return 'full' if not axes else 'W/O ' + ','.join(axes)

    def to_dict(self):
        return {name: getattr(self, name) for name in self.AXIS_FIELDS.values()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: bool(v) for k, v in d.items()})


# per-profile defaults applied before file and flag overrides
PROFILE_DEFAULTS = {
    'desk': {},
    'hq': {'batch_size': 8},
    'mini': {'batch_size': 2, 'max_steps': 4, 'warm_steps': 2, 'pam_steps': 2,
             'checkpoint_interval': 2, 'log_interval': 1},
}


@dataclass
class TrainConfig(object):
    profile: str = 'desk'
    data_root: str = 'synthgaze'
    out_dir: str = None
    seed: int = 0

    batch_size: int = 16
    beta1: float = 0.5
    beta2: float = 0.999
    lr_pam: float = 5e-4
    lr_refiner: float = 4e-4
    lr_generator: float = 1e-4
    lr_discriminator: float = 1e-4

    pam_steps: int = 500
    max_steps: int = 4000
    warm_steps: int = None        # None: half of max_steps
    checkpoint_interval: int = 500
    log_interval: int = 10
    time_budget: float = None     # seconds of wall clock for train_joint, None for unlimited

    num_workers: int = 0
    deterministic: bool = True
    device: str = None            # None: cuda when available

    weights: LossWeights = field(default_factory=LossWeights)
    flags: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.flags, dict):
            self.flags = AblationFlags.from_dict(self.flags)
        if self.warm_steps is None:
            self.warm_steps = self.max_steps // 2
        self.validate()

    def validate(self):
        for name in ('lr_pam', 'lr_refiner', 'lr_generator', 'lr_discriminator'):
            if not getattr(self, name) > 0:
                raise ConfigError('{} must be > 0, got {}'.format(name, getattr(self, name)))
        if self.batch_size < 1:
            raise ConfigError('batch_size must be >= 1, got {}'.format(self.batch_size))
        if self.max_steps < 0 or self.pam_steps < 0:
            raise ConfigError('step counts must be >= 0')
        if not 0 <= self.warm_steps <= self.max_steps:
            raise ConfigError('warm_steps ({}) must lie in [0, max_steps ({})]'.format(
                self.warm_steps, self.max_steps))
        if self.checkpoint_interval < 1 or self.log_interval < 1:
            raise ConfigError('checkpoint_interval and log_interval must be >= 1')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError('Adam betas must lie in [0, 1)')

    def base_rate(self, model_tag):
        if model_tag == 'g_pre':
            return self.lr_pam
        elif model_tag == 'g_h':
            return self.lr_refiner
        elif model_tag in ('d_x', 'd_y', 'd_h'):
            return self.lr_discriminator
        elif model_tag in ('g_x', 'g_y', 'e_r'):
            return self.lr_generator
        raise ConfigError('no learning rate for model %r' % model_tag)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d['weights'] = self.weights.to_dict()
        d['flags'] = self.flags.to_dict()
        return d

    def replace(self, **changes):
        if 'max_steps' in changes and 'warm_steps' not in changes:
            changes['warm_steps'] = None
        return dataclasses.replace(self, **changes)


def _field_names():
    return {f.name for f in dataclasses.fields(TrainConfig)}


def load_train_config(path=None, overrides=None):
    """Build a TrainConfig from profile defaults, then the YAML file at PATH, then OVERRIDES.

    Overrides whose value is None are ignored, so argparse namespaces can be passed
    through unchanged. Unknown keys raise ConfigError.
    """
    values = {}
    if path is not None:
        try:
            with open(path, 'r') as f:
                loaded = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError('cannot parse config file {}: {}'.format(path, e))
        if not isinstance(loaded, dict):
            raise ConfigError('config file {} must hold a mapping'.format(path))
        values.update(loaded)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if 'max_steps' in overrides and 'warm_steps' not in overrides:
        # a new budget keeps the constant-then-linear shape
        overrides['warm_steps'] = None
    values.update(overrides)

    unknown = set(values) - _field_names()
    if unknown:
        raise ConfigError('unknown config keys: {}'.format(', '.join(sorted(unknown))))

    profile = values.get('profile', 'desk')
    merged = dict(PROFILE_DEFAULTS.get(profile, {}))
    merged.update(values)
    try:
        return TrainConfig(**merged)
    except TypeError as e:
        raise ConfigError('invalid config: {}'.format(e))


def config_diff(a, b, prefix=''):
    """List of 'key: a != b' strings between two nested dicts."""
    diff = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            diff += config_diff(va, vb, prefix + key + '.')
        elif va != vb:
            diff.append('{}{}: {!r} != {!r}'.format(prefix, key, va, vb))
    return diff
