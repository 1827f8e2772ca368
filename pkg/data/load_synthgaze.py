import json
import logging
import math
import os
from dataclasses import dataclass, field

import torch
from torch.utils import data
from torch.utils.data.dataloader import DataLoader

from data.utils import read_png
from eyeshift.errors import ConfigError, IntegrityError
from eyeshift.imagecore import MaskPair

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
SCHEMA_VERSION = 1
DOMAINS = ('X', 'Y')
SPLITS = ('train', 'test')


def held_out_count(n, fraction=0.1, minimum=8):
    """Held-out records for a domain of *n*: *fraction* of it, at least *minimum*, never all of it."""
    return max(0, min(max(minimum, int(math.ceil(fraction * n))), n - 1))


@dataclass(frozen=True)
class ManifestRecord(object):
    image_path: str          # relative to the dataset root
    resolution: tuple
    masks: MaskPair          # high-resolution eye rectangles
    domain: str
    split: str
    gaze: tuple = None       # ((dx, dy), (dx, dy)) per eye; None for imported images
    seed: int = None

    def to_dict(self):
        return {'image_path': self.image_path,
                'resolution': list(self.resolution),
                'masks': self.masks.to_dict(),
                'domain': self.domain,
                'split': self.split,
                'gaze': None if self.gaze is None else [list(g) for g in self.gaze],
                'seed': self.seed}

    @classmethod
    def from_dict(cls, d):
        gaze = d.get('gaze')
        return cls(image_path=d['image_path'],
                   resolution=tuple(d['resolution']),
                   masks=MaskPair.from_dict(d['masks']),
                   domain=d['domain'],
                   split=d['split'],
                   gaze=None if gaze is None else tuple(tuple(float(v) for v in g) for g in gaze),
                   seed=d.get('seed'))


@dataclass
class DomainManifest(object):
    profile: str
    seed: int
    records: list
    config: dict = field(default_factory=dict)
    root: str = field(default=None, compare=False)

    @property
    def counts(self):
        counts = {d: {s: 0 for s in SPLITS} for d in DOMAINS}
        for r in self.records:
            counts[r.domain][r.split] += 1
        return counts

    def select(self, domain=None, split=None):
        return [r for r in self.records
                if (domain is None or r.domain == domain) and (split is None or r.split == split)]

    def path(self, record):
        return os.path.join(self.root or '.', record.image_path)

    def validate(self, check_files=True):
        """Raise if a domain is empty, a record is malformed or (optionally) an image is missing or mis-sized."""
        paths = set()
        for r in self.records:
            if r.domain not in DOMAINS or r.split not in SPLITS:
                raise IntegrityError('bad domain/split in record {}'.format(r.image_path))
            if r.image_path in paths:
                raise IntegrityError('image {} listed twice'.format(r.image_path))
            paths.add(r.image_path)
            if check_files:
                if not os.path.isfile(self.path(r)):
                    raise IntegrityError('image {} is missing'.format(self.path(r)))
                image = read_png(self.path(r))
                if tuple(image.shape[-2:]) != tuple(r.resolution):
                    raise IntegrityError('{} decodes to {} instead of {}'.format(
                        r.image_path, tuple(image.shape[-2:]), tuple(r.resolution)))
        for d in DOMAINS:
            if not self.select(d):
                raise ConfigError('manifest has no {}-domain records'.format(d))

    def to_dict(self):
        return {'schema_version': SCHEMA_VERSION,
                'profile': self.profile,
                'seed': self.seed,
                'counts': self.counts,
                'config': self.config,
                'records': [r.to_dict() for r in self.records]}


def save_manifest(manifest, path=None):
    path = path or os.path.join(manifest.root, MANIFEST_NAME)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def load_manifest(path):
    """Load a manifest from a dataset directory or a manifest file."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    with open(path, 'r', encoding='utf-8') as f:
        try:
            d = json.load(f)
        except ValueError as e:
            raise IntegrityError('manifest {} is not valid JSON: {}'.format(path, e))
    if not isinstance(d, dict) or d.get('schema_version') != SCHEMA_VERSION:
        raise IntegrityError('manifest {} has unsupported schema version {!r}'.format(
            path, d.get('schema_version') if isinstance(d, dict) else None))
    try:
        records = [ManifestRecord.from_dict(r) for r in d['records']]
        return DomainManifest(profile=d['profile'], seed=d['seed'], records=records,
                              config=d.get('config', {}), root=os.path.dirname(os.path.abspath(path)))
    except (KeyError, TypeError) as e:
        raise IntegrityError('manifest {} is malformed: {}'.format(path, e))


class SynthGazeDataset(data.Dataset):
    """Portraits of one domain/split of a manifest, as dicts of image, masks and gaze."""

    def __init__(self, manifest, domain=None, split='train'):
        self.manifest = manifest
        self.records = manifest.select(domain, split)
        if not self.records:
            raise ConfigError('no {} records for domain {} in the manifest'.format(split, domain or 'any'))

    def __len__(self):
        return len(self.records)

    def __getitem__(self, index):
        record = self.records[index]
        image = read_png(self.manifest.path(record))
        if tuple(image.shape[-2:]) != tuple(record.resolution):
            raise IntegrityError('{} decodes to {} instead of {}'.format(
                record.image_path, tuple(image.shape[-2:]), tuple(record.resolution)))
        if record.gaze is None:
            gaze = torch.full((2, 2), float('nan'))
        else:
            gaze = torch.tensor(record.gaze, dtype=torch.float32)
        return {'image': image, 'masks': record.masks, 'gaze': gaze, 'index': index}


def collate_portraits(batch):
    return {'image': torch.stack([b['image'] for b in batch]),
            'masks': [b['masks'] for b in batch],
            'gaze': torch.stack([b['gaze'] for b in batch]),
            'index': torch.tensor([b['index'] for b in batch])}


def get_synthgaze_loader(manifest, domain, split='train', batch_size=16, shuffle=True,
                         seed=0, num_workers=0, drop_last=True):
    dataset = SynthGazeDataset(manifest, domain, split)
    if batch_size > len(dataset):
        logger.warning('batch size %d exceeds the %d %s/%s records; using %d',
                       batch_size, len(dataset), domain, split, len(dataset))
        batch_size = len(dataset)

    generator = torch.Generator()
    generator.manual_seed(seed)
    logger.info('[%s %s] dataset size: %d', domain or 'XY', split.upper(), len(dataset))
    loader = DataLoader(dataset=dataset,
                        batch_size=batch_size,
                        shuffle=shuffle,
                        num_workers=num_workers,
                        collate_fn=collate_portraits,
                        drop_last=drop_last,
                        generator=generator)
    loader.name = 'SynthGaze_{}_{}'.format(domain or 'XY', split)
    return loader
