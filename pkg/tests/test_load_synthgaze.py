import json
import os

import pytest
import torch

from data.load_synthgaze import (MANIFEST_NAME, DomainManifest, SynthGazeDataset, get_synthgaze_loader,
                                 load_manifest, save_manifest)
from data.utils import read_png, write_png
from eyeshift.errors import ConfigError, IntegrityError


def test_manifest_round_trip(mini_manifest, tmp_path):
    path = save_manifest(mini_manifest, str(tmp_path / 'copy.json'))
    assert load_manifest(path) == mini_manifest


def test_manifest_on_disk_format(mini_manifest):
    with open(os.path.join(mini_manifest.root, MANIFEST_NAME), encoding='utf-8') as f:
        d = json.load(f)
    assert d['schema_version'] == 1
    assert d['profile'] == 'mini'
    assert d['counts']['Y']['test'] == 2
    assert set(d['records'][0]) == {'image_path', 'resolution', 'masks', 'domain', 'split', 'gaze', 'seed'}


def test_unknown_schema_version(mini_manifest):
    path = os.path.join(mini_manifest.root, MANIFEST_NAME)
    with open(path) as f:
        d = json.load(f)
    d['schema_version'] = 99
    with open(path, 'w') as f:
        json.dump(d, f)
    with pytest.raises(IntegrityError):
        load_manifest(path)


def test_malformed_manifest(tmp_path):
    path = tmp_path / MANIFEST_NAME
    path.write_text('{"schema_version": 1, "profile": "mini"')
    with pytest.raises(IntegrityError):
        load_manifest(str(path))
    path.write_text('{"schema_version": 1, "profile": "mini", "seed": 0, "records": [{"domain": "X"}]}')
    with pytest.raises(IntegrityError):
        load_manifest(str(tmp_path))


def test_validate_missing_and_missized_files(mini_manifest):
    record = mini_manifest.records[0]
    write_png(mini_manifest.path(record), torch.zeros(3, 8, 8))
    with pytest.raises(IntegrityError):
        mini_manifest.validate()
    os.remove(mini_manifest.path(record))
    with pytest.raises(IntegrityError):
        mini_manifest.validate()
    mini_manifest.validate(check_files=False)


def test_validate_needs_both_domains(mini_manifest):
    only_x = DomainManifest(profile='mini', seed=0, records=mini_manifest.select('X'), root=mini_manifest.root)
    with pytest.raises(ConfigError):
        only_x.validate()


def test_png_quantization(tmp_path):
    image = torch.linspace(-1, 1, 3 * 4 * 4).reshape(3, 4, 4)
    write_png(str(tmp_path / 'a.png'), image)
    assert torch.allclose(read_png(str(tmp_path / 'a.png')), image, atol=1 / 127.5)


def test_dataset_items(mini_manifest):
    dataset = SynthGazeDataset(mini_manifest, 'Y', 'test')
    assert len(dataset) == 2
    item = dataset[0]
    assert item['image'].shape == (3, 16, 16)
    assert torch.isnan(item['gaze']).all()
    assert item['masks'] == mini_manifest.select('Y', 'test')[0].masks


def test_dataset_gaze_from_generated(desk_manifest):
    item = SynthGazeDataset(desk_manifest, 'X', 'train')[0]
    assert item['gaze'].shape == (2, 2)
    assert item['gaze'].norm(dim=1).max() <= 1.0


def test_empty_selection(mini_manifest):
    with pytest.raises(ConfigError):
        SynthGazeDataset(DomainManifest('mini', 0, mini_manifest.select('X'), root=mini_manifest.root), 'Y')


def test_loader_batches(mini_manifest):
    loader = get_synthgaze_loader(mini_manifest, 'X', batch_size=3, seed=0)
    batch = next(iter(loader))
    assert batch['image'].shape == (3, 3, 16, 16)
    assert len(batch['masks']) == 3
    assert loader.name == 'SynthGaze_X_train'


def test_loader_shrinks_oversized_batch(mini_manifest):
    loader = get_synthgaze_loader(mini_manifest, 'Y', batch_size=32)
    assert loader.batch_size == 4


def test_loader_order_follows_seed(mini_manifest):
    first = [b['index'].tolist() for b in get_synthgaze_loader(mini_manifest, 'X', batch_size=2, seed=3)]
    again = [b['index'].tolist() for b in get_synthgaze_loader(mini_manifest, 'X', batch_size=2, seed=3)]
    assert first == again
