import os
import sys

import numpy as np
import pytest
import torch

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from data.synthgaze import generate_dataset, import_images  # noqa: E402
from data.utils import write_png  # noqa: E402
from eyeshift.config import load_train_config  # noqa: E402
from eyeshift.imagecore import MaskPair  # noqa: E402
from networks import build_model_set, load_profile  # noqa: E402

MINI_LEFT = (6, 4)
MINI_RIGHT = (6, 12)


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run long training and acceptance tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running training or acceptance test')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_image(generator, shape):
    return torch.rand(shape, generator=generator) * 2 - 1


@pytest.fixture
def torch_gen():
    return torch.Generator().manual_seed(0)


@pytest.fixture(scope='session')
def mini_profile():
    return load_profile('mini')


@pytest.fixture(scope='session')
def desk_profile():
    return load_profile('desk')


@pytest.fixture
def mini_masks(mini_profile):
    return MaskPair.from_centers(MINI_LEFT, MINI_RIGHT, mini_profile.mask_size_high, mini_profile.image_size)


@pytest.fixture
def mini_models(mini_profile):
    return build_model_set(mini_profile, seed=0)


def make_mini_dataset(root, count_x=6, count_y=6, n_test=2, seed=0):
    """Imported random 16x16 portraits with fixed eye centers."""
    gen = torch.Generator().manual_seed(seed)
    src = os.path.join(root, 'src')
    entries = []
    for domain, count in (('X', count_x), ('Y', count_y)):
        for i in range(count):
            path = os.path.join(src, '{}_{}.png'.format(domain, i))
            write_png(path, random_image(gen, (3, 16, 16)))
            entries.append({'path': path, 'left_center': MINI_LEFT, 'right_center': MINI_RIGHT,
                            'domain': domain, 'split': 'test' if i >= count - n_test else 'train'})
    return import_images(entries, os.path.join(root, 'data'), profile='mini')


@pytest.fixture
def mini_manifest(tmp_path):
    return make_mini_dataset(str(tmp_path))


@pytest.fixture
def mini_config(tmp_path):
    return load_train_config(overrides={'profile': 'mini', 'device': 'cpu',
                                        'out_dir': str(tmp_path / 'run')})


@pytest.fixture(scope='session')
def desk_manifest(tmp_path_factory):
    root = str(tmp_path_factory.mktemp('desk_data'))
    return generate_dataset(root, 12, 12, seed=3, profile='desk', min_test=4)
