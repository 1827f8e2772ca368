import os

import pytest

from eyeshift.config import AblationFlags, LossWeights, TrainConfig, config_diff, load_train_config
from eyeshift.errors import ConfigError

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def test_defaults():
    config = TrainConfig()
    assert (config.beta1, config.beta2) == (0.5, 0.999)
    assert config.lr_pam == 5e-4 and config.lr_refiner == 4e-4
    assert config.lr_generator == config.lr_discriminator == 1e-4
    assert config.warm_steps == config.max_steps // 2 == 2000
    assert config.checkpoint_interval == 500
    assert config.weights == LossWeights(1.0, 1.0, 1.0, 1.0, 0.1)
    assert config.flags.label() == 'full'


def test_reference_recipe_matches_defaults():
    assert load_train_config(os.path.join(ROOT, 'configs', 'train_desk.yaml')) == TrainConfig()


def test_profile_defaults_then_overrides():
    config = load_train_config(overrides={'profile': 'mini', 'batch_size': None})
    assert config.batch_size == 2 and config.max_steps == 4 and config.warm_steps == 2
    config = load_train_config(overrides={'profile': 'mini', 'batch_size': 3})
    assert config.batch_size == 3


def test_max_steps_override_rescales_warm(tmp_path):
    path = tmp_path / 'c.yaml'
    path.write_text('max_steps: 100\nwarm_steps: 10\n')
    assert load_train_config(str(path)).warm_steps == 10
    assert load_train_config(str(path), {'max_steps': 40}).warm_steps == 20
    assert TrainConfig().replace(max_steps=10).warm_steps == 5


def test_nested_sections_from_yaml(tmp_path):
    path = tmp_path / 'c.yaml'
    path.write_text('weights:\n  lambda5: 0.5\nflags:\n  use_cfm: false\n')
    config = load_train_config(str(path))
    assert config.weights.lambda5 == 0.5 and config.weights.lambda1 == 1.0
    assert config.flags.label() == 'W/O D'


def test_bad_files(tmp_path):
    path = tmp_path / 'c.yaml'
    path.write_text('max_steps: [1, 2\n')
    with pytest.raises(ConfigError):
        load_train_config(str(path))
    path.write_text('- 1\n- 2\n')
    with pytest.raises(ConfigError):
        load_train_config(str(path))
    path.write_text('max_stepz: 3\n')
    with pytest.raises(ConfigError):
        load_train_config(str(path))


@pytest.mark.parametrize('changes', [
    {'lr_generator': 0.0},
    {'batch_size': 0},
    {'max_steps': 10, 'warm_steps': 11},
    {'checkpoint_interval': 0},
    {'beta1': 1.0},
])
def test_invalid_values(changes):
    with pytest.raises(ConfigError):
        TrainConfig(**changes)


def test_negative_weight():
    with pytest.raises(ConfigError):
        LossWeights(lambda3=-1.0)


def test_base_rates():
    config = TrainConfig()
    assert config.base_rate('g_pre') == 5e-4
    assert config.base_rate('g_h') == 4e-4
    assert config.base_rate('d_h') == config.base_rate('e_r') == 1e-4
    with pytest.raises(ConfigError):
        config.base_rate('nope')


def test_ablation_flags():
    flags = AblationFlags.without(['A', 'C'])
    assert not flags.use_pam_content and not flags.use_latent_recon
    assert flags.use_synthesis_as_training and flags.use_cfm
    assert flags.disabled_axes() == ['A', 'C']
    assert flags.label() == 'W/O A,C'
    assert AblationFlags.from_dict(flags.to_dict()) == flags
    with pytest.raises(ConfigError):
        AblationFlags.without(['E'])


def test_to_dict_is_plain():
    d = TrainConfig().to_dict()
    assert d['weights']['lambda5'] == 0.1
    assert d['flags']['use_cfm'] is True


def test_config_diff():
    a = {'x': 1, 'n': {'y': 2, 'z': 3}}
    b = {'x': 1, 'n': {'y': 5, 'z': 3}, 'w': 0}
    assert config_diff(a, b) == ['n.y: 2 != 5', 'w: None != 0']
    assert config_diff(a, a) == []
