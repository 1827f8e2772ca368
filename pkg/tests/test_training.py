import dataclasses
import os

import pytest
import torch

from data.load_synthgaze import get_synthgaze_loader
from eyeshift import losses, training
from eyeshift.config import AblationFlags, TrainConfig
from eyeshift.errors import ConfigError, IntegrityError, TrainingError
from eyeshift.pytorch_utils import parameter_checksum
from networks import build_model_set


def batch(manifest, domain, n=2):
    return next(iter(get_synthgaze_loader(manifest, domain, batch_size=n, shuffle=False)))


def state_equal(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# ***** Schedules *****

def test_lr_schedule_reference_values():
    config = TrainConfig()
    assert training.lr_schedule(0, config, 'd_x') == 1e-4
    assert training.lr_schedule(1999, config, 'g_h') == 4e-4
    assert training.lr_schedule(3000, config, 'g_y') == pytest.approx(5e-5)
    assert training.lr_schedule(4000, config, 'd_h') == 0.0
    assert training.lr_schedule(4000, config, 'g_pre') == 5e-4


def test_lr_schedule_monotone():
    config = TrainConfig(max_steps=50)
    rates = [training.lr_schedule(s, config, 'e_r') for s in range(51)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_lr_schedule_without_decay_span():
    config = TrainConfig(max_steps=10, warm_steps=10)
    assert training.lr_schedule(9, config, 'g_x') == 1e-4
    assert training.lr_schedule(10, config, 'g_x') == 0.0


def test_set_learning_rates(mini_models, mini_config):
    optimizers = training.make_optimizers(mini_models, mini_config)
    assert set(optimizers) == set(training.JOINT_MODELS)
    rates = training.set_learning_rates(optimizers, 3, mini_config)
    assert rates['g_h'] == pytest.approx(4e-4 / 2)
    assert optimizers['g_h'].param_groups[0]['lr'] == rates['g_h']


# ***** Checkpoints *****

def test_checkpoint_round_trip(mini_models, mini_config, tmp_path):
    optimizers = training.make_optimizers(mini_models, mini_config)
    path = training.save_checkpoint(str(tmp_path / 'c.pth'), mini_models, optimizers, step=7, config=mini_config)
    state = training.load_checkpoint(path, 'mini')
    for name, net in mini_models.named_networks():
        assert state_equal(state['models'][name], net.state_dict())
    assert 'weight_u' in ''.join(state['models']['d_x'])
    assert state['step'] == 7 and state['config']['profile'] == 'mini'

    restored = training.restore_model_set(state)
    assert parameter_checksum(restored) == parameter_checksum(mini_models)
    assert restored.global_step == 7
    assert not os.path.exists(path + '.tmp')


def test_checkpoint_keeps_optimizer_moments(mini_models, mini_config, mini_manifest, tmp_path):
    optimizers = training.make_optimizers(mini_models, mini_config)
    training.joint_step(mini_models, optimizers, batch(mini_manifest, 'X'), batch(mini_manifest, 'Y'), mini_config)
    path = training.save_checkpoint(str(tmp_path / 'c.pth'), mini_models, optimizers, step=1)
    saved = training.load_checkpoint(path)['optimizers']['g_x']['state']
    live = optimizers['g_x'].state_dict()['state']
    assert saved.keys() == live.keys()
    for k in live:
        assert torch.equal(saved[k]['exp_avg'], live[k]['exp_avg'])


def test_checkpoint_profile_mismatch(mini_models, tmp_path):
    path = training.save_checkpoint(str(tmp_path / 'c.pth'), mini_models)
    with pytest.raises(ConfigError) as e:
        training.load_checkpoint(path, 'desk')
    assert 'image_size' in str(e.value)


def test_checkpoint_corruption(mini_models, tmp_path):
    path = training.save_checkpoint(str(tmp_path / 'c.pth'), mini_models)
    with open(path, 'rb') as f:
        blob = f.read()
    truncated = str(tmp_path / 'truncated.pth')
    with open(truncated, 'wb') as f:
        f.write(blob[:len(blob) // 2])
    with pytest.raises(IntegrityError):
        training.load_checkpoint(truncated)

    container = torch.load(path, weights_only=False)
    payload = bytearray(container['payload'])
    payload[len(payload) // 2] ^= 0xFF
    container['payload'] = bytes(payload)
    tampered = str(tmp_path / 'tampered.pth')
    torch.save(container, tampered)
    with pytest.raises(IntegrityError):
        training.load_checkpoint(tampered)

    foreign = str(tmp_path / 'foreign.pth')
    torch.save({'state_dict': {}}, foreign)
    with pytest.raises(IntegrityError):
        training.load_checkpoint(foreign)
    with pytest.raises(FileNotFoundError):
        training.load_checkpoint(str(tmp_path / 'missing.pth'))


# ***** Joint step *****

def test_generator_forward_outputs(mini_models, mini_manifest):
    bx, by = batch(mini_manifest, 'X'), batch(mini_manifest, 'Y')
    out = training.generator_forward(mini_models, bx['image'], bx['masks'], by['image'], by['masks'])
    assert out['x_tilde'].shape == (2, 3, 8, 8)
    assert out['y_hat_h'].shape == (2, 3, 16, 16)
    assert out['y_hx'].shape == (2, 3, 16, 16)
    assert not out['y_hx'].requires_grad and not out['y_x'].requires_grad
    assert mini_models.training


def test_synthesis_path_sends_no_gradient_to_correction_generator(mini_models, mini_config, mini_manifest):
    bx, by = batch(mini_manifest, 'X'), batch(mini_manifest, 'Y')
    out = training.generator_forward(mini_models, bx['image'], bx['masks'], by['image'], by['masks'])
    terms = training.generator_terms(mini_models, out)
    losses.total_g_y(terms, mini_config.weights).backward()
    for p in mini_models.g_x.parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0
    assert any(p.grad is not None and torch.count_nonzero(p.grad) > 0 for p in mini_models.g_y.parameters())


def test_correction_loss_reaches_correction_generator(mini_models, mini_config, mini_manifest):
    bx, by = batch(mini_manifest, 'X'), batch(mini_manifest, 'Y')
    out = training.generator_forward(mini_models, bx['image'], bx['masks'], by['image'], by['masks'])
    losses.total_g_x(training.generator_terms(mini_models, out), mini_config.weights).backward()
    assert any(p.grad is not None and torch.count_nonzero(p.grad) > 0 for p in mini_models.g_x.parameters())


def test_joint_step_updates_and_logs(mini_models, mini_config, mini_manifest):
    optimizers = training.make_optimizers(mini_models, mini_config)
    before = {name: parameter_checksum(getattr(mini_models, name)) for name in ('g_x', 'g_y', 'd_x', 'g_pre')}
    logged = training.joint_step(mini_models, optimizers, batch(mini_manifest, 'X'),
                                 batch(mini_manifest, 'Y'), mini_config)
    assert set(logged) == set(training.LOSS_TERMS)
    assert all(isinstance(v, float) for v in logged.values())
    assert logged['d_x'] > 0 and logged['rec_yx'] > 0
    for name in ('g_x', 'g_y', 'd_x'):
        assert parameter_checksum(getattr(mini_models, name)) != before[name]
    assert all(p.requires_grad for p in mini_models.d_x.parameters())


@pytest.mark.parametrize('axes,zeros', [
    (['B'], ('adv_yx', 'rec_yx')),
    (['C'], ('fp',)),
    (['D'], ('d_h', 'adv_h_x', 'adv_h_y')),
])
def test_ablated_terms_log_zero(mini_profile, mini_config, mini_manifest, axes, zeros):
    flags = AblationFlags.without(axes)
    models = build_model_set(mini_profile, flags)
    config = mini_config.replace(flags=flags)
    logged = training.joint_step(models, training.make_optimizers(models, config),
                                 batch(mini_manifest, 'X'), batch(mini_manifest, 'Y'), config)
    for name in zeros:
        assert logged[name] == 0.0
    assert logged['rec_y'] > 0


def test_nonfinite_batch_is_dumped(mini_models, mini_config, mini_manifest, tmp_path):
    bx = batch(mini_manifest, 'X')
    bx['image'] = torch.full_like(bx['image'], float('nan'))
    with pytest.raises(TrainingError):
        training.joint_step(mini_models, training.make_optimizers(mini_models, mini_config), bx,
                            batch(mini_manifest, 'Y'), mini_config, step=3, out_dir=str(tmp_path))
    assert os.path.exists(str(tmp_path / 'nonfinite_batch_000003.pt'))


# ***** Full runs on the miniature profile *****

def test_pretrain_zero_steps_keeps_initialization(mini_config, mini_manifest, tmp_path):
    result = training.pretrain_pam(mini_config.replace(pam_steps=0), mini_manifest, str(tmp_path / 'pam'))
    state = training.load_checkpoint(result.checkpoint)
    assert state_equal(state['models']['g_pre'], build_model_set('mini', seed=0).g_pre.state_dict())
    assert result.history == []


def test_pretrain_is_deterministic(mini_config, mini_manifest, tmp_path):
    config = mini_config.replace(pam_steps=3)
    a = training.pretrain_pam(config, mini_manifest, str(tmp_path / 'a'))
    b = training.pretrain_pam(config, mini_manifest, str(tmp_path / 'b'))
    assert [e['pre'] for e in a.history] == [e['pre'] for e in b.history]
    assert state_equal(training.load_checkpoint(a.checkpoint)['models']['g_pre'],
                       training.load_checkpoint(b.checkpoint)['models']['g_pre'])
    assert len(training.read_training_log(os.path.join(a.out_dir, 'pam_log.jsonl'))) == 3


def test_pretrain_rejects_foreign_manifest(mini_manifest, tmp_path):
    with pytest.raises(ConfigError):
        training.pretrain_pam(TrainConfig(device='cpu'), mini_manifest, str(tmp_path))


def test_train_joint_and_resume(mini_config, mini_manifest, tmp_path):
    pam = training.pretrain_pam(mini_config, mini_manifest, str(tmp_path / 'pam'))
    run = training.train_joint(mini_config, mini_manifest, pam.checkpoint, str(tmp_path / 'joint'))
    assert run.completed and run.step == 4
    for name in ('checkpoint_000002.pth', 'checkpoint_000004.pth', 'checkpoint_final.pth',
                 'train_log.jsonl', 'config.yaml', 'exp_scripts.tar.bz2'):
        assert os.path.exists(os.path.join(run.out_dir, name))

    log = training.read_training_log(os.path.join(run.out_dir, 'train_log.jsonl'))
    assert [e['step'] for e in log] == [0, 1, 2, 3]
    assert set(training.LOSS_TERMS) <= set(log[0])
    assert log[0]['lr_g_x'] == 1e-4 and log[3]['lr_g_x'] == pytest.approx(5e-5)

    # the content encoder stays frozen
    final = training.load_checkpoint(run.checkpoint, 'mini')
    assert state_equal(final['models']['g_pre'], training.load_checkpoint(pam.checkpoint)['models']['g_pre'])

    resumed = training.train_joint(mini_config, mini_manifest, resume=os.path.join(run.out_dir, 'checkpoint_000002.pth'),
                                   out_dir=str(tmp_path / 'resumed'))
    assert resumed.step == 4 and [e['step'] for e in resumed.history] == [2, 3]
    assert resumed.history[0]['lr_g_x'] == log[2]['lr_g_x']


def test_train_joint_time_budget(mini_config, mini_manifest, tmp_path):
    result = training.train_joint(mini_config.replace(time_budget=0.0), mini_manifest, out_dir=str(tmp_path))
    assert not result.completed and result.step == 0
    assert os.path.exists(result.checkpoint)


def _train_subset(manifest, per_domain):
    records = manifest.select('X', 'train')[:per_domain] + manifest.select('Y', 'train')[:per_domain]
    return dataclasses.replace(manifest, records=records)


def _moving_average(values, end, window=20):
    tail = values[max(0, end - window + 1):end + 1]
    return sum(tail) / len(tail)


@pytest.mark.slow
def test_pretrain_overfits_eight_portraits(desk_manifest, tmp_path):
    manifest = _train_subset(desk_manifest, 4)
    config = TrainConfig(device='cpu', batch_size=8, pam_steps=500, log_interval=100)
    result = training.pretrain_pam(config, manifest, str(tmp_path))
    pre = [e['pre'] for e in result.history]
    assert len(pre) == 500
    assert _moving_average(pre, len(pre) - 1) < 0.1


@pytest.mark.slow
def test_train_joint_reduces_reconstruction(desk_manifest, tmp_path):
    manifest = _train_subset(desk_manifest, 8)
    config = TrainConfig(device='cpu', batch_size=8, pam_steps=500, max_steps=2000,
                         checkpoint_interval=1000, log_interval=100)
    pam = training.pretrain_pam(config, manifest, str(tmp_path / 'pam'))
    run = training.train_joint(config, manifest, pam.checkpoint, str(tmp_path / 'joint'))
    rec_x = [e['rec_x'] for e in run.history]
    assert run.completed and len(rec_x) == 2000
    assert _moving_average(rec_x, len(rec_x) - 1) <= 0.5 * _moving_average(rec_x, 50)
