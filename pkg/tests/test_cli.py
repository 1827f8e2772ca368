import argparse
import json
import os

import pytest

from data.load_synthgaze import load_manifest
from data.utils import read_png
from eyeshift import cli
from eyeshift.training import load_checkpoint, save_checkpoint


@pytest.fixture
def mini_ckpt(mini_models, tmp_path):
    mini_models.global_step = 1
    return save_checkpoint(str(tmp_path / 'mini.pth'), mini_models, step=1)


@pytest.fixture
def portrait(mini_manifest):
    return mini_manifest.path(mini_manifest.select('Y', 'test')[0])


def portrait_args(ckpt, image):
    return ['--ckpt', ckpt, '--in', image, '--mask-center-l', '6,4', '--mask-center-r', '6,12']


def test_parse_helpers():
    assert cli.parse_center('52,40') == (52, 40)
    assert cli.parse_alphas('-0.5,0,1.5') == [-0.5, 0.0, 1.5]
    assert cli.parse_axes('a, d') == ['A', 'D']
    for fn, text in ((cli.parse_center, '52'), (cli.parse_alphas, '0,x'), (cli.parse_axes, 'E')):
        with pytest.raises(argparse.ArgumentTypeError):
            fn(text)


def test_usage_errors_exit_2():
    assert cli.run([]) == 2
    assert cli.run(['train']) == 2
    assert cli.run(['animate', '--alphas', '0,q']) == 2


def test_help_exits_0(capsys):
    assert cli.run(['--help']) == 0
    assert 'generate-data' in capsys.readouterr().out


def test_generate_data(tmp_path):
    out = str(tmp_path / 'data')
    assert cli.run(['generate-data', '--out', out, '--count-x', '2', '--count-y', '2', '--seed', '1']) == 0
    manifest = load_manifest(out)
    assert manifest.counts == {'X': {'train': 1, 'test': 1}, 'Y': {'train': 1, 'test': 1}}


def test_generate_data_profile_without_renderer(tmp_path):
    assert cli.run(['generate-data', '--out', str(tmp_path), '--count-x', '1', '--count-y', '1',
                    '--profile', 'mini']) == 2


def test_correct(mini_ckpt, portrait, tmp_path):
    out = str(tmp_path / 'out' / 'corrected.png')
    assert cli.run(['correct'] + portrait_args(mini_ckpt, portrait) + ['--out', out]) == 0
    assert read_png(out).shape == (3, 16, 16)
    assert os.path.exists(str(tmp_path / 'out' / 'corrected.yaml'))


def test_correct_failures(mini_ckpt, portrait, tmp_path):
    out = str(tmp_path / 'c.png')
    missing = str(tmp_path / 'missing.pth')
    assert cli.run(['correct'] + portrait_args(missing, portrait) + ['--out', out]) == 1
    bad_mask = ['correct', '--ckpt', mini_ckpt, '--in', portrait, '--mask-center-l', '1,1',
                '--mask-center-r', '6,12', '--out', out]
    assert cli.run(bad_mask) == 1


def test_animate(mini_ckpt, portrait, tmp_path):
    out = str(tmp_path / 'anim')
    argv = ['animate'] + portrait_args(mini_ckpt, portrait) + [
        '--alphas=-0.5,0,1.5', '--layout', 'strip', '--gif', '--out', out, '--stem', 'face']
    assert cli.run(argv) == 0
    assert sorted(os.listdir(out)) == ['face.gif', 'face.yaml', 'face_strip.png']
    assert read_png(os.path.join(out, 'face_strip.png')).shape == (3, 16, 48)


def test_eval(mini_ckpt, mini_manifest, tmp_path):
    out = str(tmp_path / 'eval')
    argv = ['eval', '--ckpt', mini_ckpt, '--data', mini_manifest.root, '--out', out,
            '--n-warmup', '0', '--n-timed', '1']
    assert cli.run(argv) == 0
    with open(os.path.join(out, 'report.json')) as f:
        report = json.load(f)
    assert report['sample_counts'] == {'X': 2, 'Y': 2}
    assert report['config']['ckpt'] == mini_ckpt


def test_pretrain_and_train(mini_manifest, tmp_path):
    pam_dir = str(tmp_path / 'pam')
    common = ['--data', mini_manifest.root, '--profile', 'mini', '--device', 'cpu']
    assert cli.run(['pretrain'] + common + ['--steps', '1', '--out', pam_dir]) == 0
    pam = os.path.join(pam_dir, 'pam.pth')
    assert load_checkpoint(pam)['step'] == 1

    run_dir = str(tmp_path / 'run')
    argv = ['train'] + common + ['--pam', pam, '--max-steps', '2', '--ablate', 'C', '--out', run_dir]
    assert cli.run(argv) == 0
    final = load_checkpoint(os.path.join(run_dir, 'checkpoint_final.pth'))
    assert final['step'] == 2
    assert final['flags']['use_latent_recon'] is False
    assert final['config']['warm_steps'] == 1


def test_train_profile_mismatch(mini_manifest, tmp_path):
    argv = ['train', '--data', mini_manifest.root, '--device', 'cpu', '--out', str(tmp_path)]
    assert cli.run(argv) == 2


def test_runtime_failure_exits_1(monkeypatch, caplog):
    def fail(args):
        raise RuntimeError('CUDA error: invalid device ordinal')
    monkeypatch.setitem(cli.COMMANDS, 'eval', fail)
    assert cli.run(['eval', '--ckpt', 'c.pth', '--data', 'd']) == 1
    assert 'invalid device ordinal' in caplog.text
