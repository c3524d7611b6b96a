"""
测试命令行
"""

import json
import os

import pytest
from click.testing import CliRunner

from sensiprint import __version__, nn
from sensiprint.bench import save_manifest
from sensiprint.cli import BREACH_EXIT_CODE, cli
from sensiprint.data import save_set

from conftest import quick_manifest


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def workdir(tmp_path, sigmoid_mlp, blobs):
    """模型 + 留出集"""
    nn.save_model(sigmoid_mlp, str(tmp_path / 'm.bin'))
    save_set(blobs, str(tmp_path / 'held.set'))
    return tmp_path


def _run(runner, *args):
    return runner.invoke(cli, [str(a) for a in args])


def test_version(runner):
    result = _run(runner, 'version')
    assert result.exit_code == 0
    assert f'v{__version__}' in result.output


def test_train_writes_model_and_sets(runner, tmp_path):
    out = tmp_path / 'mlp.bin'
    result = _run(runner, 'train', 'mlp', '--seed', 0, '-o', out, '--data-dir', tmp_path / 'sets')
    assert result.exit_code == 0, result.output
    assert out.exists()
    assert (tmp_path / 'sets' / 'held_out.set').exists()
    assert nn.digest(nn.load_model(str(out))).hex in result.output


def test_fingerprint_pipeline(runner, workdir):
    """生成 → 选择 → 指纹 → 验证: 完好模型返回 0, 被篡改模型返回 2"""
    d = workdir
    result = _run(runner, 'gen', d / 'm.bin', d / 'held.set', '-n', 6, '--itr-max', 10, '--lr', 0.01,
                  '-o', d / 'bag.bin')
    assert result.exit_code == 0, result.output

    result = _run(runner, 'select', d / 'm.bin', d / 'bag.bin', '-k', 3, '-o', d / 'sel.bin')
    assert result.exit_code == 0, result.output
    assert '神经元覆盖' in result.output

    result = _run(runner, 'fingerprint', d / 'm.bin', d / 'sel.bin', '--spec', 'p-dec-3', '-o', d / 'm.fp')
    assert result.exit_code == 0, result.output
    assert '3 条' in result.output

    result = _run(runner, 'verify', d / 'm.fp', '--model', d / 'm.bin')
    assert result.exit_code == 0, result.output
    assert '模型完好' in result.output

    attack = json.dumps({'kind': 'weight_noise', 'ratio': 1.0, 'seed': 3})
    result = _run(runner, 'attack', d / 'm.bin', attack, '-o', d / 't.bin')
    assert result.exit_code == 0, result.output
    assert 'noise-r1' in result.output

    result = _run(runner, 'verify', d / 'm.fp', '--model', d / 't.bin', '--json')
    assert result.exit_code == BREACH_EXIT_CODE
    assert json.loads(result.output)['detected'] is True


def test_random_selection(runner, workdir):
    d = workdir
    _run(runner, 'gen', d / 'm.bin', d / 'held.set', '-n', 4, '--itr-max', 0, '-o', d / 'bag.bin')
    result = _run(runner, 'select', d / 'm.bin', d / 'bag.bin', '--method', 'random', '-k', 2, '-o', d / 's.bin')
    assert result.exit_code == 0, result.output


def test_bad_spec_rejected(runner, workdir):
    d = workdir
    _run(runner, 'gen', d / 'm.bin', d / 'held.set', '-n', 2, '--itr-max', 0, '-o', d / 'bag.bin')
    result = _run(runner, 'fingerprint', d / 'm.bin', d / 'bag.bin', '--spec', 'best-guess')
    assert result.exit_code != 0
    assert 'cannot parse output spec' in result.output


def test_verify_needs_one_target(runner, workdir):
    d = workdir
    _run(runner, 'gen', d / 'm.bin', d / 'held.set', '-n', 2, '--itr-max', 0, '-o', d / 'bag.bin')
    _run(runner, 'fingerprint', d / 'm.bin', d / 'bag.bin', '-o', d / 'm.fp')
    result = _run(runner, 'verify', d / 'm.fp')
    assert result.exit_code == 1
    assert 'exactly one of --model or --endpoint' in result.output
    result = _run(runner, 'verify', d / 'm.fp', '--model', d / 'm.bin', '--endpoint', '127.0.0.1:1')
    assert result.exit_code == 1
    assert 'exactly one of --model or --endpoint' in result.output


def test_usage_errors_exit_one(runner, workdir):
    """参数错误退出 1, 不与检测到篡改的 2 混淆"""
    d = workdir
    _run(runner, 'gen', d / 'm.bin', d / 'held.set', '-n', 2, '--itr-max', 0, '-o', d / 'bag.bin')
    _run(runner, 'fingerprint', d / 'm.bin', d / 'bag.bin', '-o', d / 'm.fp')
    result = _run(runner, 'verify', d / 'm.fp', '--model', d / 'm.bin', '--timeout', 'abc')
    assert result.exit_code == 1
    assert '--timeout' in result.output
    assert BREACH_EXIT_CODE != 1
    assert _run(runner, 'verify').exit_code == 1
    assert _run(runner, 'no-such-command').exit_code == 1
    assert _run(runner, '--no-such-flag', 'version').exit_code == 1


def test_corrupt_fingerprint(runner, workdir):
    d = workdir
    (d / 'bad.fp').write_bytes(b'SENSIPRINT-FP 1\n{')
    result = _run(runner, 'verify', d / 'bad.fp', '--model', d / 'm.bin')
    assert result.exit_code == 1
    assert 'Error' in result.output


def test_bad_attack_json(runner, workdir):
    result = _run(runner, 'attack', workdir / 'm.bin', '{kind: quantize')
    assert result.exit_code == 1
    assert 'not valid JSON' in result.output


def test_bench_and_report(runner, tmp_path):
    manifest = tmp_path / 'manifest.json'
    save_manifest(quick_manifest(trials=2), str(manifest))
    out = tmp_path / 'results'
    result = _run(runner, 'bench', manifest, '-o', out)
    assert result.exit_code == 0, result.output
    assert '模型完整性检测报告' in result.output
    assert sorted(os.listdir(out)) == ['curve.csv', 'curve.json', 'curve.trials.csv', 'curve.txt']

    result = _run(runner, 'report', out / 'curve.json', '-o', tmp_path / 'again')
    assert result.exit_code == 0, result.output
    assert (tmp_path / 'again' / 'curve.csv').read_bytes() == (out / 'curve.csv').read_bytes()


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
