"""
测试攻击模拟
"""

import numpy as np
import pytest

from sensiprint import nn
from sensiprint.attacks import (
    Poison, Quantize, TriggerPatch, Trojan, WeightNoise, apply_attack, attack_from_dict, attack_to_dict, poison,
    quantize, quantize_array, stamp_trigger, trigger_success_rate, trojan, weight_noise,
)
from sensiprint.errors import InvalidInput


# ============ 权重修改 ============

def test_zero_ratio_keeps_digest(sigmoid_mlp):
    outcome = weight_noise(sigmoid_mlp, 0.0, seed=3)
    assert nn.digest(outcome.tampered) == nn.digest(sigmoid_mlp)
    assert outcome.params_changed == 0


def test_weight_noise_deterministic(sigmoid_mlp):
    a = weight_noise(sigmoid_mlp, 0.3, seed=5).tampered
    b = weight_noise(sigmoid_mlp, 0.3, seed=5).tampered
    c = weight_noise(sigmoid_mlp, 0.3, seed=6).tampered
    assert nn.digest(a) == nn.digest(b)
    assert nn.digest(a) != nn.digest(c)


def test_half_ratio_changes_about_half():
    """约 1 万个参数, 改动数在均值 ±3σ 以内"""
    model = nn.mlp((100,), [100], 3, seed=1)
    n = model.param_count
    changed = weight_noise(model, 0.5, seed=2).params_changed
    assert abs(changed - 0.5 * n) <= 3 * np.sqrt(n * 0.25)


def test_full_ratio_changes_everything(sigmoid_mlp):
    outcome = weight_noise(sigmoid_mlp, 1.0, seed=0)
    assert outcome.params_changed == sigmoid_mlp.param_count


def test_weight_noise_bounds():
    with pytest.raises(InvalidInput):
        WeightNoise(1.5)
    with pytest.raises(InvalidInput):
        WeightNoise(0.1, sigma=-1)
    assert WeightNoise(0.01).attack_id == 'noise-r0.01'


def test_accuracy_metrics(relu_mlp, blobs):
    metrics = weight_noise(relu_mlp, 0.1, seed=1, test=blobs).metrics
    assert 0.0 <= metrics['accuracy_before'] <= 1.0
    assert 0.0 <= metrics['accuracy_after'] <= 1.0


# ============ 量化 ============

def test_quantize_half_step():
    """[1.0, 0.5] 8 位: 0.5 → 64/127"""
    out = quantize_array(np.array([1.0, 0.5], dtype=np.float32), 8)
    assert out[0] == np.float32(1.0)
    assert out[1] == np.float32(64 / 127)
    assert out[1] == pytest.approx(0.503937, abs=1e-6)


def test_quantize_symmetric_and_zero():
    out = quantize_array(np.array([-1.0, -0.5, 0.5], dtype=np.float32), 8)
    assert out[1] == -out[2]
    zeros = np.zeros((3, 2), dtype=np.float32)
    assert np.array_equal(quantize_array(zeros, 8), zeros)


def test_quantize_idempotent(sigmoid_mlp):
    once = quantize(sigmoid_mlp).tampered
    twice = quantize(once).tampered
    for a, b in zip(once.parameters(), twice.parameters()):
        assert np.allclose(a, b, rtol=0, atol=1e-7)


def test_more_bits_smaller_error():
    w = np.random.default_rng(1).normal(size=200).astype(np.float32)
    errors = [np.abs(quantize_array(w, bits) - w).max() for bits in (4, 8, 12)]
    assert errors[0] > errors[1] > errors[2]


def test_quantize_changes_model(sigmoid_mlp):
    outcome = quantize(sigmoid_mlp, 8)
    assert outcome.params_changed > 0
    with pytest.raises(InvalidInput):
        Quantize(1)


# ============ 木马 ============

@pytest.mark.parametrize('position,rows,cols', [
    ('top-left', slice(0, 2), slice(0, 2)),
    ('top-right', slice(0, 2), slice(4, 6)),
    ('bottom-left', slice(4, 6), slice(0, 2)),
    ('bottom-right', slice(4, 6), slice(4, 6)),
])
def test_stamp_trigger_corners(position, rows, cols):
    images = np.zeros((3, 1, 6, 6), dtype=np.float32)
    out = stamp_trigger(images, TriggerPatch(position, 2, 0.9))
    assert np.all(out[:, :, rows, cols] == np.float32(0.9))
    assert out.sum() == pytest.approx(3 * 4 * 0.9, rel=1e-6)
    assert images.sum() == 0.0


def test_trigger_on_vectors():
    out = stamp_trigger(np.zeros((1, 5), dtype=np.float32), TriggerPatch('top-left', 2))
    assert out[0].tolist() == [1.0, 1.0, 0.0, 0.0, 0.0]


def test_trigger_must_fit():
    with pytest.raises(InvalidInput):
        stamp_trigger(np.zeros((1, 1, 3, 3), dtype=np.float32), TriggerPatch(size=4))
    with pytest.raises(InvalidInput):
        TriggerPatch('middle')


def test_trojan_zero_epochs_unchanged(relu_mlp, blobs):
    outcome = trojan(relu_mlp, blobs, Trojan(TriggerPatch('top-left', 2), target_class=1, epochs=0))
    assert nn.digest(outcome.tampered) == nn.digest(relu_mlp)
    assert outcome.metrics['attack_success_rate'] == outcome.metrics['success_rate_before']


def test_trojan_target_range(relu_mlp, blobs):
    with pytest.raises(InvalidInput):
        trojan(relu_mlp, blobs, Trojan(target_class=5, epochs=0))


def test_trigger_success_rate_excludes_target(relu_mlp, blobs):
    only_target = blobs.subset(np.flatnonzero(blobs.labels == 0))
    assert trigger_success_rate(relu_mlp, only_target, TriggerPatch('top-left', 1), 0) == 0.0


# ============ 投毒 ============

def test_poison_zero_epochs_unchanged(relu_mlp, blobs):
    outcome = poison(relu_mlp, blobs, Poison(source_class=0, target_class=1, epochs=0))
    assert nn.digest(outcome.tampered) == nn.digest(relu_mlp)
    assert 'targeted_rate' in outcome.metrics


def test_poison_validation(relu_mlp, blobs):
    with pytest.raises(InvalidInput):
        Poison(source_class=1, target_class=1)
    with pytest.raises(InvalidInput):
        poison(relu_mlp, blobs, Poison(source_class=7, epochs=0))
    assert Poison(2).generic
    assert Poison(2).attack_id == 'poison-generic-s2'
    assert Poison(2, 0).attack_id == 'poison-specific-s2t0'


def test_poison_deterministic(relu_mlp, blobs):
    cfg = Poison(source_class=2, epochs=2, lr=0.1, seed=4)
    a = poison(relu_mlp, blobs, cfg).tampered
    b = poison(relu_mlp, blobs, cfg).tampered
    assert nn.digest(a) == nn.digest(b)


# ============ 配置 ============

@pytest.mark.parametrize('cfg', [
    WeightNoise(0.05, 0.5, 3),
    Quantize(6),
    Trojan(TriggerPatch('top-right', 3, 0.8), target_class=2, epochs=5),
    Poison(1, 3, 0.5),
])
def test_attack_dict(cfg):
    d = attack_to_dict(cfg)
    assert d['kind'] == cfg.kind
    assert attack_from_dict(d) == cfg


def test_attack_from_dict_errors():
    with pytest.raises(InvalidInput):
        attack_from_dict({'kind': 'melt'})
    with pytest.raises(InvalidInput):
        attack_from_dict({'kind': 'quantize', 'depth': 3})


def test_apply_attack_dispatch(relu_mlp, blobs):
    assert apply_attack(relu_mlp, Quantize()).params_changed > 0
    with pytest.raises(InvalidInput):
        apply_attack(relu_mlp, Poison(0, epochs=0))
    outcome = apply_attack(relu_mlp, Poison(0, 1, epochs=0), train=blobs)
    assert nn.digest(outcome.tampered) == nn.digest(relu_mlp)


# ============ 固定实验 ============

@pytest.mark.slow
def test_trojan_reaches_high_success(cnn_fixture):
    fx = cnn_fixture
    cfg = Trojan(target_class=0, seed=1)
    assert cfg.trigger.size == 3 and cfg.poison_fraction == 0.2
    metrics = trojan(fx.model, fx.train, cfg, fx.held_out).metrics
    assert metrics['attack_success_rate'] >= 0.9
    assert metrics['accuracy_before'] - metrics['accuracy_after'] <= 0.05


@pytest.mark.slow
def test_specific_poison_redirects_source(cnn_fixture):
    fx = cnn_fixture
    metrics = poison(fx.model, fx.train, Poison(0, 1, seed=1), fx.held_out).metrics
    assert metrics['targeted_rate'] >= 0.8
    assert metrics['other_accuracy_before'] - metrics['other_accuracy'] <= 0.05


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
