import math

import numpy as np
import pytest

from escore import autodiff as ad
from escore.envs import box_state_sampler, gaussian_expert, generate_demos
from escore.model import EnergyNet, NetConfig
from escore.numerics import Rng
from escore.schedule import NoiseSchedule
from escore.train import (AdamW, TrainConfig, TrainingDivergence,
                          clip_global_norm, dsm_loss, lr_at, train)

TINY = NetConfig(state_hidden=4, trunk_hidden=6, n_blocks=1, time_dim=4,
                 head_hidden=4)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=100, total_steps=50)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_lr_schedule_shape():
    cfg = TrainConfig(warmup_steps=100, total_steps=1000)
    assert lr_at(cfg, 0) == 0.0
    assert math.isclose(lr_at(cfg, 50), 0.5 * cfg.learning_rate)
    assert math.isclose(lr_at(cfg, 100), cfg.learning_rate)
    # cosine midpoint and endpoint
    assert math.isclose(lr_at(cfg, 550), 0.5 * cfg.learning_rate)
    assert lr_at(cfg, 1000) < 1e-18


def test_adamw_single_step_hand_check():
    p = ad.Param(np.array([1.0]))
    p.grad = np.array([0.5])
    cfg = TrainConfig(weight_decay=0.01)
    opt = AdamW([p], cfg)
    opt.step(lr=0.1)
    # bias-corrected m-hat = 0.5, v-hat = 0.25; decay applied first
    expected = (1.0 - 0.1 * 0.01 * 1.0) - 0.1 * 0.5 / (math.sqrt(0.25) + cfg.eps)
    assert math.isclose(float(p.value[0]), expected, rel_tol=1e-12)


def test_clip_global_norm():
    p1 = ad.Param(np.zeros(2))
    p2 = ad.Param(np.zeros(2))
    p1.grad = np.array([3.0, 0.0])
    p2.grad = np.array([0.0, 4.0])
    norm = clip_global_norm([p1, p2], 1.0)
    assert math.isclose(norm, 5.0)
    total = math.sqrt(float(np.sum(p1.grad ** 2) + np.sum(p2.grad ** 2)))
    assert math.isclose(total, 1.0, rel_tol=1e-12)


def test_dsm_loss_rejects_empty_batch():
    net = EnergyNet(2, 2, TINY, Rng(0))
    with pytest.raises(ValueError):
        dsm_loss(net, NoiseSchedule(), np.zeros((0, 2)), np.zeros((0, 2)), Rng(1))


def test_dsm_loss_gradients_match_fd():
    net = EnergyNet(2, 2, TINY, Rng(3))
    sched = NoiseSchedule()
    s = Rng(4).normal((4, 2))
    a0 = Rng(5).normal((4, 2))

    def loss_at_params():
        return dsm_loss(net, sched, s, a0, Rng(6))

    base = loss_at_params()
    assert math.isfinite(base)
    grads = [p.grad.copy() for p in net.params()]
    check = np.random.default_rng(0)
    h = 1e-5
    for p, g in zip(net.params(), grads):
        flat = p.value.reshape(-1)
        idx = check.choice(flat.size, size=min(2, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_at_params()
            flat[i] = orig - h
            lm = loss_at_params()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(g.reshape(-1)[i] - fd) < 1e-4 * max(1.0, abs(fd))


def test_training_is_deterministic():
    ds = generate_demos(gaussian_expert(), 300, box_state_sampler(), Rng(0))
    cfg = TrainConfig(total_steps=30, warmup_steps=10, batch_size=16, seed=5)
    runs = []
    for _ in range(2):
        net = EnergyNet(2, 2, TINY, Rng(1))
        net, report = train(net, NoiseSchedule(), ds, cfg)
        runs.append((net.flat_params(), list(report.loss)))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_training_reduces_loss():
    ds = generate_demos(gaussian_expert(), 2000, box_state_sampler(), Rng(2))
    net = EnergyNet(2, 2, NetConfig(), Rng(3))
    cfg = TrainConfig(total_steps=400, warmup_steps=100, seed=1)
    net, report = train(net, NoiseSchedule(), ds, cfg)
    assert np.mean(report.loss[-50:]) < np.mean(report.loss[:50])


def test_head_stays_spectrally_bounded_during_training():
    ds = generate_demos(gaussian_expert(), 300, box_state_sampler(), Rng(4))
    net = EnergyNet(2, 2, TINY, Rng(5))
    cfg = TrainConfig(total_steps=25, warmup_steps=5, batch_size=16, seed=2)
    net, _ = train(net, NoiseSchedule(), ds, cfg)
    for sn in net.head_maps():
        assert np.linalg.svd(sn.W.value, compute_uv=False)[0] <= 1.0 + 1e-10


def test_divergence_detector_raises():
    ds = generate_demos(gaussian_expert(), 200, box_state_sampler(), Rng(6))
    net = EnergyNet(2, 2, TINY, Rng(7))
    cfg = TrainConfig(learning_rate=50.0, total_steps=2000, warmup_steps=1,
                      batch_size=8, seed=3)
    with pytest.raises(TrainingDivergence):
        train(net, NoiseSchedule(), ds, cfg)


def test_report_csv_format(tmp_path):
    ds = generate_demos(gaussian_expert(), 100, box_state_sampler(), Rng(8))
    net = EnergyNet(2, 2, TINY, Rng(9))
    cfg = TrainConfig(total_steps=5, warmup_steps=2, batch_size=8, seed=4)
    _, report = train(net, NoiseSchedule(), ds, cfg)
    path = tmp_path / "log.csv"
    report.save_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,loss,lr,grad_norm"
    assert len(lines) == 6
