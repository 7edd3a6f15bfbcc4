"""Denoising score matching through the energy gradient.

Per step: draw a batch, noise each action at its own uniformly sampled
time, differentiate the weighted score-matching loss through the input
gradient (second-order pass), clip, and apply a decoupled-weight-decay
adaptive-moment update under a cosine schedule with linear warmup. The
scalar head is spectrally re-projected after every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from escore import autodiff as ad
from escore.envs import DemoDataset
from escore.model import EnergyNet
from escore.numerics import Rng
from escore.schedule import NoiseSchedule


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    batch_size: int = 128
    warmup_steps: int = 500
    total_steps: int = 20_000
    grad_clip_norm: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.learning_rate, self.weight_decay, self.batch_size,
               self.grad_clip_norm) <= 0 or self.warmup_steps <= 0:
            raise ValueError("config values must be positive")
        if self.total_steps < 0 or (self.total_steps and
                                    self.warmup_steps > self.total_steps):
            raise ValueError("need warmup_steps <= total_steps")


@dataclass
class TrainReport:
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)

    def final_loss_ma(self, window: int = 100) -> float:
        tail = self.loss[-window:]
        return float(np.mean(tail)) if tail else float("nan")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write("step,loss,lr,grad_norm\n")
            for i, (l, r, g) in enumerate(zip(self.loss, self.lr, self.grad_norm)):
                f.write(f"{i},{l:.17g},{r:.17g},{g:.17g}\n")


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup then cosine decay to zero."""
    if step < cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    progress = (step - cfg.warmup_steps) / span
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def dsm_loss(net: EnergyNet, sched: NoiseSchedule, s: np.ndarray,
             a0: np.ndarray, rng: Rng, step: int = -1) -> float:
    """Weighted denoising loss; parameter gradients land in net params.

    Each sample gets its own t ~ U[0, T] and noise draw; the loss is
    sigma^2(t) || -dE/da(a_t) + eps/sigma(t) ||^2 averaged over the batch.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a0 = np.atleast_2d(np.asarray(a0, dtype=np.float64))
    if s.shape[0] == 0:
        raise ValueError("empty batch")
    B = s.shape[0]
    t = rng.uniform((B,)) * sched.horizon
    eps = rng.normal(a0.shape)
    sig = np.asarray(sched.sigma(t))
    a_t = a0 + sig[:, None] * eps
    target = eps / sig[:, None]

    def loss_fn(g):
        resid = -g + target                        # score + eps/sigma
        per = sig ** 2 * np.sum(resid ** 2, axis=1)
        dldg = (-2.0 / B) * (sig ** 2)[:, None] * resid
        return float(np.mean(per)), dldg

    loss = ad.param_gradient_of_input_grad_loss(
        net.builder(s, t), a_t, loss_fn, net.params())
    if not math.isfinite(loss):
        raise TrainingDivergence(step, "non-finite loss")
    return loss


def clip_global_norm(params: list[ad.Param], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad *= scale
    return total


class AdamW:
    """Decoupled weight decay adaptive-moment optimizer."""

    def __init__(self, params: list[ad.Param], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c = self.cfg
        b1t = 1.0 - c.beta1 ** self.t
        b2t = 1.0 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * p.grad
            v *= c.beta2
            v += (1.0 - c.beta2) * p.grad ** 2
            p.value -= lr * c.weight_decay * p.value
            p.value -= lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps)


def train(net: EnergyNet, sched: NoiseSchedule, dataset: DemoDataset,
          cfg: TrainConfig) -> tuple[EnergyNet, TrainReport]:
    """Run the full training loop; mutates and returns the same net."""
    report = TrainReport()
    if cfg.total_steps == 0:
        return net, report
    rng = Rng(cfg.seed, stream=1)
    opt = AdamW(net.params(), cfg)
    n = len(dataset)
    initial_ma = None
    bad_streak = 0
    window: list[float] = []
    for step in range(cfg.total_steps):
        idx = rng.integers(0, n, (cfg.batch_size,))
        loss = dsm_loss(net, sched, dataset.states[idx], dataset.actions[idx],
                        rng, step)
        gnorm = clip_global_norm(net.params(), cfg.grad_clip_norm)
        lr = lr_at(cfg, step)
        opt.step(lr)
        net.project_head()
        report.loss.append(loss)
        report.lr.append(lr)
        report.grad_norm.append(gnorm)

        window.append(loss)
        if len(window) > 100:
            window.pop(0)
        ma = float(np.mean(window))
        if initial_ma is None and len(window) == 100:
            initial_ma = ma
        if initial_ma is not None and ma > 10.0 * initial_ma:
            bad_streak += 1
            if bad_streak >= 500:
                raise TrainingDivergence(step, "loss moving average diverged")
        else:
            bad_streak = 0
    return net, report
