"""Action generation by Euler integration of the probability-flow ODE.

Integration runs on a uniform time grid from the horizon down to a small
positive endpoint; each step moves along the energy gradient scaled by
half the derivative of the noise variance. Returns both the action and
its terminal energy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from escore.model import EnergyNet
from escore.numerics import Rng
from escore.schedule import NoiseSchedule


class SamplerDivergence(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"ODE step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class OdeConfig:
    steps: int = 20
    endpoint: float = 1e-3

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one ODE step")
        if self.endpoint <= 0.0:
            raise ValueError("endpoint must be positive")


def euler_step(net: EnergyNet, sched: NoiseSchedule, a_k: np.ndarray,
               s: np.ndarray, t_k: float, dt: float) -> np.ndarray:
    """a_{k+1} = a_k - dt * 1/2 * d[sigma^2](t_k) * dE/da(a_k, s, t_k)."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    grad_e = -net.score(a_k, s, t_k)
    if not np.all(np.isfinite(grad_e)):
        raise SamplerDivergence(-1, "non-finite energy gradient")
    return a_k - dt * 0.5 * sched.dsigma2_dt(t_k) * grad_e


def integrate_field(grad_fn, sched: NoiseSchedule, a_init: np.ndarray,
                    cfg: OdeConfig) -> np.ndarray:
    """Euler-integrate an arbitrary energy-gradient field from T to the
    endpoint; grad_fn(a, t) returns dE/da per row."""
    if cfg.endpoint >= sched.horizon:
        raise ValueError("endpoint must be below the horizon")
    dt = (sched.horizon - cfg.endpoint) / cfg.steps
    a = np.array(a_init, dtype=np.float64)
    for k in range(cfg.steps):
        t_k = sched.horizon - k * dt
        g = grad_fn(a, t_k)
        if not np.all(np.isfinite(g)):
            raise SamplerDivergence(k, "non-finite energy gradient")
        a = a - dt * 0.5 * sched.dsigma2_dt(t_k) * g
    return a


def sample(net: EnergyNet, sched: NoiseSchedule, s: np.ndarray,
           cfg: OdeConfig, rng: Rng) -> tuple[np.ndarray, float]:
    """One action for one state; returns (action, terminal energy)."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a0 = rng.normal((1, net.action_dim)) * sched.sigma(sched.horizon)
    a = integrate_field(lambda x, t: -net.score(x, s, t), sched, a0, cfg)
    energy = net.energy(a, s, cfg.endpoint)
    return a[0], float(energy[0])


def sample_batch(net: EnergyNet, sched: NoiseSchedule, states: np.ndarray,
                 cfg: OdeConfig, rng: Rng) -> list[tuple[np.ndarray, float]]:
    """Vectorized sampling; element i draws its noise from substream i,
    so results are independent of batch size."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n = states.shape[0]
    if n == 0:
        return []
    sigma_t = sched.sigma(sched.horizon)
    a0 = np.stack([rng.split(i).normal((net.action_dim,)) * sigma_t
                   for i in range(n)])
    a = integrate_field(lambda x, t: -net.score(x, states, t), sched, a0, cfg)
    energies = net.energy(a, states, cfg.endpoint)
    return [(a[i], float(energies[i])) for i in range(n)]
