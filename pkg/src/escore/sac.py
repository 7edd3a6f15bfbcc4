"""Soft actor-critic on the goal-reaching task with pluggable rewards.

Small-scale agent used to compare reward signals: the sparse task
reward, the raw negative energy, the centered energy reward, their sum,
and an oracle dense reward. Twin critics with clipped double-Q targets,
a tanh-squashed Gaussian actor, automatic temperature tuning toward a
target entropy of -dim(a), and Polyak-averaged target networks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from escore import autodiff as ad
from escore.envs import DemoDataset, GoalMdp
from escore.model import EnergyNet
from escore.numerics import Rng
from escore.reward import RewardConfig, centered_reward, raw_reward, reference_actions

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

ARM_NAMES = ("sparse", "raw", "centered", "centered_sparse", "oracle")


class RlDivergence(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"update {step}: {message}")
        self.step = step


@dataclass
class SacConfig:
    hidden: tuple = (256, 256)
    discount: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    batch_size: int = 64
    buffer_capacity: int = 50_000
    start_steps: int = 1_000
    update_every: int = 10
    init_temperature: float = 0.2
    energy_scale: float = 1.0      # weight on the energy term in combined arms
    eval_every: int = 1_000
    eval_episodes: int = 20

    def __post_init__(self):
        if self.batch_size < 1 or self.buffer_capacity < 1:
            raise ValueError("batch size and capacity must be positive")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if self.init_temperature <= 0.0:
            raise ValueError("temperature must be positive")


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    d: int

    def __post_init__(self):
        if self.d not in (0, 1):
            raise ValueError("done flag must be 0 or 1")


class ReplayBuffer:
    """Fixed-capacity ring; once full the oldest entries are overwritten."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.d = np.zeros(capacity)
        self.size = 0
        self.head = 0

    def push(self, tr: Transition) -> None:
        i = self.head
        self.s[i] = tr.s
        self.a[i] = tr.a
        self.r[i] = tr.r
        self.s_next[i] = tr.s_next
        self.d[i] = tr.d
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __len__(self):
        return self.size

    def sample(self, n: int, rng: Rng):
        idx = rng.integers(0, self.size, (n,))
        return (self.s[idx], self.a[idx], self.r[idx],
                self.s_next[idx], self.d[idx])


class Mlp:
    """Plain fully connected net with Mish hidden activations."""

    def __init__(self, dims: list[int], rng: Rng, final_scale: float = 1.0):
        self.layers = []
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            scale = final_scale if i == len(dims) - 2 else 1.0
            W = ad.Param(rng.normal((dout, din)) * (scale / np.sqrt(din)))
            b = ad.Param(np.zeros(dout))
            self.layers.append((W, b))

    def params(self) -> list[ad.Param]:
        return [p for W, b in self.layers for p in (W, b)]

    def apply(self, tape: ad.Tape, x: ad.Node) -> ad.Node:
        for i, (W, b) in enumerate(self.layers):
            x = ad.affine(tape, x, W, b)
            if i < len(self.layers) - 1:
                x = ad.mish(tape, x)
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        for i, (W, b) in enumerate(self.layers):
            x = x @ W.value.T + b.value
            if i < len(self.layers) - 1:
                s = 1.0 / (1.0 + np.exp(-x))
                z2 = (1.0 - s) ** 2
                x = x * (1.0 - z2) / (1.0 + z2)
        return x


class Adam:
    def __init__(self, params: list[ad.Param], lr: float):
        self.params = params
        self.lr = lr
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - 0.9 ** self.t
        b2t = 1.0 - 0.999 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= 0.9
            m += 0.1 * p.grad
            v *= 0.999
            v += 0.001 * p.grad ** 2
            p.value -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + 1e-8)


def _polyak(target: Mlp, online: Mlp, tau: float) -> None:
    for (Wt, bt), (W, b) in zip(target.layers, online.layers):
        Wt.value *= 1.0 - tau
        Wt.value += tau * W.value
        bt.value *= 1.0 - tau
        bt.value += tau * b.value


def _copy_into(target: Mlp, online: Mlp) -> None:
    _polyak(target, online, 1.0)


class SacAgent:
    """Twin-critic maximum-entropy agent with a squashed Gaussian actor."""

    def __init__(self, state_dim: int, action_dim: int, cfg: SacConfig, rng: Rng):
        self.cfg = cfg
        self.state_dim = state_dim
        self.action_dim = action_dim
        h = list(cfg.hidden)
        self.trunk = Mlp([state_dim] + h, rng.split(0))
        # the trunk ends in a hidden layer, so apply() output needs Mish
        self.mean_head = (ad.Param(rng.split(1).normal((action_dim, h[-1])) / np.sqrt(h[-1])),
                          ad.Param(np.zeros(action_dim)))
        self.log_std_head = (ad.Param(rng.split(2).normal((action_dim, h[-1])) / np.sqrt(h[-1])),
                             ad.Param(np.zeros(action_dim)))
        self.q1 = Mlp([state_dim + action_dim] + h + [1], rng.split(3))
        self.q2 = Mlp([state_dim + action_dim] + h + [1], rng.split(4))
        self.q1_target = Mlp([state_dim + action_dim] + h + [1], rng.split(3))
        self.q2_target = Mlp([state_dim + action_dim] + h + [1], rng.split(4))
        _copy_into(self.q1_target, self.q1)
        _copy_into(self.q2_target, self.q2)
        self.log_alpha = ad.Param(np.array(math.log(cfg.init_temperature)))
        self.target_entropy = -float(action_dim)
        pi_params = self.policy_params()
        self.opt_pi = Adam(pi_params, cfg.lr)
        self.opt_q1 = Adam(self.q1.params(), cfg.lr)
        self.opt_q2 = Adam(self.q2.params(), cfg.lr)
        self.opt_alpha = Adam([self.log_alpha], cfg.lr)

    # -- policy -----------------------------------------------------------

    def policy_params(self) -> list[ad.Param]:
        return (self.trunk.params() + list(self.mean_head) + list(self.log_std_head))

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_alpha.value))

    def _policy_stats(self, s: np.ndarray):
        """Numpy-only mean and clamped log-std for a state batch."""
        h = self.trunk.forward(s)
        sgm = 1.0 / (1.0 + np.exp(-h))
        z2 = (1.0 - sgm) ** 2
        h = h * (1.0 - z2) / (1.0 + z2)
        mean = h @ self.mean_head[0].value.T + self.mean_head[1].value
        log_std = h @ self.log_std_head[0].value.T + self.log_std_head[1].value
        return mean, np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)

    def sample_action(self, s: np.ndarray, rng: Rng):
        """Returns (squashed action, log prob) for a state batch."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        mean, log_std = self._policy_stats(s)
        eps = rng.normal(mean.shape)
        u = mean + np.exp(log_std) * eps
        a = np.tanh(u)
        logp = np.sum(-HALF_LOG_2PI - log_std - 0.5 * eps ** 2
                      - np.log(1.0 + 1e-6 - a ** 2), axis=1)
        return a, logp

    def act(self, s: np.ndarray, rng: Rng | None = None) -> np.ndarray:
        """Single-state action; the mean action when no rng is given."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        if rng is None:
            mean, _ = self._policy_stats(s)
            return np.tanh(mean[0])
        a, _ = self.sample_action(s, rng)
        return a[0]

    # -- updates ----------------------------------------------------------

    def critic_target(self, r, d, s_next_q_min, logp) -> float:
        """y = r + discount * (1 - d) * (min target Q - temperature * logp)."""
        c = self.cfg
        return r + c.discount * (1.0 - d) * (s_next_q_min - self.temperature * logp)

    def update(self, batch, rng: Rng, step: int = -1) -> dict:
        s, a, r, s_next, d = batch
        B = s.shape[0]
        cfg = self.cfg

        a_next, logp_next = self.sample_action(s_next, rng)
        xq_next = np.concatenate([s_next, a_next], axis=1)
        q_next = np.minimum(self.q1_target.forward(xq_next)[:, 0],
                            self.q2_target.forward(xq_next)[:, 0])
        y = self.critic_target(r, d, q_next, logp_next)

        xq = np.concatenate([s, a], axis=1)
        critic_losses = []
        for q_net, opt in ((self.q1, self.opt_q1), (self.q2, self.opt_q2)):
            tape = ad.Tape()
            q = q_net.apply(tape, tape.input(xq))
            resid = q.value[:, 0] - y
            critic_losses.append(float(np.mean(resid ** 2)))
            for p in q_net.params():
                p.zero_grad()
            ad.backward(tape, q, (2.0 / B) * resid[:, None])
            opt.step()

        actor_loss, mean_logp = self._actor_step(s, rng)
        alpha_loss = self._temperature_step(mean_logp)

        _polyak(self.q1_target, self.q1, cfg.tau)
        _polyak(self.q2_target, self.q2, cfg.tau)

        losses = {"q1": critic_losses[0], "q2": critic_losses[1],
                  "actor": actor_loss, "alpha": alpha_loss,
                  "temperature": self.temperature, "entropy": -mean_logp}
        if not all(math.isfinite(v) for v in losses.values()):
            raise RlDivergence(step, f"non-finite losses {losses}")
        return losses

    def _actor_step(self, s: np.ndarray, rng: Rng):
        """One reparameterized policy gradient step; returns loss and
        the mean log prob of the fresh action sample."""
        B = s.shape[0]
        tape = ad.Tape()
        h = self.trunk.apply(tape, tape.input(s))
        h = ad.mish(tape, h)
        mean = ad.affine(tape, h, *self.mean_head)
        log_std = ad.clamp(tape, ad.affine(tape, h, *self.log_std_head),
                           LOG_STD_MIN, LOG_STD_MAX)
        eps = tape.constant(rng.normal(mean.value.shape))
        u = ad.add(tape, mean, ad.mul(tape, ad.exp(tape, log_std), eps))
        a = ad.tanh(tape, u)

        # log pi = Gaussian term minus the tanh change-of-variables term
        gauss = ad.add_const(tape, ad.scale(tape, log_std, -1.0),
                             -HALF_LOG_2PI - 0.5 * eps.value ** 2)
        squash = ad.log(tape, ad.add_const(tape, ad.scale(tape, ad.square(tape, a), -1.0),
                                           1.0 + 1e-6))
        logp = ad.rsum(tape, ad.add(tape, gauss, ad.scale(tape, squash, -1.0)))

        xq = ad.concat(tape, [tape.constant(s), a])
        q_min = ad.minimum(tape, self.q1.apply(tape, xq), self.q2.apply(tape, xq))
        alpha = self.temperature
        loss_node = ad.add(tape, ad.scale(tape, logp, alpha),
                           ad.scale(tape, q_min, -1.0))
        for p in self.policy_params():
            p.zero_grad()
        ad.backward(tape, loss_node, np.full((B, 1), 1.0 / B))
        self.opt_pi.step()
        return float(np.mean(loss_node.value)), float(np.mean(logp.value))

    def _temperature_step(self, mean_logp: float) -> float:
        # d/dlog_alpha of -log_alpha * (logp + target_entropy)
        self.log_alpha.grad = np.array(-(mean_logp + self.target_entropy))
        self.opt_alpha.step()
        return float(-self.log_alpha.value * (mean_logp + self.target_entropy))


# ---------------------------------------------------------------------------
# reward arms on the goal MDP

def make_reward_fn(mode: str, net: EnergyNet | None, dataset: DemoDataset | None,
                   mdp: GoalMdp, rcfg: RewardConfig, refs: np.ndarray | None,
                   energy_scale: float = 1.0):
    """Per-transition reward for one experiment arm.

    Energy-based arms evaluate the net in the standardized coordinates
    it was trained in, so the demo dataset supplies the statistics.
    """
    if mode not in ARM_NAMES:
        raise ValueError(f"unknown reward mode {mode!r}")
    if mode in ("raw", "centered", "centered_sparse"):
        if net is None or dataset is None or refs is None:
            raise ValueError(f"arm {mode!r} needs an energy net, dataset stats, "
                             "and reference actions")

    def reward(s, a, r_task, s_next):
        if mode == "sparse":
            return r_task
        if mode == "oracle":
            return -float(np.linalg.norm(s_next - mdp.goal))
        s_std = dataset.standardize_state(s)
        a_std = dataset.standardize_action(a)
        if mode == "raw":
            return energy_scale * raw_reward(net, a_std, s_std, rcfg)
        shaped = energy_scale * centered_reward(net, a_std, s_std, rcfg, refs)
        if mode == "centered_sparse":
            return shaped + r_task
        return shaped

    return reward


def evaluate_policy(agent: SacAgent, mdp: GoalMdp, rng: Rng,
                    n_episodes: int) -> tuple[float, float]:
    """Mean-action rollouts; returns (success rate, mean task return)."""
    successes = 0
    returns = []
    for ep in range(n_episodes):
        sub = rng.split(ep)
        s = mdp.reset(sub)
        ret = 0.0
        for _ in range(mdp.horizon):
            a = agent.act(s)
            s, r, done, _ = mdp.step(s, a, sub)
            ret += r
            if done:
                successes += 1
                break
        returns.append(ret)
    return successes / n_episodes, float(np.mean(returns))


@dataclass
class ArmResult:
    mode: str
    seed: int
    steps: list[int] = field(default_factory=list)
    success: list[float] = field(default_factory=list)
    mean_return: list[float] = field(default_factory=list)

    def steps_to_success(self, threshold: float = 0.8) -> float:
        for st, sr in zip(self.steps, self.success):
            if sr >= threshold:
                return float(st)
        return math.inf

    def final_success(self, tail: int = 3) -> float:
        return float(np.mean(self.success[-tail:])) if self.success else 0.0


def run_arm(mdp: GoalMdp, mode: str, total_steps: int, seed: int,
            net: EnergyNet | None = None, dataset: DemoDataset | None = None,
            cfg: SacConfig | None = None,
            rcfg: RewardConfig | None = None) -> ArmResult:
    """Train one agent on one reward arm; returns its learning curve."""
    cfg = cfg or SacConfig()
    rcfg = rcfg or RewardConfig()
    root = Rng(seed, stream=11)
    refs = None
    if mode in ("raw", "centered", "centered_sparse"):
        refs = reference_actions(root.split(0), rcfg, mdp.action_dim)
    reward_fn = make_reward_fn(mode, net, dataset, mdp, rcfg, refs,
                               cfg.energy_scale)

    agent = SacAgent(mdp.state_dim, mdp.action_dim, cfg, root.split(1))
    buf = ReplayBuffer(cfg.buffer_capacity, mdp.state_dim, mdp.action_dim)
    env_rng = root.split(2)
    act_rng = root.split(3)
    upd_rng = root.split(4)
    eval_rng = root.split(5)
    result = ArmResult(mode, seed)

    episode = 0
    ep_rng = env_rng.split(episode)
    s = mdp.reset(ep_rng)
    t_in_ep = 0
    for step in range(total_steps):
        if step < cfg.start_steps:
            a = 2.0 * act_rng.uniform((mdp.action_dim,)) - 1.0
        else:
            a = agent.act(s, act_rng)
        s_next, r_task, done, _ = mdp.step(s, a, ep_rng)
        r = reward_fn(s, a, r_task, s_next)
        t_in_ep += 1
        truncated = t_in_ep >= mdp.horizon and not done
        buf.push(Transition(s, a, r, s_next, int(done)))
        s = s_next
        if done or truncated:
            episode += 1
            ep_rng = env_rng.split(episode)
            s = mdp.reset(ep_rng)
            t_in_ep = 0
        if step >= cfg.start_steps and (step + 1) % cfg.update_every == 0:
            agent.update(buf.sample(cfg.batch_size, upd_rng), upd_rng, step)
        if (step + 1) % cfg.eval_every == 0:
            sr, ret = evaluate_policy(agent, mdp, eval_rng.split(step), cfg.eval_episodes)
            result.steps.append(step + 1)
            result.success.append(sr)
            result.mean_return.append(ret)
    return result


def save_curves_csv(path, results: list[ArmResult]) -> None:
    with open(path, "w", newline="") as f:
        f.write("mode,seed,step,success_rate,mean_return\n")
        for res in results:
            for st, sr, ret in zip(res.steps, res.success, res.mean_return):
                f.write(f"{res.mode},{res.seed},{st},{sr:.17g},{ret:.17g}\n")
