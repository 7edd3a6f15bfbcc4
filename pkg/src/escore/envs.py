"""Synthetic ground-truth worlds.

Analytic Boltzmann experts (Gaussian and two-mode mixture) with closed
form soft Q, exact scores at any noise level, demonstration generation
with per-coordinate standardization, and a small goal-reaching MDP used
by the downstream-RL study.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from escore.numerics import Rng


@dataclass
class ExpertSpec:
    """Boltzmann expert pi(a|s) proportional to exp(Q(s,a)/alpha).

    gaussian: Q(s,a) = -alpha/2 (a-mu(s))^T Sigma^-1 (a-mu(s)), so the
    policy is N(mu(s), Sigma) with mu(s) = A s + b.
    mixture2: Q = alpha * log of a two-Gaussian mixture density with
    component means mu(s) +/- offset, so the policy is exactly that
    mixture.
    """

    kind: str
    state_dim: int
    action_dim: int
    A: np.ndarray
    b: np.ndarray
    sigma_diag: np.ndarray
    alpha: float = 1.0
    offset: np.ndarray | None = None
    weights: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        if self.kind not in ("gaussian", "mixture2"):
            raise ValueError(f"unknown expert kind {self.kind!r}")
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.sigma_diag = np.asarray(self.sigma_diag, dtype=np.float64)
        if np.any(self.sigma_diag <= 0):
            raise ValueError("covariance diagonal must be positive")
        if self.alpha <= 0:
            raise ValueError("temperature must be positive")
        if self.kind == "mixture2":
            if self.offset is None:
                raise ValueError("mixture2 needs a mode offset")
            self.offset = np.asarray(self.offset, dtype=np.float64)
            if abs(sum(self.weights) - 1.0) > 1e-12:
                raise ValueError("mixture weights must sum to 1")

    def mu(self, s: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        return s @ self.A.T + self.b

    def means(self, s: np.ndarray) -> np.ndarray:
        """(B, 2, d) component means for mixture2."""
        m = self.mu(s)
        return np.stack([m + self.offset, m - self.offset], axis=1)

    # -- closed forms ---------------------------------------------------------

    def analytic_score(self, a, s, sigma: float) -> np.ndarray:
        """Score of the sigma-noised action marginal at state s."""
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        var = self.sigma_diag + sigma ** 2
        if self.kind == "gaussian":
            return -(a - self.mu(s)) / var
        means = self.means(s)
        diff = a[:, None, :] - means                       # (B, 2, d)
        logw = np.log(np.asarray(self.weights))
        logp = logw - 0.5 * np.sum(diff ** 2 / var, axis=2)
        logp -= logp.max(axis=1, keepdims=True)
        resp = np.exp(logp)
        resp /= resp.sum(axis=1, keepdims=True)
        return np.sum(resp[:, :, None] * (-diff / var), axis=1)

    def analytic_q(self, a, s) -> np.ndarray:
        """Soft Q; its action-gradient equals alpha * analytic_score(sigma=0)."""
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if self.kind == "gaussian":
            diff = a - self.mu(s)
            return -0.5 * self.alpha * np.sum(diff ** 2 / self.sigma_diag, axis=1)
        means = self.means(s)
        diff = a[:, None, :] - means
        lognorm = -0.5 * np.sum(np.log(2 * np.pi * self.sigma_diag))
        logw = np.log(np.asarray(self.weights))
        comp = logw + lognorm - 0.5 * np.sum(diff ** 2 / self.sigma_diag, axis=2)
        m = comp.max(axis=1)
        return self.alpha * (m + np.log(np.sum(np.exp(comp - m[:, None]), axis=1)))

    def analytic_energy(self, a, s, sigma: float) -> np.ndarray:
        """Potential whose negative gradient is analytic_score; defined up
        to a per-state constant (the negative log noised density)."""
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        var = self.sigma_diag + sigma ** 2
        if self.kind == "gaussian":
            diff = a - self.mu(s)
            return 0.5 * np.sum(diff ** 2 / var, axis=1)
        means = self.means(s)
        diff = a[:, None, :] - means
        logw = np.log(np.asarray(self.weights))
        comp = logw - 0.5 * np.sum(diff ** 2 / var, axis=2)
        m = comp.max(axis=1)
        return -(m + np.log(np.sum(np.exp(comp - m[:, None]), axis=1)))

    def sample_actions(self, s: np.ndarray, rng: Rng) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        n = s.shape[0]
        eps = rng.normal((n, self.action_dim)) * np.sqrt(self.sigma_diag)
        if self.kind == "gaussian":
            return self.mu(s) + eps
        pick = (rng.uniform((n,)) < self.weights[0])
        means = self.means(s)
        chosen = np.where(pick[:, None], means[:, 0, :], means[:, 1, :])
        return chosen + eps


def gaussian_expert(state_dim=2, action_dim=2, alpha=1.0, action_std=0.5,
                    coupling=0.6) -> ExpertSpec:
    """Default Gaussian expert: mu(s) linear in s, diagonal covariance."""
    A = np.zeros((action_dim, state_dim))
    for i in range(action_dim):
        A[i, i % state_dim] = coupling
    return ExpertSpec("gaussian", state_dim, action_dim, A,
                      np.zeros(action_dim),
                      np.full(action_dim, action_std ** 2), alpha)


def mixture_expert(state_dim=2, action_dim=2, alpha=1.0, action_std=0.35,
                   mode_gap=1.2, coupling=0.3) -> ExpertSpec:
    A = np.zeros((action_dim, state_dim))
    for i in range(action_dim):
        A[i, i % state_dim] = coupling
    offset = np.zeros(action_dim)
    offset[0] = mode_gap
    return ExpertSpec("mixture2", state_dim, action_dim, A,
                      np.zeros(action_dim),
                      np.full(action_dim, action_std ** 2), alpha,
                      offset=offset)


# ---------------------------------------------------------------------------
# demonstrations

@dataclass
class DemoDataset:
    """Standardized (state, action) pairs plus the standardization stats."""

    states: np.ndarray
    actions: np.ndarray
    s_mean: np.ndarray
    s_std: np.ndarray
    a_mean: np.ndarray
    a_std: np.ndarray
    seed: int

    def __len__(self):
        return self.states.shape[0]

    def standardize_state(self, s):
        return (np.asarray(s, dtype=np.float64) - self.s_mean) / self.s_std

    def standardize_action(self, a):
        return (np.asarray(a, dtype=np.float64) - self.a_mean) / self.a_std

    def destandardize_action(self, a):
        return np.asarray(a, dtype=np.float64) * self.a_std + self.a_mean

    def destandardize_state(self, s):
        return np.asarray(s, dtype=np.float64) * self.s_std + self.s_mean

    def save_csv(self, path) -> None:
        ds, da = self.states.shape[1], self.actions.shape[1]
        with open(path, "w", newline="") as f:
            f.write(f"# seed={self.seed}\n")
            for name, arr in (("s_mean", self.s_mean), ("s_std", self.s_std),
                              ("a_mean", self.a_mean), ("a_std", self.a_std)):
                f.write(f"# {name}=" + ",".join(f"{x:.17g}" for x in arr) + "\n")
            cols = [f"s{i}" for i in range(ds)] + [f"a{i}" for i in range(da)]
            f.write(",".join(cols) + "\n")
            data = np.hstack([self.states, self.actions])
            for row in data:
                f.write(",".join(f"{x:.17g}" for x in row) + "\n")

    @classmethod
    def load_csv(cls, path) -> "DemoDataset":
        meta = {}
        body = io.StringIO()
        with open(path) as f:
            for line in f:
                if line.startswith("# "):
                    key, val = line[2:].strip().split("=", 1)
                    meta[key] = val
                else:
                    body.write(line)
        body.seek(0)
        header = body.readline().strip().split(",")
        ds = sum(c.startswith("s") for c in header)
        data = np.loadtxt(body, delimiter=",", ndmin=2)
        arrs = {k: np.array([float(x) for x in meta[k].split(",")])
                for k in ("s_mean", "s_std", "a_mean", "a_std")}
        return cls(data[:, :ds], data[:, ds:], arrs["s_mean"], arrs["s_std"],
                   arrs["a_mean"], arrs["a_std"], int(meta["seed"]))


def box_state_sampler(low=-1.0, high=1.0):
    def sampler(rng: Rng, n: int, dim: int) -> np.ndarray:
        return low + (high - low) * rng.uniform((n, dim))
    return sampler


def generate_demos(expert: ExpertSpec, n: int, state_sampler, rng: Rng) -> DemoDataset:
    """Sample n (s, a) pairs from the expert and standardize per column."""
    if n < 2:
        raise ValueError("need at least 2 demonstrations for standardization")
    states = state_sampler(rng, n, expert.state_dim)
    actions = expert.sample_actions(states, rng)
    s_mean, s_std = states.mean(axis=0), states.std(axis=0)
    a_mean, a_std = actions.mean(axis=0), actions.std(axis=0)
    if np.any(s_std == 0) or np.any(a_std == 0):
        raise ValueError("degenerate column in demonstrations")
    return DemoDataset((states - s_mean) / s_std, (actions - a_mean) / a_std,
                       s_mean, s_std, a_mean, a_std, rng.seed)


def standardized_expert(expert: ExpertSpec, dataset: DemoDataset) -> ExpertSpec:
    """The same Boltzmann expert expressed in the dataset's standardized
    coordinates, so analytic oracles compare directly with a net trained
    on standardized demos."""
    D = 1.0 / dataset.a_std
    A = (expert.A * dataset.s_std[None, :]) * D[:, None]
    b = (expert.b + dataset.s_mean @ expert.A.T - dataset.a_mean) * D
    offset = expert.offset * D if expert.offset is not None else None
    return ExpertSpec(expert.kind, expert.state_dim, expert.action_dim, A, b,
                      expert.sigma_diag * D ** 2, expert.alpha,
                      offset=offset, weights=expert.weights)


# ---------------------------------------------------------------------------
# goal-reaching MDP

@dataclass
class GoalMdp:
    """2-D point mass: s' = s + 0.1 a + noise, sparse reward at the goal."""

    goal: np.ndarray = field(default_factory=lambda: np.zeros(2))
    goal_radius: float = 0.15
    horizon: int = 50
    step_scale: float = 0.1
    noise_scale: float = 0.01
    start_low: float = -0.9
    start_high: float = 0.9

    state_dim: int = 2
    action_dim: int = 2

    def reset(self, rng: Rng) -> np.ndarray:
        while True:
            s = self.start_low + (self.start_high - self.start_low) * rng.uniform((2,))
            if np.linalg.norm(s - self.goal) > 2 * self.goal_radius:
                return s

    def at_goal(self, s) -> bool:
        return bool(np.linalg.norm(np.asarray(s) - self.goal) <= self.goal_radius)

    def step(self, s, a, rng: Rng):
        """Returns (s', sparse_reward, done, clipped_flag)."""
        s = np.asarray(s, dtype=np.float64)
        if self.at_goal(s):
            return s.copy(), 1.0, True, False
        a = np.asarray(a, dtype=np.float64)
        clipped = bool(np.any(np.abs(a) > 1.0))
        a = np.clip(a, -1.0, 1.0)
        noise = rng.normal((2,)) if self.noise_scale else np.zeros(2)
        s_next = s + self.step_scale * a + self.noise_scale * noise
        done = self.at_goal(s_next)
        return s_next, (1.0 if done else 0.0), done, clipped


def mdp_step(mdp: GoalMdp, s, a, rng: Rng):
    return mdp.step(s, a, rng)


def scripted_action(mdp: GoalMdp, s, rng: Rng | None = None,
                    jitter: float = 0.25) -> np.ndarray:
    """Near-optimal proportional controller with Gaussian jitter, so the
    demonstration policy is approximately Boltzmann-optimal."""
    direction = (mdp.goal - np.asarray(s, dtype=np.float64)) / mdp.step_scale
    a = np.clip(direction, -1.0, 1.0)
    if rng is not None and jitter > 0:
        a = np.clip(a + jitter * rng.normal((mdp.action_dim,)), -1.0, 1.0)
    return a


def generate_mdp_demos(mdp: GoalMdp, n_episodes: int, rng: Rng,
                       jitter: float = 0.25) -> DemoDataset:
    """Roll the scripted controller and package (s, a) pairs."""
    states, actions = [], []
    for ep in range(n_episodes):
        sub = rng.split(ep)
        s = mdp.reset(sub)
        for _ in range(mdp.horizon):
            a = scripted_action(mdp, s, sub, jitter)
            states.append(s)
            actions.append(a)
            s, _, done, _ = mdp.step(s, a, sub)
            if done:
                break
    states = np.asarray(states)
    actions = np.asarray(actions)
    if len(states) < 2:
        raise ValueError("not enough demonstration pairs")
    s_mean, s_std = states.mean(axis=0), states.std(axis=0)
    a_mean, a_std = actions.mean(axis=0), actions.std(axis=0)
    return DemoDataset((states - s_mean) / s_std, (actions - a_mean) / a_std,
                       s_mean, s_std, a_mean, a_std, rng.seed)
