"""PPO with clipped surrogate, GAE and optional adversarial rollouts.

When adversarial training is on, the observation seen at every rollout step
``t`` with ``t % every_k == 0`` is replaced by a PGD perturbation computed
against the current parameters, before the action is sampled.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attack import AttackConfig, pgd_attack
from .env import PixelCatchEnv
from .policy import ArchitectureConfig, PolicyNetwork

log = logging.getLogger(__name__)

LOG_COLUMNS = ("update_index", "env_steps", "mean_episode_reward", "policy_loss", "value_loss",
               "entropy", "clip_fraction", "attacked_step_fraction")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, last_good_state):
        super().__init__(message)
        self.last_good_state = last_good_state


@dataclass(frozen=True)
class AdvTraining:
    attack: AttackConfig = AttackConfig(epsilon=0.1)
    every_k: int = 10

    def __post_init__(self):
        if self.every_k < 1:
            raise ValueError(f"every_k must be >= 1, got {self.every_k}")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 200_000
    n_envs: int = 8
    n_steps: int = 128
    minibatch_size: int = 256
    epochs: int = 4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    learning_rate: float = 2.5e-4
    anneal_lr: bool = False
    max_grad_norm: float = 0.5
    adam_eps: float = 1e-5
    normalize_advantage: bool = True
    adv_training: AdvTraining | None = None
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 0 or self.n_envs < 1 or self.n_steps < 1 or self.epochs < 1:
            raise ValueError("total_steps >= 0, n_envs, n_steps and epochs >= 1 required")
        if self.rollout_length % self.minibatch_size:
            raise ValueError(f"rollout length {self.rollout_length} not divisible by "
                             f"minibatch size {self.minibatch_size}")

    @property
    def rollout_length(self):
        return self.n_envs * self.n_steps


@dataclass
class RolloutBuffer:
    observations: np.ndarray    # (T, E, k, H, W)
    actions: np.ndarray         # (T, E)
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray          # (T + 1, E), last row bootstraps
    dones: np.ndarray
    attacked: np.ndarray        # (T,) bool
    advantages: np.ndarray = None
    returns: np.ndarray = None
    finished_episodes: list = field(default_factory=list)

    def __len__(self):
        return self.actions.size

    def flat(self):
        n = len(self)
        return (self.observations.reshape((n,) + self.observations.shape[2:]), self.actions.reshape(n),
                self.log_probs.reshape(n), self.advantages.reshape(n), self.returns.reshape(n))


def gae(rewards, values, dones, gamma, lam):
    """Advantages and returns, right to left; ``values`` carries one bootstrap entry more."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if rewards.shape != dones.shape or values.shape[0] != rewards.shape[0] + 1 \
            or values.shape[1:] != rewards.shape[1:]:
        raise ValueError(f"length mismatch: rewards {rewards.shape}, values {values.shape}, "
                         f"dones {dones.shape}")
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in range(len(rewards) - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv, adv + values[:-1]


def sample_actions(probs, rng):
    u = rng.random((probs.shape[0], 1))
    idx = (np.cumsum(probs, axis=1) < u).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


class VecCatch:
    """Several PixelCatch instances stepped together with auto-reset."""

    def __init__(self, n, rng, env_kwargs=None):
        self.envs = [PixelCatchEnv(**(env_kwargs or {})) for _ in range(n)]
        self.rng = rng
        self.obs = np.stack([e.reset(self._seed()) for e in self.envs])
        self.returns = np.zeros(n)
        self.t = 0  # steps taken so far, shared by all envs

    def _seed(self):
        return int(self.rng.integers(2**31))

    def step(self, actions):
        rewards = np.zeros(len(self.envs))
        dones = np.zeros(len(self.envs), dtype=bool)
        finished = []
        for i, env in enumerate(self.envs):
            obs, rewards[i], dones[i] = env.step(actions[i])
            self.returns[i] += rewards[i]
            if dones[i]:
                finished.append(self.returns[i])
                self.returns[i] = 0.0
                obs = env.reset(self._seed())
            self.obs[i] = obs
        self.t += 1
        return rewards, dones, finished


def collect_rollout(net, venv, cfg, rng):
    """Roll ``cfg.n_steps`` steps in every env with actions sampled from the policy."""
    n, e = cfg.n_steps, len(venv.envs)
    obs_shape = venv.obs.shape[1:]
    buf = RolloutBuffer(
        observations=np.zeros((n, e) + obs_shape),
        actions=np.zeros((n, e), dtype=np.int64),
        log_probs=np.zeros((n, e)),
        rewards=np.zeros((n, e)),
        values=np.zeros((n + 1, e)),
        dones=np.zeros((n, e)),
        attacked=np.zeros(n, dtype=bool),
    )
    adv = cfg.adv_training
    for t in range(n):
        obs = venv.obs.copy()
        # global frame counter, so the attack period carries across rollouts
        if adv is not None and venv.t % adv.every_k == 0:
            obs = pgd_attack(net, obs, adv.attack, rng).s_adv
            buf.attacked[t] = True
        dist, value = net.forward(obs)
        actions = sample_actions(dist.probs, rng)
        buf.observations[t] = obs
        buf.actions[t] = actions
        buf.log_probs[t] = np.log(dist.probs[np.arange(e), actions])
        buf.values[t] = value
        buf.rewards[t], buf.dones[t], finished = venv.step(actions)
        buf.finished_episodes.extend(finished)
    _, last_value = net.forward(venv.obs)
    buf.values[n] = last_value
    buf.advantages, buf.returns = gae(buf.rewards, buf.values, buf.dones, cfg.gamma, cfg.gae_lambda)
    return buf


def ppo_loss(net, obs, actions, old_log_probs, advantages, returns, cfg):
    """Total loss tensor and its parts for one minibatch."""
    if cfg.normalize_advantage and len(advantages) > 1:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    logits, values = net.logits_and_value(obs)
    log_probs = T.log_softmax(logits)
    new_log_probs = T.take_along(log_probs, actions)
    ratio = T.exp(T.sub(new_log_probs, old_log_probs))
    surrogate = T.minimum(T.mul(ratio, advantages),
                          T.mul(T.clamp(ratio, 1 - cfg.clip_ratio, 1 + cfg.clip_ratio), advantages))
    policy_loss = T.scale(T.mean(surrogate), -1.0)
    err = T.sub(values, returns)
    value_loss = T.mean(T.mul(err, err))
    entropy = T.scale(T.mean(T.sum_(T.mul(T.exp(log_probs), log_probs), axis=1)), -1.0)
    total = T.add(T.add(policy_loss, T.scale(value_loss, cfg.vf_coef)), T.scale(entropy, -cfg.ent_coef))
    clip_fraction = float(np.mean(np.abs(ratio.data - 1) > cfg.clip_ratio))
    return total, {"policy_loss": float(policy_loss.data), "value_loss": float(value_loss.data),
                   "entropy": float(entropy.data), "clip_fraction": clip_fraction}


class Adam:
    def __init__(self, params, lr, eps=1e-8, betas=(0.9, 0.999)):
        self.params = params
        self.lr, self.eps, self.betas = lr, eps, betas
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.data = p.data - (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / (norm + 1e-6))
    return norm


def ppo_update(net, buf, cfg, rng, optimizer):
    obs, actions, old_lp, adv, ret = buf.flat()
    params = net.parameters()
    stats = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(actions))
        for lo in range(0, len(order), cfg.minibatch_size):
            mb = order[lo:lo + cfg.minibatch_size]
            net.zero_grad()
            loss, parts = ppo_loss(net, obs[mb], actions[mb], old_lp[mb], adv[mb], ret[mb], cfg)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite PPO loss {float(loss.data)}")
            T.backward(loss)
            clip_grad_norm(params, cfg.max_grad_norm)
            optimizer.step()
            stats.append(parts)
    return {k: float(np.mean([s[k] for s in stats])) for k in stats[0]}


def train(arch=None, cfg=TrainConfig(), log_path=None, env_kwargs=None, progress=None):
    """Train a fresh policy; returns ``(net, history)``.

    Runs ``total_steps // rollout_length`` updates, so the step budget is
    never exceeded.

    ``history`` holds one dict per update with the ``LOG_COLUMNS`` fields. A
    non-finite loss raises :class:`TrainingDiverged` carrying the parameters
    from before the failing update.
    """
    arch = ArchitectureConfig() if arch is None else arch
    rng = np.random.default_rng(cfg.seed)
    net = PolicyNetwork(arch, seed=int(rng.integers(2**31)))
    venv = VecCatch(cfg.n_envs, np.random.default_rng(rng.integers(2**31)), env_kwargs)
    optimizer = Adam(net.parameters(), cfg.learning_rate, eps=cfg.adam_eps)
    history, recent = [], []
    steps = 0
    update = 0
    writer = None
    fh = open(log_path, "w", newline="") if log_path else None
    try:
        if fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
        # only whole rollouts that fit in the budget
        while steps + cfg.rollout_length <= cfg.total_steps:
            if cfg.anneal_lr:
                # linear decay to zero over the step budget
                optimizer.lr = cfg.learning_rate * (1.0 - steps / cfg.total_steps)
            buf = collect_rollout(net, venv, cfg, rng)
            steps += len(buf)
            recent = (recent + buf.finished_episodes)[-20:]
            last_good = net.state_dict()
            try:
                stats = ppo_update(net, buf, cfg, rng, optimizer)
            except FloatingPointError as exc:
                net.load_state_dict(last_good)
                raise TrainingDiverged(str(exc), last_good) from exc
            update += 1
            row = {"update_index": update, "env_steps": steps,
                   "mean_episode_reward": float(np.mean(recent)) if recent else float("nan"),
                   **stats, "attacked_step_fraction": float(buf.attacked.mean())}
            history.append(row)
            if writer:
                writer.writerow([row[c] if isinstance(row[c], int) else f"{row[c]:.6g}" for c in LOG_COLUMNS])
                fh.flush()
            if progress:
                progress(row)
            log.info("update %d steps %d reward %.3f", update, steps, row["mean_episode_reward"])
    finally:
        if fh:
            fh.close()
    return net, history
