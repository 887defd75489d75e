"""Episode-reward evaluation under the clean, attacked and recovered regimes.

Episodes run in lockstep as one batch, so every attack step is a single
batched PGD call. In the attacked regimes every frame is perturbed.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, pgd_attack
from .env import PixelCatchEnv
from .metrics import StepRecord, reward_summary
from .recovery import RecoveryConfig, recover_policy

REGIMES = ("clean", "attacked", "attacked+recovery")


@dataclass
class RewardResult:
    mean: float
    std: float
    per_episode: list
    records: list = field(default_factory=list)

    def summary(self):
        return reward_summary(self.per_episode)


def _run_batch(net, seeds, regime, attack, recovery, env_kwargs, policy, collect):
    envs = [PixelCatchEnv(**env_kwargs) for _ in seeds]
    obs = np.stack([env.reset(seed) for env, seed in zip(envs, seeds)])
    totals = np.zeros(len(envs))
    active = np.ones(len(envs), dtype=bool)
    records = []
    while active.any():
        idx = np.flatnonzero(active)
        s = obs[idx]
        if regime == "clean":
            actions = policy(s, [envs[i] for i in idx]) if policy else net.act(s)
        else:
            s_adv = pgd_attack(net, s, attack).s_adv
            attacked, _ = net.forward(s_adv)
            if regime == "attacked+recovery":
                recovered, _ = recover_policy(net, s_adv, recovery)
                actions = recovered.argmax
            else:
                recovered = attacked
                actions = attacked.argmax
            if collect:
                clean, _ = net.forward(s)
                records.extend(StepRecord(clean.probs[j], attacked.probs[j], recovered.probs[j])
                               for j in range(len(idx)))
        for j, i in enumerate(idx):
            obs[i], reward, done = envs[i].step(actions[j])
            totals[i] += reward
            if done:
                active[i] = False
    return totals.tolist(), records


def evaluate_reward(net, episodes, regime="clean", attack=None, seeds=None, *, recovery=None,
                    env_kwargs=None, policy=None, collect=False, workers=1):
    """Mean, population std and per-episode rewards over ``episodes`` seeded episodes.

    ``policy(obs_batch, envs) -> actions`` replaces the network in the clean
    regime (scripted baselines). With ``collect`` the attacked regimes also
    return one :class:`StepRecord` per attacked step.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    attack = AttackConfig() if attack is None else attack
    recovery = RecoveryConfig() if recovery is None else recovery
    seeds = list(range(episodes)) if seeds is None else list(seeds)
    if len(seeds) != episodes:
        raise ValueError(f"{episodes} episodes but {len(seeds)} seeds")
    env_kwargs = env_kwargs or {}
    chunks = [seeds] if workers <= 1 else [c.tolist() for c in np.array_split(seeds, workers) if len(c)]
    args = (regime, attack, recovery, env_kwargs, policy, collect)
    if len(chunks) == 1:
        results = [_run_batch(net, chunks[0], *args)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _run_batch(net, c, *args), chunks))
    per_episode = [v for totals, _ in results for v in totals]
    records = [r for _, recs in results for r in recs]
    summary = reward_summary(per_episode)
    return RewardResult(summary["mean"], summary["std"], per_episode, records)


def scripted_optimal(obs, envs):
    return np.array([env.optimal_action() for env in envs])
