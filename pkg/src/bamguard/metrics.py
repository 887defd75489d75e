"""Defense metrics over paired clean / attacked / recovered action distributions.

All percentages use every attacked step as the denominator:

* successful attacks: attacked greedy action differs from the clean one
* reversed-top-1: recovered action equals the clean greedy action
* reversed-top-2: recovered action is among the two most likely clean actions
* reversed-any: recovered action differs from the attacked one, or the attack
  did not change the action in the first place
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

SCHEMA_VERSION = 1
METRIC_NAMES = ("successful_attacks", "reversed_top1", "reversed_top2", "reversed_any")
UNDEFINED = "undefined"


@dataclass
class StepRecord:
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        for name in ("p", "q", "r"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.ndim != 1 or v.size < 2 or np.any(v < 0) or abs(v.sum() - 1) > 1e-6:
                raise ValueError(f"{name} is not a distribution over >= 2 actions: {v}")
            setattr(self, name, v)
        if not self.p.shape == self.q.shape == self.r.shape:
            raise ValueError("p, q and r must cover the same actions")

    @property
    def a_p(self):
        return int(np.argmax(self.p))

    @property
    def a_q(self):
        return int(np.argmax(self.q))

    @property
    def a_r(self):
        return int(np.argmax(self.r))

    @property
    def top2(self):
        return tuple(int(a) for a in np.argsort(-self.p, kind="stable")[:2])


@dataclass
class MetricsReport:
    epsilon: float | None
    env_id: str
    n_steps: int
    counts: dict
    percent: dict
    rewards: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "epsilon": self.epsilon,
            "env_id": self.env_id,
            "n_steps": self.n_steps,
            "counts": dict(self.counts),
            "percent": dict(self.percent),
            "rewards": self.rewards,
        }


def metric_flags(a_p, a_q, a_r, top2):
    """Per-step boolean indicators for the four metrics."""
    a_p, a_q, a_r = (np.asarray(v) for v in (a_p, a_q, a_r))
    top2 = np.asarray(top2)
    return {
        "successful_attacks": a_q != a_p,
        "reversed_top1": a_r == a_p,
        "reversed_top2": (top2 == a_r[:, None]).any(axis=1),
        "reversed_any": (a_r != a_q) | (a_q == a_p),
    }


def compute_metrics(records, epsilon=None, env_id="PixelCatch"):
    if not len(records):
        raise ValueError("compute_metrics needs at least one record")
    a_p = np.array([rec.a_p for rec in records])
    a_q = np.array([rec.a_q for rec in records])
    a_r = np.array([rec.a_r for rec in records])
    top2 = np.array([rec.top2 for rec in records])
    flags = metric_flags(a_p, a_q, a_r, top2)
    counts = {k: int(v.sum()) for k, v in flags.items()}
    n = len(records)
    percent = {k: 100.0 * counts[k] / n for k in METRIC_NAMES}
    return MetricsReport(epsilon, env_id, n, counts, percent)


def control_records(records):
    """The no-defense control: the 'recovered' action is the attacked one."""
    return [StepRecord(rec.p, rec.q, rec.q) for rec in records]


def improvement_ratio(defended, best_baseline):
    if not best_baseline > 0:
        return UNDEFINED
    return defended / best_baseline


def reward_summary(per_episode):
    per_episode = [float(v) for v in per_episode]
    mean = float(np.mean(per_episode))
    # population std over episodes
    std = float(np.std(per_episode))
    return {"mean": mean, "std": std, "episodes": per_episode}


CSV_COLUMNS = ("epsilon", "regime", "n_steps", *METRIC_NAMES, "reward_mean", "reward_std", "n_episodes")


def reports_to_csv(rows):
    """Render ``[(epsilon, regime, MetricsReport | None, reward_summary | None), ...]``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for eps, regime, report, reward in rows:
        metrics = ["" if report is None else f"{report.percent[k]:.4f}" for k in METRIC_NAMES]
        writer.writerow([
            "" if eps is None else f"{eps:g}", regime,
            "" if report is None else report.n_steps, *metrics,
            "" if reward is None else f"{reward['mean']:.4f}",
            "" if reward is None else f"{reward['std']:.4f}",
            "" if reward is None else len(reward["episodes"]),
        ])
    return buf.getvalue()


def dumps_json(obj):
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"not serializable: {type(o)}")

    return json.dumps(obj, indent=2, sort_keys=True, default=default) + "\n"

