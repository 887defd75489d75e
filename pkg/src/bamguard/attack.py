"""L-infinity projected gradient attacks on policy observations."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

EPSILON_GRID = (0.01, 0.05, 0.1, 0.5)


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    step_size: float | None = None
    iterations: int = 10
    random_start: bool = False
    loss_kind: str = "ce_vs_clean_argmax"

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.step_size is not None and self.iterations > 0 and not self.step_size > 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.loss_kind != "ce_vs_clean_argmax":
            raise ValueError(f"unknown attack loss {self.loss_kind!r}")

    @property
    def alpha(self):
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / max(self.iterations, 1)


@dataclass
class AdversarialObservation:
    s_adv: np.ndarray
    linf: float
    iterations: int
    loss_trace: list = field(default_factory=list)


def project(x, s, epsilon):
    """Nearest point of the box ``[s - eps, s + eps]`` intersected with ``[0, 1]``."""
    return np.clip(np.clip(x, s - epsilon, s + epsilon), 0.0, 1.0)


def clean_argmax_ce(net, s):
    """Cross-entropy against the clean greedy action of each sample, summed over the batch."""
    labels = net.act(s)

    def objective(x):
        logits, _ = net.logits_and_value(x)
        return T.scale(T.sum_(T.take_along(T.log_softmax(logits), labels)), -1.0)

    return objective


def pgd_attack(net, s, cfg=AttackConfig(), rng=None, objective=None):
    """Signed-gradient ascent on the attack loss, projected after every step.

    ``s`` is one observation ``(k, H, W)`` or a batch ``(N, k, H, W)``; the
    result has the same shape. ``objective`` maps an input tensor to a scalar
    loss and defaults to cross-entropy against the clean greedy action.
    """
    s = np.asarray(s, dtype=np.float64)
    if cfg.epsilon == 0 or cfg.iterations == 0:
        return AdversarialObservation(s.copy(), 0.0, 0, [])
    eps, alpha = cfg.epsilon, cfg.alpha
    if objective is None:
        objective = clean_argmax_ce(net, s)
    if cfg.random_start:
        rng = np.random.default_rng() if rng is None else rng
        x = project(s + rng.uniform(-eps, eps, size=s.shape), s, eps)
    else:
        x = s.copy()
    dtype = net.dtype if net is not None else T.default_dtype()
    trace = []
    for _ in range(cfg.iterations):
        xt = T.Tensor(x, requires_grad=True, dtype=dtype)
        loss = objective(xt)
        T.backward(loss, inputs=(xt,))
        grad = xt.grad
        if not np.all(np.isfinite(grad)) or not np.isfinite(loss.data):
            raise AttackError(f"non-finite attack gradient (loss={float(loss.data)})")
        trace.append(float(loss.data))
        x = project(x + alpha * np.sign(grad), s, eps)
    return AdversarialObservation(x, float(np.max(np.abs(x - s))), cfg.iterations, trace)


def attack_success(clean, attacked):
    """Whether the greedy action changed (lowest index wins ties on both sides)."""
    changed = np.asarray(clean.argmax) != np.asarray(attacked.argmax)
    return bool(changed) if changed.ndim == 0 else changed
