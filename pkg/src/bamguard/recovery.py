"""Attention-mask recovery of the activation feeding the BAM layer.

For a BAM at layer ``l``: ``f_pre`` is the output of layers ``1..l-1`` on the
(possibly attacked) observation, ``f_bam`` is the BAM attention map on
``f_pre`` and ``f_rec = f_pre * f_bam``. The forward pass then resumes from
``f_rec``, either after the BAM layer (``after_bam``, BAM bypassed) or at the
BAM layer itself (``at_bam``).
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bam import bam_attention
from .metrics import StepRecord
from .policy import ActionDistribution, ConfigError

REENTRY_MODES = ("after_bam", "at_bam")


@dataclass(frozen=True)
class RecoveryConfig:
    reentry: str = "after_bam"

    def __post_init__(self):
        if self.reentry not in REENTRY_MODES:
            raise ValueError(f"reentry must be one of {REENTRY_MODES}, got {self.reentry!r}")


@dataclass
class AttentionTap:
    f_pre: np.ndarray
    f_bam: np.ndarray
    f_rec: np.ndarray


def recover_policy(net, s_adv, cfg=RecoveryConfig(), attention=None):
    """Recovered action distribution for ``s_adv`` and the tapped tensors.

    ``attention`` replaces the computed attention map when given (used to probe
    the identity and zero masks).
    """
    if not net.config.has_bam:
        raise ConfigError("recovery needs a network with a BAM layer")
    l = net.bam_index
    with T.no_grad():
        f_pre = net.forward_prefix(s_adv, 1, l - 1)
        if attention is None:
            f_bam = bam_attention(f_pre, net.bam_layer.bam)
        else:
            f_bam = T.Tensor(np.broadcast_to(attention, f_pre.shape), dtype=f_pre.dtype)
        f_rec = T.mul(f_pre, f_bam)
        assert np.array_equal(f_rec.data, f_pre.data * f_bam.data)
        start = l + 1 if cfg.reentry == "after_bam" else l
        logits = net.forward_prefix(None, start, net.n_layers, inject=f_rec)
    return ActionDistribution.from_logits(logits.data), AttentionTap(f_pre.data, f_bam.data, f_rec.data)


def recovery_effect(net, s, s_adv, cfg=RecoveryConfig()):
    """Clean, attacked and recovered distributions for paired observations.

    Returns one :class:`StepRecord` per sample.
    """
    if hasattr(s_adv, "s_adv"):
        s_adv = s_adv.s_adv
    s = np.asarray(s)
    s_adv = np.asarray(s_adv)
    if s.shape != s_adv.shape:
        raise T.DimensionError(f"clean {s.shape} and attacked {s_adv.shape} observations differ in shape")
    clean, _ = net.forward(s)
    attacked, _ = net.forward(s_adv)
    recovered, _ = recover_policy(net, s_adv, cfg)
    return [StepRecord(clean.probs[i], attacked.probs[i], recovered.probs[i])
            for i in range(len(clean))]
