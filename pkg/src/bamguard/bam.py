"""Bottleneck attention: parallel channel and spatial branches, sigmoid-combined.

The attention map ``M(F) = sigmoid(Mc(F) + Ms(F))`` is exposed on its own
because the recovery defense uses it as a multiplicative mask.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .init import orthogonal


@dataclass
class BamParams:
    channels: int
    reduction: int = 4
    dilation: int = 2
    tensors: dict = field(default_factory=dict)

    @property
    def hidden(self):
        return self.channels // self.reduction


PARAM_SHAPES = (
    # name, shape as a function of (C, hidden)
    ("channel_fc1.weight", lambda c, h: (h, c)),
    ("channel_fc1.bias", lambda c, h: (h,)),
    ("channel_fc2.weight", lambda c, h: (c, h)),
    ("channel_fc2.bias", lambda c, h: (c,)),
    ("spatial_reduce.weight", lambda c, h: (h, c, 1, 1)),
    ("spatial_reduce.bias", lambda c, h: (h,)),
    ("spatial_dilated1.weight", lambda c, h: (h, h, 3, 3)),
    ("spatial_dilated1.bias", lambda c, h: (h,)),
    ("spatial_dilated2.weight", lambda c, h: (h, h, 3, 3)),
    ("spatial_dilated2.bias", lambda c, h: (h,)),
    ("spatial_out.weight", lambda c, h: (1, h, 1, 1)),
    ("spatial_out.bias", lambda c, h: (1,)),
)


def check_bam_geometry(channels, reduction, dilation):
    if reduction < 1 or dilation < 1:
        raise ValueError(f"reduction ({reduction}) and dilation ({dilation}) must be positive")
    if channels % reduction:
        raise ValueError(f"channels {channels} not divisible by reduction ratio {reduction}")


def bam_param_count(channels, reduction=4, dilation=2):
    """Closed-form number of BAM weights and biases for a host with ``channels`` maps."""
    check_bam_geometry(channels, reduction, dilation)
    c, h = channels, channels // reduction
    channel_branch = (c + 1) * h + (h + 1) * c
    spatial_branch = (c + 1) * h + 2 * (9 * h + 1) * h + (h + 1)
    return channel_branch + spatial_branch


def init_bam_params(channels, reduction=4, dilation=2, rng=None, dtype=None, zero=False):
    check_bam_geometry(channels, reduction, dilation)
    rng = np.random.default_rng(0) if rng is None else rng
    params = BamParams(channels, reduction, dilation)
    for name, shape_fn in PARAM_SHAPES:
        shape = shape_fn(channels, params.hidden)
        if zero or name.endswith("bias"):
            data = np.zeros(shape)
        else:
            data = orthogonal(shape, gain=np.sqrt(2), rng=rng)
        params.tensors[name] = T.Tensor(data, requires_grad=True, dtype=dtype)
    return params


def channel_logits(F, params):
    """Channel branch pre-activation, shaped ``(N, C, 1, 1)``."""
    p = params.tensors
    z = T.global_avg_pool(F)
    z = T.relu(T.dense(z, p["channel_fc1.weight"], p["channel_fc1.bias"]))
    z = T.dense(z, p["channel_fc2.weight"], p["channel_fc2.bias"])
    return T.reshape(z, (F.shape[0], F.shape[1], 1, 1))


def spatial_logits(F, params):
    """Spatial branch pre-activation, shaped ``(N, 1, H, W)``."""
    p, d = params.tensors, params.dilation
    z = T.relu(T.conv2d(F, p["spatial_reduce.weight"], p["spatial_reduce.bias"]))
    z = T.relu(T.conv2d(z, p["spatial_dilated1.weight"], p["spatial_dilated1.bias"],
                        padding=d, dilation=d))
    z = T.relu(T.conv2d(z, p["spatial_dilated2.weight"], p["spatial_dilated2.bias"],
                        padding=d, dilation=d))
    return T.conv2d(z, p["spatial_out.weight"], p["spatial_out.bias"])


def bam_attention(F, params):
    """Attention map in (0, 1) with the shape of ``F``."""
    F = T.as_tensor(F)
    if F.ndim != 4 or F.shape[1] != params.channels:
        raise T.DimensionError(
            f"BAM expects (N, {params.channels}, H, W) input, got {F.shape} (axis 1 mismatch)")
    return T.sigmoid(T.add(channel_logits(F, params), spatial_logits(F, params)))


def bam_forward(F, params, attention=None):
    """Residual refinement ``F + F * M(F)``."""
    F = T.as_tensor(F)
    if attention is None:
        attention = bam_attention(F, params)
    return T.add(F, T.mul(F, attention))


def attention_polarization(attention, low=0.1, high=0.9):
    """Fraction of attention entries below ``low`` or above ``high``."""
    if not low < high:
        raise ValueError(f"polarization thresholds need low < high, got {low} >= {high}")
    m = attention.data if isinstance(attention, T.Tensor) else np.asarray(attention)
    return float(np.mean((m < low) | (m > high)))
