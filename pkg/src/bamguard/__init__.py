"""Attention-map activation recovery for vision-based RL policies under PGD attack.

Subpackages are plain modules: ``tensor`` (autodiff), ``bam``, ``policy``,
``attack``, ``recovery``, ``env``, ``ppo``, ``metrics``, ``evaluate`` and
``cli``.
"""

__version__ = "0.1.0"
