import numpy as np


def orthogonal(shape, gain=1.0, rng=None):
    """Orthogonal init over the flattened fan-in, as used for Atari PPO policies."""
    rng = np.random.default_rng() if rng is None else rng
    rows = shape[0]
    cols = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return (gain * q[:rows, :cols]).reshape(shape)
