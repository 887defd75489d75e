"""Central finite-difference checks for the autodiff engine (run in float64)."""

import numpy as np

from . import tensor as T


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps near-zero gradients from turning round-off into large
    relative errors.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _eval(f):
    with T.branch_log() as log:
        value = float(f().data)
    return value, log


def _same_branches(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(f, tensor, h=1e-5, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``tensor.data``.

    ``indices`` restricts the check to a subset of flat positions. Positions
    not probed, and positions where a step of ``h`` flips a relu/minimum/clamp
    branch (a kink lies inside the stencil), are NaN.
    """
    flat = tensor.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    _, base = _eval(f)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + h
        up, up_branches = _eval(f)
        flat[i] = old - h
        down, down_branches = _eval(f)
        flat[i] = old
        if _same_branches(base, up_branches) and _same_branches(base, down_branches):
            out[i] = (up - down) / (2 * h)
    return out.reshape(tensor.shape)


def check_gradients(f, tensors, h=1e-5, max_entries=None, rng=None, stats=None):
    """Worst relative error between backprop and central differences over ``tensors``.

    ``f`` builds a scalar loss from the current values of ``tensors``. With
    ``max_entries`` each tensor is probed at that many random positions.
    Positions straddling a kink are skipped; pass a dict as ``stats`` to get
    the ``checked``/``skipped`` counts.
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
        t.grad = None
    T.backward(f(), inputs=tensors)
    worst = 0.0
    rng = np.random.default_rng(0) if rng is None else rng
    for t in tensors:
        idx = None
        if max_entries is not None and t.data.size > max_entries:
            idx = rng.choice(t.data.size, size=max_entries, replace=False)
        num = numeric_grad(f, t, h, idx)
        mask = ~np.isnan(num)
        if stats is not None:
            probed = t.data.size if idx is None else len(idx)
            stats["checked"] = stats.get("checked", 0) + int(mask.sum())
            stats["skipped"] = stats.get("skipped", 0) + probed - int(mask.sum())
        if mask.any():
            worst = max(worst, float(relative_error(t.grad[mask], num[mask]).max()))
    return worst
