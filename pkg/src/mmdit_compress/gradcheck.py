"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor


def _value(f: Callable[[], Tensor]) -> float:
    return float(np.asarray(f().data, dtype=np.float64).reshape(()))


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    n_coords: int = 32,
    step: float = 1e-3,
    seed: int = 0,
) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` closes over ``params`` and returns a scalar tensor.  Coordinates are
    sampled uniformly over all parameter entries.  The relative error at one
    coordinate is ``|auto - fd| / (|fd| + 1e-8)``.
    """
    names = list(params)
    if _value(f) != _value(f):
        raise RuntimeError("f is not deterministic: two evaluations differ")

    for p in params.values():
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    if loss.requires_grad:
        tape.backward(loss)

    sizes = np.array([params[n].size for n in names])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for c in np.sort(flat):
        which = int(np.searchsorted(offsets, c, side="right") - 1)
        p = params[names[which]]
        idx = np.unravel_index(int(c - offsets[which]), p.shape)
        orig = p.data[idx]
        p.data[idx] = orig + step
        x_up = float(p.data[idx])
        up = _value(f)
        p.data[idx] = orig - step
        x_down = float(p.data[idx])
        down = _value(f)
        p.data[idx] = orig
        # the realised step, not the nominal one, after rounding to the param dtype
        fd = (up - down) / (x_up - x_down)
        auto = 0.0 if p.grad is None else float(p.grad[idx])
        worst = max(worst, abs(auto - fd) / (abs(fd) + 1e-8))
    return worst
