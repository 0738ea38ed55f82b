from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericalError
from .tensor import Tensor


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               max_coords: int | None = 8, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is re-evaluated with each checked coordinate of each input nudged by
    +/- step. Large tensors are subsampled to ``max_coords`` coordinates
    (None checks all of them). The error of one coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    for t in inputs:
        if t.value.dtype != np.float64:
            raise TypeError("grad_check needs float64 tensors")
        t.requires_grad = True
        if t.grad is not None:
            t.grad[...] = 0.0
    out = f()
    out.backward()
    analytic = [np.zeros_like(t.value) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.value.reshape(-1)
        if not flat.flags.writeable or not np.shares_memory(flat, t.value):
            raise ValueError(f"cannot perturb {t.name or 'input'} in place")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            fp = float(f().value)
            flat[c] = orig - step
            fm = float(f().value)
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = float(ga.reshape(-1)[c])
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise NumericalError("non-finite value during gradient check")
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
