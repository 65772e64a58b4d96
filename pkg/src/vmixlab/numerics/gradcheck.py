"""Central-difference verification of reverse-mode gradients.

Runs in float64 only: float32 rounding would swamp the O(h^2) truncation
error of the central difference and make the relative-error bound useless.
"""

import math

import numpy as np

from .rng import Rng
from .tensor import Tensor


def finite_diff_grad_check(f, params, h: float = 1e-3, max_coords: int = 64,
                           rng: Rng | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    f takes the param list and returns a scalar Tensor. For each parameter,
    up to max_coords coordinates are probed (all of them when the parameter
    is small). Relative error per coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-8).
    """
    if not 1e-4 <= h <= 1e-2:
        raise ValueError(f"step h={h} outside [1e-4, 1e-2]")
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("finite_diff_grad_check requires float64 parameters")
        p.zero_grad()
    out = f(params)
    if not math.isfinite(out.item()):
        raise FloatingPointError("objective is not finite")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = rng or Rng(0, "gradcheck")
    worst = 0.0
    for k, (p, an) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.child(f"coords{k}").permutation(n)[:max_coords]
        an_flat = an.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = f(params).item()
            flat[c] = orig - h
            fm = f(params).item()
            flat[c] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(an_flat[c] - num) / (abs(an_flat[c]) + abs(num) + 1e-8)
            worst = max(worst, err)
    return worst
