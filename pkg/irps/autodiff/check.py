"""
Finite-difference gradient check
"""

from typing import Callable, Optional

import numpy as np

from .tape import Tape, Tensor


def gradcheck(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between the taped gradient and central differences

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).

    Args:
        f: Scalar-valued function of x built from primitives
        x: Point to check at (its data is restored afterwards)
        step: Central-difference step
        coords: Check only this many seeded random coordinates
        seed: RNG seed for the coordinate subset
    """
    x.requires_grad = True
    x.zero_grad()
    with Tape() as tape:
        out = f(x)
    tape.backward(out)
    analytic = x.grad.copy().reshape(-1)

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if coords is not None and coords < flat.size:
        idx = np.random.default_rng(seed).choice(flat.size, size=coords, replace=False)

    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        up = f(x).item()
        flat[i] = orig - step
        down = f(x).item()
        flat[i] = orig
        numeric = (up - down) / (2 * step)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
