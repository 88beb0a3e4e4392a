"""Central-difference gradient checking for the hand-derived backprop."""
from __future__ import annotations

from typing import Callable

import numpy as np


def finite_difference_gradients(
    loss_fn: Callable[[], float],
    params: dict[str, np.ndarray],
    rel_step: float = 1e-6,
) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` with respect to every entry.

    ``loss_fn`` must read the parameter arrays in place; entries are
    perturbed and restored one at a time.
    """
    grads: dict[str, np.ndarray] = {}
    for name, arr in params.items():
        flat = arr.ravel()
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            h = rel_step * max(1.0, abs(orig))
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
        grads[name] = g.reshape(arr.shape)
    return grads


def max_relative_error(
    analytic: dict[str, np.ndarray],
    numeric: dict[str, np.ndarray],
    floor: float = 1e-4,
) -> float:
    """Worst elementwise |a - n| / max(|a| + |n|, floor) over all groups.

    The floor keeps finite-difference truncation noise on near-zero entries
    from dominating; a genuinely wrong gradient still produces an error on
    the order of the gradient itself and is caught.
    """
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        rel = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)
        worst = max(worst, float(rel.max()))
    return worst
