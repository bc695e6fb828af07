"""Central finite-difference gradient checking.

Used by the test suite to verify every hand-written backward pass, and
available to users who extend the model.  Run checks in float64: the
default step of 1e-5 balances truncation against roundoff there.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward


def finite_difference_gradients(
    fn: Callable[[], float], arrays: Sequence[np.ndarray], step: float = 1e-5
) -> list[np.ndarray]:
    """Numeric d fn / d array via central differences, one entry at a time.

    ``fn`` must read the arrays in place (they are perturbed and restored).
    """
    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = fn()
            flat[i] = original - step
            minus = fn()
            flat[i] = original
            gflat[i] = (plus - minus) / (2.0 * step)
        grads.append(grad)
    return grads


def max_relative_error(
    analytic: Sequence[np.ndarray],
    numeric: Sequence[np.ndarray],
    floor: float = 1e-3,
) -> float:
    """Worst-case elementwise |a - n| / max(|a|, |n|, floor).

    The floor makes the comparison absolute for near-zero gradients,
    where the relative form would only amplify finite-difference noise.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check_gradients(
    build_loss: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Compare tape gradients of build_loss() against finite differences.

    Returns the worst relative error over all given parameter tensors.
    ``build_loss`` is re-invoked for every perturbation, so it must be a
    pure function of the parameter data.
    """
    for p in params:
        p.grad = None
    loss = build_loss()
    backward(loss)
    analytic = [
        p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    numeric = finite_difference_gradients(
        lambda: build_loss().item(), [p.data for p in params], step=step
    )
    return max_relative_error(analytic, numeric)
