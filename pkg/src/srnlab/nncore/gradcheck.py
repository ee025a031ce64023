"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from collections.abc import Callable, Mapping

import numpy as np


class GradientCheckError(RuntimeError):
    pass


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps entries whose true gradient is ~0 from amplifying
    finite-difference round-off into spurious failures.
    """
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_gradient(loss: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = loss()
        flat[i] = orig - step
        minus = loss()
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * step)
    return grad


def backward_check(loss_and_grads: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
                   params: Mapping[str, np.ndarray], step: float = 1e-5,
                   floor: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_and_grads`` evaluates the scalar loss at the current contents of
    the arrays in ``params`` (which are perturbed in place and restored) and
    returns the analytic gradients keyed like ``params``.
    """
    _, grads = loss_and_grads()
    grads = {k: np.array(v, dtype=np.float64) for k, v in grads.items()}
    worst = 0.0
    for name, array in params.items():
        if array.dtype != np.float64:
            raise GradientCheckError(f"{name}: gradient checks require float64, got {array.dtype}")
        analytic = grads.get(name)
        if analytic is None:
            raise GradientCheckError(f"no analytic gradient returned for {name!r}")
        if analytic.shape != array.shape:
            raise GradientCheckError(f"{name}: gradient shape {analytic.shape} != param shape {array.shape}")
        if not np.all(np.isfinite(analytic)):
            raise GradientCheckError(f"{name}: non-finite analytic gradient")
        numeric = numeric_gradient(lambda: float(loss_and_grads()[0]), array, step)
        if not np.all(np.isfinite(numeric)):
            raise GradientCheckError(f"{name}: non-finite numeric gradient")
        if array.size:
            worst = max(worst, float(relative_error(analytic, numeric, floor).max()))
    return worst
