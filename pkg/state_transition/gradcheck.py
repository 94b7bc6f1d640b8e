from typing import Callable

import numpy as np


def central_difference_gradient(fn: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """
    Numerical gradient of fn() with respect to every entry of array, by central differences.
    array is perturbed in place and restored entry by entry, so fn must read it on every call.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]

        flat[i] = old + step
        value_right = fn()

        flat[i] = old - step
        value_left = fn()

        flat[i] = old
        flat_grad[i] = (value_right - value_left) / (2.0 * step)

    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    "||a - n|| / max(||a||, ||n||), with norms taken over all entries"
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)
