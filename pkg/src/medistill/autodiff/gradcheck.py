"""Central finite-difference oracle for checking analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from medistill.autodiff.tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5,
                   indices: Sequence[tuple] | None = None) -> np.ndarray:
    """d fn() / d tensor by central differences, perturbing ``tensor.data`` in place.

    ``indices`` restricts the probe to a subset of entries (others stay 0).
    """
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat_indices = indices if indices is not None else list(np.ndindex(tensor.shape))
    for idx in flat_indices:
        original = tensor.data[idx].copy()
        tensor.data[idx] = original + h
        plus = float(fn().data)
        tensor.data[idx] = original - h
        minus = float(fn().data)
        tensor.data[idx] = original
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a| + |n|, floor) style relative error over the whole array."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between backward() and finite differences over ``inputs``.

    With ``max_entries`` only a random subset of entries per input is probed.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        indices = None
        if max_entries is not None and t.size > max_entries:
            flat = rng.choice(t.size, size=max_entries, replace=False)
            indices = [np.unravel_index(i, t.shape) for i in flat]
        numeric = numerical_grad(fn, t, h=h, indices=indices)
        if indices is not None:
            sel = tuple(np.array(ix) for ix in zip(*indices))
            worst = max(worst, relative_error(analytic[sel], numeric[sel]))
        else:
            worst = max(worst, relative_error(analytic, numeric))
    return worst
