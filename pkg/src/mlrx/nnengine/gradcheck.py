"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(
    loss_fn: Callable[[], float],
    t: Tensor,
    h: float = 1e-5,
    indices: Sequence[tuple] | None = None,
) -> np.ndarray:
    """Finite-difference gradient of ``loss_fn`` w.r.t. ``t.data``.

    For complex tensors the result uses the engine's convention
    ``dL/dRe + 1j dL/dIm``. With ``indices`` only those entries are probed and
    the returned array has one value per index.
    """
    data = t.data
    idx_list = list(np.ndindex(data.shape)) if indices is None else [tuple(i) for i in indices]
    out = np.zeros(len(idx_list), dtype=data.dtype)
    steps = [h, 1j * h] if np.iscomplexobj(data) else [h]
    for n, idx in enumerate(idx_list):
        for step in steps:
            orig = data[idx]
            data[idx] = orig + step
            up = loss_fn()
            data[idx] = orig - step
            down = loss_fn()
            data[idx] = orig
            d = (up - down) / (2 * h)
            out[n] += d if step == h else 1j * d
    return out if indices is not None else out.reshape(data.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over entries."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def sample_indices(shape, count: int, rng: np.random.Generator) -> list[tuple]:
    total = int(np.prod(shape))
    flat = rng.choice(total, size=min(count, total), replace=False)
    return [np.unravel_index(i, shape) for i in flat]
