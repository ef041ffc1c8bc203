"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, tensor_sum

DEFAULT_EPS = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor_frac: float = 0.01) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor), floor = floor_frac * max|a|.

    Entries far below the tensor's gradient scale are judged against that
    scale rather than their own magnitude, where fp32 rounding dominates.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(n).max(initial=0.0)))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor_frac * scale)
    return float((np.abs(a - n) / denom).max())


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = DEFAULT_EPS,
    max_probes: int | None = 40,
    seed: int = 0,
) -> float:
    """Worst relative error between backward() and central differences.

    ``fn(*inputs)`` may return any tensor; it is reduced to a scalar by a
    fixed random projection so every output element contributes.  At most
    ``max_probes`` coordinates per input are perturbed.
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    proj = rng.uniform(-1.0, 1.0, size=out.dims).astype(np.float32)

    def scalar_value() -> float:
        return float(np.sum(fn(*inputs).data.astype(np.float64) * proj))

    for t in inputs:
        t.grad = None
    loss = tensor_sum(out * Tensor(proj)) if out.dims else out * float(proj)
    backward(loss)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        size = t.data.size
        if max_probes is None or size <= max_probes:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, max_probes, replace=False))
        numeric = np.empty(len(coords))
        flat = t.data.reshape(-1)
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + np.float32(eps)
            plus = scalar_value()
            flat[c] = orig - np.float32(eps)
            minus = scalar_value()
            flat[c] = orig
            step = (np.float64(np.float32(orig + np.float32(eps))) - np.float64(np.float32(orig - np.float32(eps))))
            numeric[j] = (plus - minus) / step
        worst = max(worst, relative_error(analytic.reshape(-1)[coords], numeric))
    return worst
