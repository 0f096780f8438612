"""Central finite-difference gradient oracle."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], which: int,
                 step: float = 1e-5, coords: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of ``fn(*inputs)`` w.r.t. ``inputs[which]``.

    Perturbs ``inputs[which].data`` in place and restores it. Returns a flat
    array aligned with ``coords`` (all coordinates when None).
    """
    x = inputs[which].data
    flat = x.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    out = np.empty(len(coords))
    for j, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + step
        fp = float(fn(*inputs).data)
        flat[c] = orig - step
        fm = float(fn(*inputs).data)
        flat[c] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite value while probing input {which} at index {int(c)}")
        out[j] = (fp - fm) / (2.0 * step)
    return out


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    Only inputs with ``requires_grad`` are probed. ``max_coords`` caps the
    number of coordinates sampled per input.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    with Tape() as tape:
        loss = fn(*inputs)
        if loss.data.size != 1:
            raise ValueError(f"function must return a scalar, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("non-finite function value at the base point")
        if tape.holds(loss):
            tape.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = tape.grad(t).reshape(-1)
        bad = np.flatnonzero(~np.isfinite(analytic))
        if bad.size:
            raise FloatingPointError(f"non-finite analytic gradient for input {i} at index {int(bad[0])}")
        coords = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        numeric = numeric_grad(fn, inputs, i, step, coords)
        err = np.abs(analytic[coords] - numeric) / np.maximum(1.0, np.abs(numeric))
        if err.size:
            worst = max(worst, float(err.max()))
    tape.clear()
    return worst
