"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import GradientError, GradTape, Tensor


def finite_diff_check(
    f: Callable[[], Tensor],
    x: Tensor,
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between the tape gradient of ``f`` w.r.t. ``x`` and
    central differences.

    ``f`` is a zero-argument closure that reads ``x`` (typically a parameter of
    a model) and returns a scalar tensor. The per-coordinate error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.

    Args:
        f: scalar-valued closure.
        x: a float64 tensor with ``requires_grad`` set; perturbed in place and
            restored afterwards.
        h: finite-difference step.
        max_coords: if given, only this many randomly chosen coordinates are
            perturbed (the analytic gradient is still computed in full).
        rng: generator used for coordinate sampling.

    Raises:
        TypeError: if ``x`` is not 64-bit.
        GradientError: if ``f`` is not scalar-valued.
    """
    if x.dtype != np.float64:
        raise TypeError(f"finite_diff_check needs float64 tensors, got {x.dtype}")
    saved_flag, saved_grad, base = x.requires_grad, x.grad, x.data
    x.requires_grad, x.grad = True, None
    try:
        with GradTape() as tape:
            out = f()
        if out.size != 1:
            raise GradientError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
        if out._tape is tape:
            tape.backward(out)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

        flat = base.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and max_coords < flat.size:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        work = flat.copy()
        x.data = work.reshape(base.shape)
        for i in coords:
            work[i] = flat[i] + h
            fp = f().item()
            work[i] = flat[i] - h
            fm = f().item()
            work[i] = flat[i]
            numeric = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        return float(worst)
    finally:
        x.data, x.requires_grad, x.grad = base, saved_flag, saved_grad
