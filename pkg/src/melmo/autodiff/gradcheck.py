"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from ..errors import ContractError, OracleError
from .tensor import Tensor, no_grad


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ContractError(f"gradient oracle needs a scalar function, got shape {value.shape}")
    return value.item()


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> dict[str, float]:
    """Compare analytic and central-difference gradients for each named tensor.

    ``loss_fn`` closes over ``params`` and rebuilds the graph on every call.
    Returns, per tensor, ``max |analytic - numeric| / max(1, |analytic|)``.
    With ``max_coords`` only that many randomly chosen coordinates of each
    tensor are perturbed (plus the one with the largest analytic gradient).
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    saved = {name: (t.requires_grad, t.grad) for name, t in params.items()}
    try:
        for t in params.values():
            t.requires_grad = True
            t.grad = None
        loss = loss_fn()
        base = _scalar(loss)
        if loss.requires_grad:
            loss.backward()
        analytic = {
            name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
            for name, t in params.items()
        }
        with no_grad():
            again = _scalar(loss_fn())
        if again != base:
            raise OracleError(f"function is not deterministic: {base!r} then {again!r}")

        rng = np.random.default_rng(seed)
        errors: dict[str, float] = {}
        with no_grad():
            for name, t in params.items():
                flat = t.data.reshape(-1)
                a_flat = analytic[name].reshape(-1)
                coords = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    picked = rng.choice(flat.size, size=max_coords, replace=False)
                    coords = np.union1d(picked, [int(np.argmax(np.abs(a_flat)))])
                worst = 0.0
                for i in coords:
                    orig = flat[i]
                    flat[i] = orig + h
                    f_plus = _scalar(loss_fn())
                    flat[i] = orig - h
                    f_minus = _scalar(loss_fn())
                    flat[i] = orig
                    numeric = (f_plus - f_minus) / (2.0 * h)
                    err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
                    worst = max(worst, err)
                errors[name] = worst
        return errors
    finally:
        for name, t in params.items():
            t.requires_grad, t.grad = saved[name]


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the analytic and numeric gradient of ``f`` at ``x``."""
    errors = check_gradients(lambda: f(x), {"x": x}, h=h)
    return errors["x"]
