"""Central finite differences as an independent check on :func:`backward`."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, precision

# Differences are taken in float64 whatever the working precision: the
# analytic gradient is computed at the caller's dtype and compared against
# a reference that is not itself dominated by float32 cancellation.
ORACLE_DTYPE = np.float64


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error for element ``i`` is ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``.
    """
    src = np.asarray(x.data if isinstance(x, Tensor) else x)
    leaf = Tensor(src.copy(), requires_grad=True, name="x")
    analytic = backward(f(leaf), {"x": leaf})["x"].astype(np.float64)

    base = src.astype(ORACLE_DTYPE)
    numeric = np.zeros(base.shape, dtype=np.float64)
    flat = base.reshape(-1)
    with precision(ORACLE_DTYPE):
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(Tensor(base)).data)
            flat[i] = orig - eps
            lo = float(f(Tensor(base)).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return _max_rel(analytic, numeric, floor)


def check_parameters(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Finite-difference check of a closure over named parameters.

    ``loss_fn`` must be deterministic (fix every random draw inside it).
    Parameters are perturbed in place and restored. ``max_entries`` limits
    the checked coordinates per parameter (random subset).
    """
    grads = backward(loss_fn(), params)
    saved = {name: p.data for name, p in params.items()}
    errors = {}
    try:
        for p in params.values():
            p.data = p.data.astype(ORACLE_DTYPE)
        with precision(ORACLE_DTYPE):
            for name, p in params.items():
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
                numeric = np.empty(idx.size)
                for j, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + eps
                    hi = float(loss_fn().data)
                    flat[i] = orig - eps
                    lo = float(loss_fn().data)
                    flat[i] = orig
                    numeric[j] = (hi - lo) / (2 * eps)
                analytic = grads[name].reshape(-1)[idx].astype(np.float64)
                errors[name] = _max_rel(analytic, numeric, floor)
    finally:
        for name, p in params.items():
            p.data = saved[name]
    return errors


def _max_rel(a: np.ndarray, n: np.ndarray, floor: float) -> float:
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
