"""Central finite-difference gradient oracle."""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ContractError, DomainError
from .nn import ParamStore, backward
from .tensor import Tensor


def numeric_grad(f: Callable[[], float], p: np.ndarray, idx: tuple, h: float) -> float:
    old = p[idx]
    p[idx] = old + h
    fp = f()
    p[idx] = old - h
    fm = f()
    p[idx] = old
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise DomainError(f"non-finite objective while perturbing coordinate {idx}")
    return (fp - fm) / (2.0 * h)


def fd_gradcheck(f: Callable[[ParamStore], Tensor], store: ParamStore, h: float = 1e-5,
                 names: list[str] | None = None, max_coords: int | None = None,
                 seed: int = 0, corrupt: float = 0.0) -> float:
    """Max over checked coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` builds a scalar loss from the store.  With ``max_coords`` set, at most
    that many coordinates per parameter tensor are checked (seeded choice);
    otherwise every coordinate is.  ``corrupt`` is added to every analytic
    gradient entry and exists only as a negative control.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"step h={h} outside [1e-7, 1e-3]")
    names = store.names() if names is None else names
    saved = {n: g.copy() for n, g in store.grads.items()}
    store.zero_grad()
    loss = f(store)
    if not np.isfinite(loss.data).all():
        raise DomainError("objective is not finite")
    backward(loss, store)
    analytic = {n: store.grads[n] + corrupt for n in names}
    store.grads.update(saved)

    def value() -> float:
        return float(f(store).data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in names:
        p = store[n].data
        flat = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            flat = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        for k in flat:
            idx = np.unravel_index(k, p.shape)
            num = numeric_grad(value, p, idx, h)
            err = abs(analytic[n][idx] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst
