"""Parameter registry and the differentiable layers built on :mod:`tensor`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import ConfigurationError, ContractError, DimensionError
from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Named learnable tensors, their accumulated gradients, and a step counter.

    Iteration is always in sorted-name order so that initialisation, optimiser
    updates and serialisation are reproducible.
    """

    def __init__(self, seed: int = 0):
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.rng = np.random.default_rng(seed)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise ConfigurationError(f"missing parameter {name!r}") from None

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self.params if n.startswith(prefix))

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for n in sorted(self.params):
            yield n, self.params[n]

    def register(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ConfigurationError(f"parameter {name!r} registered twice")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.grads[name] = np.zeros_like(t.data)
        return t

    def uniform(self, name: str, shape: tuple, fan_in: int) -> Tensor:
        """Register ``shape`` drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        bound = 1.0 / np.sqrt(fan_in)
        return self.register(name, self.rng.uniform(-bound, bound, size=shape))

    def zero_grad(self) -> None:
        for n in self.grads:
            self.grads[n] = np.zeros_like(self.params[n].data)

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, v in state.items():
            if n not in self.params:
                raise ConfigurationError(f"unknown parameter {n!r} in state")
            if self.params[n].shape != np.shape(v):
                raise DimensionError(
                    f"parameter {n!r}: stored shape {np.shape(v)} != {self.params[n].shape}")
            self.params[n].data = np.array(v, dtype=np.float64)


def backward(loss: Tensor, store: ParamStore) -> None:
    """Accumulate d(loss)/d(param) into ``store.grads`` for every parameter."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    names = store.names()
    gs = T.grad(loss, [store.params[n] for n in names])
    for n, g in zip(names, gs):
        store.grads[n] = store.grads[n] + g


# -- layers ----------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    if x.ndim == 1:
        y = T.reshape(T.matmul(T.reshape(x, (1, -1)), w), (w.shape[1],))
    else:
        y = T.matmul(x, w)
    return y if b is None else y + b


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / T.sqrt(var + eps) * gain + bias


def init_linear(store: ParamStore, prefix: str, din: int, dout: int, bias: bool = True) -> None:
    store.uniform(f"{prefix}.w", (din, dout), din)
    if bias:
        store.uniform(f"{prefix}.b", (dout,), din)


def apply_linear(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    b = store.params.get(f"{prefix}.b")
    return linear(x, store[f"{prefix}.w"], b)


def init_layer_norm(store: ParamStore, prefix: str, dim: int) -> None:
    store.register(f"{prefix}.gain", np.ones(dim))
    store.register(f"{prefix}.bias", np.zeros(dim))


def apply_layer_norm(store: ParamStore, prefix: str, x: Tensor, eps: float = 1e-5) -> Tensor:
    return layer_norm(x, store[f"{prefix}.gain"], store[f"{prefix}.bias"], eps)


def init_mlp(store: ParamStore, prefix: str, din: int, hidden: int, dout: int) -> None:
    init_linear(store, f"{prefix}.fc1", din, hidden)
    init_linear(store, f"{prefix}.fc2", hidden, dout)


def mlp(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """Two linear layers with a ReLU in between, read from ``store`` under ``prefix``."""
    h = T.relu(apply_linear(store, f"{prefix}.fc1", x))
    return apply_linear(store, f"{prefix}.fc2", h)


def init_gru(store: ParamStore, prefix: str, din: int, dhid: int) -> None:
    for gate in ("z", "r", "h"):
        store.uniform(f"{prefix}.w_{gate}", (din, dhid), dhid)
        store.uniform(f"{prefix}.u_{gate}", (dhid, dhid), dhid)
        store.uniform(f"{prefix}.b_{gate}", (dhid,), dhid)


def gru_cell(h: Tensor, x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """One GRU step applied row-wise with parameters shared across rows.

    z = sig(x W_z + h U_z + b_z), r = sig(x W_r + h U_r + b_r),
    h~ = tanh(x W_h + (r*h) U_h + b_h), h' = (1 - z) * h + z * h~.
    """
    if h.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"gru_cell: hidden {h.shape} and input {x.shape} disagree")
    p = lambda n: store[f"{prefix}.{n}"]  # noqa: E731
    z = T.sigmoid(x @ p("w_z") + h @ p("u_z") + p("b_z"))
    r = T.sigmoid(x @ p("w_r") + h @ p("u_r") + p("b_r"))
    cand = T.tanh(x @ p("w_h") + (r * h) @ p("u_h") + p("b_h"))
    return (1.0 - z) * h + z * cand
