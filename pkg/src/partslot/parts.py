"""Part slot attention: shared learnable slots refined by T attention/GRU/MLP steps."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .kernel import tensor as T
from .kernel.nn import (ParamStore, apply_layer_norm, init_gru, init_layer_norm, gru_cell,
                        init_mlp, linear, mlp)
from .kernel.tensor import Tensor

SLOTS_NAME = "slots"


@dataclass
class PsaConfig:
    iters: int = 5
    head_dim: int = 0       # 0 means "same as the model width"
    eps_col: float = 1e-8
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.iters < 1:
            raise ConfigurationError("PSA needs at least one iteration")
        if self.head_dim < 0:
            raise ConfigurationError("head_dim must be >= 1 (or 0 for the default)")


@dataclass
class AttentionMap:
    A: Tensor        # (..., N, K), rows sum to 1
    A_bar: Tensor    # (..., N, K), columns sum to 1


@dataclass
class PartSlots:
    """Handle on the single slot matrix both discovery modules read."""

    store: ParamStore
    name: str = SLOTS_NAME
    shared: bool = True

    @property
    def S0(self) -> Tensor:
        return self.store[self.name]

    @property
    def K(self) -> int:
        return self.S0.shape[0]


def shared_slot_init(K: int, D: int, seed: int = 0, store: ParamStore | None = None,
                     name: str = SLOTS_NAME) -> PartSlots:
    """Register the initial part slots once.  Re-registering raises."""
    if K < 1 or D < 1:
        raise ConfigurationError(f"slot shape must be positive, got ({K}, {D})")
    store = ParamStore(seed) if store is None else store
    if name in store:
        raise ConfigurationError(f"part slots {name!r} already registered")
    bound = 1.0 / math.sqrt(D)
    store.register(name, np.random.default_rng(seed).uniform(-bound, bound, size=(K, D)))
    return PartSlots(store, name)


def init_psa(store: ParamStore, prefix: str, dim: int, cfg: PsaConfig) -> None:
    dh = cfg.head_dim or dim
    init_layer_norm(store, f"{prefix}.ln_in", dim)
    init_layer_norm(store, f"{prefix}.ln_slots", dim)
    init_layer_norm(store, f"{prefix}.ln_mlp", dim)
    for proj in ("q", "k", "v"):
        store.uniform(f"{prefix}.{proj}.w", (dim, dh), dim)
    init_gru(store, f"{prefix}.gru", dh, dim)
    init_mlp(store, f"{prefix}.mlp", dim, cfg.mlp_ratio * dim, dim)


def _project_tokens(tokens: Tensor, store: ParamStore, prefix: str):
    xn = apply_layer_norm(store, f"{prefix}.ln_in", tokens)
    return linear(xn, store[f"{prefix}.k.w"]), linear(xn, store[f"{prefix}.v.w"])


def _attend(slots: Tensor, keys: Tensor, store: ParamStore, prefix: str, eps_col: float) -> AttentionMap:
    q = linear(apply_layer_norm(store, f"{prefix}.ln_slots", slots), store[f"{prefix}.q.w"])
    logits = T.matmul(keys, q.T) * (1.0 / math.sqrt(q.shape[-1]))
    A = T.softmax(logits, axis=-1)
    mass = A.sum(axis=-2, keepdims=True)
    return AttentionMap(A=A, A_bar=A / T.maximum(mass, eps_col))


def _update(slots: Tensor, values: Tensor, attn: AttentionMap, store: ParamStore, prefix: str) -> Tensor:
    u = T.matmul(attn.A_bar.T, values)
    s_bar = gru_cell(slots, u, store, f"{prefix}.gru")
    return mlp(apply_layer_norm(store, f"{prefix}.ln_mlp", s_bar), store, f"{prefix}.mlp") + s_bar


def _broadcast_slots(slots: Tensor, tokens: Tensor) -> Tensor:
    lead = tokens.shape[:-2]
    if slots.shape[:-2] == lead:
        return slots
    return T.broadcast_to(slots, lead + slots.shape[-2:])


def psa_attention(slots: Tensor, tokens: Tensor, store: ParamStore, prefix: str,
                  cfg: PsaConfig | None = None) -> AttentionMap:
    """Slot-competition attention between ``tokens`` (..., N, D) and ``slots`` (K, D)."""
    cfg = cfg or PsaConfig()
    keys, _ = _project_tokens(tokens, store, prefix)
    return _attend(_broadcast_slots(slots, tokens), keys, store, prefix, cfg.eps_col)


def psa_update(slots: Tensor, tokens: Tensor, attn: AttentionMap, store: ParamStore,
               prefix: str) -> Tensor:
    """Weighted-mean update, GRU step, then residual MLP over the updated slots."""
    _, values = _project_tokens(tokens, store, prefix)
    return _update(_broadcast_slots(slots, tokens), values, attn, store, prefix)


def discover_parts(tokens: Tensor, slots: PartSlots | Tensor, cfg: PsaConfig, store: ParamStore,
                   prefix: str) -> tuple[Tensor, AttentionMap]:
    """Run ``cfg.iters`` PSA blocks from the initial slots.

    Returns the refined slots (the part embeddings, ``(..., K, D)``) and the
    attention of the final iteration.
    """
    S = slots.S0 if isinstance(slots, PartSlots) else slots
    S = _broadcast_slots(S, tokens)
    keys, values = _project_tokens(tokens, store, prefix)
    attn = None
    for _ in range(cfg.iters):
        attn = _attend(S, keys, store, prefix, cfg.eps_col)
        S = _update(S, values, attn, store, prefix)
    return S, attn


class PartDiscovery:
    """One modality's discovery module: its own PSA parameters, the shared slots."""

    def __init__(self, store: ParamStore, prefix: str, slots: PartSlots, dim: int, cfg: PsaConfig):
        self.store, self.prefix, self.slots, self.cfg = store, prefix, slots, cfg
        init_psa(store, prefix, dim, cfg)

    def __call__(self, tokens: Tensor, slots: Tensor | None = None) -> tuple[Tensor, AttentionMap]:
        return discover_parts(tokens, self.slots if slots is None else slots,
                              self.cfg, self.store, self.prefix)
