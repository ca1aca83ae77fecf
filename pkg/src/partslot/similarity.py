"""Cosine similarity, text-driven part weights (TDPA) and the pair score.

Cosine uses the smoothed norm ``sqrt(|u|^2 + eps^2)`` with ``eps = 1e-12``,
so a zero vector has cosine 0 with everything and a finite gradient.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .kernel import tensor as T
from .kernel.nn import ParamStore, init_mlp, mlp
from .kernel.tensor import Tensor

COS_EPS = 1e-12
TDPA_PREFIX = "tdpa"


def normalize(u: Tensor) -> Tensor:
    return u / T.sqrt((u * u).sum(axis=-1, keepdims=True) + COS_EPS ** 2)


def cosine(u, v) -> Tensor:
    """Cosine along the last axis (broadcasting over leading axes)."""
    u, v = T.as_tensor(u), T.as_tensor(v)
    if u.shape[-1] != v.shape[-1]:
        raise DimensionError(f"cosine of widths {u.shape[-1]} and {v.shape[-1]}")
    return (normalize(u) * normalize(v)).sum(axis=-1)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """``out[..., i, j] = cos(a[..., i, :], b[..., j, :])``."""
    return T.matmul(normalize(a), normalize(b).T)


def init_tdpa(store: ParamStore, dim: int, num_slots: int, hidden: int | None = None,
              prefix: str = TDPA_PREFIX) -> None:
    init_mlp(store, prefix, dim, hidden or dim, num_slots)


def tdpa_weights(g_text, store: ParamStore, prefix: str = TDPA_PREFIX) -> Tensor:
    """Softmax over K logits predicted from the textual global embedding."""
    return T.softmax(mlp(T.as_tensor(g_text), store, prefix), axis=-1)


def aggregate_part_similarity(Pv, Pt, a) -> Tensor:
    """Sum over slots of ``a_k * cos(Pv_k, Pt_k)``."""
    Pv, Pt, a = T.as_tensor(Pv), T.as_tensor(Pt), T.as_tensor(a)
    if Pv.shape != Pt.shape or Pv.shape[-2] != a.shape[-1]:
        raise DimensionError(f"part shapes {Pv.shape}, {Pt.shape} vs weights {a.shape}")
    return (a * cosine(Pv, Pt)).sum(axis=-1)


def pair_score(gv, gt, Pv, Pt, store: ParamStore, prefix: str = TDPA_PREFIX) -> Tensor:
    """Inference score: global cosine plus TDPA-weighted part similarity."""
    a = tdpa_weights(gt, store, prefix)
    return cosine(gv, gt) + aggregate_part_similarity(Pv, Pt, a)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt((x * x).sum(axis=-1, keepdims=True) + COS_EPS ** 2)


def gallery_scores(gt: np.ndarray, Pt: np.ndarray, a: np.ndarray,
                   gv: np.ndarray, Pv: np.ndarray) -> np.ndarray:
    """Pair scores of one text query against M gallery items, without a graph.

    ``gt`` (D,), ``Pt`` (K, D), ``a`` (K,), ``gv`` (M, D), ``Pv`` (M, K, D).
    """
    glob = (_unit(gv) * _unit(gt)).sum(axis=-1)
    parts = (_unit(Pv) * _unit(Pt)).sum(axis=-1)
    return glob + (parts * a).sum(axis=-1)
