"""Training objectives: global/part InfoNCE, identity classifiers, CMLM, reconstruction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (ConfigurationError, ContractError, DimensionError, DomainError,
                     NumericFailure)
from .kernel import tensor as T
from .kernel.nn import (ParamStore, apply_layer_norm, apply_linear, init_layer_norm,
                        init_linear, init_mlp, mlp)
from .kernel.tensor import Tensor
from .similarity import cosine_matrix, normalize

TERMS = ("global_nce", "id", "part_nce", "part_id", "cmlm", "recon")


@dataclass
class LossConfig:
    tau: float = 0.015
    mask_rate: float = 0.15
    recon_weight: float = 1.0
    cmlm_masked_only: bool = False
    use_global_nce: bool = True
    use_id: bool = True
    use_part_nce: bool = True
    use_part_id: bool = True
    use_cmlm: bool = True
    use_recon: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.recon_weight < 0:
            raise ConfigurationError("recon_weight must be nonnegative")
        if not 0 < self.mask_rate < 1:
            raise ConfigurationError("mask_rate must lie in (0, 1)")

    def enabled(self) -> list[str]:
        return [t for t in TERMS if getattr(self, f"use_{t}")]

    def only(self, *terms: str) -> "LossConfig":
        """Copy with exactly ``terms`` switched on."""
        flags = {f"use_{t}": t in terms for t in TERMS}
        return LossConfig(tau=self.tau, mask_rate=self.mask_rate, recon_weight=self.recon_weight,
                          cmlm_masked_only=self.cmlm_masked_only, **flags)


@dataclass
class Batch:
    """Embedded batch: what the losses consume.

    ``xt`` are the unmasked text tokens, ``xt_masked`` the text tokens
    re-encoded after masking (CMLM input).  ``recon_targets`` holds the
    reconstruction targets as constants; when absent, ``xv``/``xt`` are used
    with their gradient.
    """

    gv: Tensor           # (B, D)
    gt: Tensor           # (B, D)
    Pv: Tensor           # (B, K, D)
    Pt: Tensor           # (B, K, D)
    labels: np.ndarray   # (B,)
    xv: Tensor | None = None          # (B, N, D)
    xt: Tensor | None = None          # (B, L, D)
    xt_masked: Tensor | None = None   # (B, L, D)
    text_ids: np.ndarray | None = None     # (B, L)
    text_mask: np.ndarray | None = None    # (B, L) bool, masked positions
    tdpa: Tensor | None = None             # (B, K)
    recon_targets: tuple[Tensor, Tensor] | None = None   # constants, no gradient

    @property
    def size(self) -> int:
        return self.gv.shape[0]


def _need_pairs(B: int) -> None:
    if B < 2:
        raise ContractError(f"contrastive loss needs a batch of at least 2, got {B}")


def info_nce(sim: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE over a (B, B) similarity matrix, rows visual, columns text.

    Summed over the batch: ``-sum_i [log softmax_j(S_ij) + log softmax_j(S_ji)]`` at i.
    """
    z = sim * (1.0 / tau)
    diag = (np.arange(sim.shape[0]),) * 2
    v2t = T.log_softmax(z, axis=1)[diag]
    t2v = T.log_softmax(z, axis=0)[diag]
    return -(v2t.sum() + t2v.sum())


def global_nce(gv: Tensor, gt: Tensor, tau: float) -> Tensor:
    _need_pairs(gv.shape[0])
    return info_nce(cosine_matrix(gv, gt), tau)


def _cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Summed cross-entropy of softmaxed ``logits`` (B, C) against integer labels."""
    labels = np.asarray(labels)
    C = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"labels must lie in [0, {C}), got range "
                            f"[{labels.min()}, {labels.max()}]")
    return -T.log_softmax(logits, axis=-1)[np.arange(labels.size), labels].sum()


def id_loss(gv: Tensor, gt: Tensor, labels, W_ID: Tensor) -> Tensor:
    """Identity classification of both global embeddings with one shared classifier."""
    if W_ID.shape[0] != gv.shape[-1]:
        raise DimensionError(f"W_ID rows {W_ID.shape[0]} != embedding width {gv.shape[-1]}")
    return _cross_entropy(gv @ W_ID, labels) + _cross_entropy(gt @ W_ID, labels)


def part_similarity_matrix(Pv: Tensor, Pt: Tensor, a: Tensor) -> Tensor:
    """``S[i, j] = sum_k a[j, k] cos(Pv[i, k], Pt[j, k])``: weights from the text side."""
    if Pv.shape[1:] != Pt.shape[1:] or a.shape != Pt.shape[:2]:
        raise DimensionError(f"part shapes {Pv.shape}, {Pt.shape}, weights {a.shape}")
    nv = T.transpose(normalize(Pv), (1, 0, 2))      # (K, B, D)
    nt = T.transpose(normalize(Pt), (1, 2, 0))      # (K, D, B)
    per_slot = T.matmul(nv, nt)                     # (K, Bv, Bt)
    return (per_slot * T.reshape(a.T, (a.shape[1], 1, a.shape[0]))).sum(axis=0)


def part_nce(Pv: Tensor, Pt: Tensor, a: Tensor, tau: float) -> Tensor:
    _need_pairs(Pv.shape[0])
    return info_nce(part_similarity_matrix(Pv, Pt, a), tau)


def part_id_loss(Pv: Tensor, Pt: Tensor, labels, W_PartID: Tensor) -> Tensor:
    """Identity loss on the slot-ordered concatenation of part embeddings."""
    B, K, D = Pv.shape
    if W_PartID.shape[0] != K * D:
        raise DimensionError(f"W_PartID rows {W_PartID.shape[0]} != K*D = {K * D}")
    return (_cross_entropy(T.reshape(Pv, (B, K * D)) @ W_PartID, labels)
            + _cross_entropy(T.reshape(Pt, (B, K * D)) @ W_PartID, labels))


# -- cross-modal masked language modelling ------------------------------

def init_fusion(store: ParamStore, dim: int, vocab: int, depth: int = 1, mlp_ratio: int = 4,
                prefix: str = "fusion") -> None:
    for i in range(depth):
        p = f"{prefix}.{i}"
        init_layer_norm(store, f"{p}.ln1", dim)
        for proj in ("q", "k", "v"):
            store.uniform(f"{p}.{proj}.w", (dim, dim), dim)
        init_linear(store, f"{p}.out", dim, dim)
        init_layer_norm(store, f"{p}.ln2", dim)
        init_mlp(store, f"{p}.mlp", dim, mlp_ratio * dim, dim)
    store.uniform("cmlm.w", (dim, vocab), dim)


def fuse(tokens: Tensor, store: ParamStore, depth: int, prefix: str = "fusion") -> Tensor:
    """Pre-norm single-head transformer blocks over the concatenated token sequence."""
    h = tokens
    for i in range(depth):
        p = f"{prefix}.{i}"
        x = apply_layer_norm(store, f"{p}.ln1", h)
        q, k, v = (x @ store[f"{p}.{n}.w"] for n in ("q", "k", "v"))
        att = T.softmax(T.matmul(q, k.T) * (1.0 / math.sqrt(q.shape[-1])), axis=-1)
        h = h + apply_linear(store, f"{p}.out", T.matmul(att, v))
        h = h + mlp(apply_layer_norm(store, f"{p}.ln2", h), store, f"{p}.mlp")
    return h


def cmlm_loss(xv: Tensor, xt_masked: Tensor, text_ids, store: ParamStore, depth: int = 1,
              text_mask=None, masked_only: bool = False) -> Tensor:
    """Vocabulary prediction from the text positions of the fused sequence.

    By default every text position contributes, averaged over the L positions
    and then over the batch.  ``masked_only`` restricts the average to masked
    positions (``text_mask`` required).
    """
    if text_ids is None:
        raise ContractError("CMLM needs vocabulary ids for the text positions")
    ids = np.asarray(text_ids)
    B, L = ids.shape
    if masked_only and text_mask is None:
        raise ContractError("masked-only CMLM needs the mask metadata")
    fused = fuse(T.concat([xv, xt_masked], axis=1), store, depth)
    F = fused[:, xv.shape[1]:, :]
    logp = T.log_softmax(F @ store["cmlm.w"], axis=-1)
    picked = logp[np.arange(B)[:, None], np.arange(L)[None, :], ids]    # (B, L)
    if masked_only:
        m = np.asarray(text_mask, dtype=np.float64)
        per_sample = (picked * m).sum(axis=1) / Tensor(np.maximum(m.sum(axis=1), 1.0))
    else:
        per_sample = picked.mean(axis=1)
    return -per_sample.mean()


# -- feature reconstruction ---------------------------------------------

def init_broadcast_decoder(store: ParamStore, prefix: str, positions: int, dim: int,
                           mlp_ratio: int = 4) -> None:
    store.uniform(f"{prefix}.pos", (positions, dim), dim)
    init_mlp(store, f"{prefix}.mlp", dim, mlp_ratio * dim, dim + 1)


def broadcast_decode(parts: Tensor, store: ParamStore, prefix: str) -> tuple[Tensor, Tensor]:
    """Decode (B, K, D) slots into (B, P, D) tokens and (B, K, P) mixing weights.

    Each slot is copied to every position, the positional embedding added,
    and an MLP predicts a token and a mixing logit per (slot, position).
    """
    D = parts.shape[-1]
    z = T.reshape(parts, parts.shape[:-1] + (1, D)) + store[f"{prefix}.pos"]   # (B, K, P, D)
    out = mlp(z, store, f"{prefix}.mlp")
    pred, logit = out[..., :D], out[..., D]
    w = T.softmax(logit, axis=-2)           # over slots
    recon = (pred * T.reshape(w, w.shape + (1,))).sum(axis=-3)
    return recon, w


def recon_loss(Pv: Tensor, Pt: Tensor, xv: Tensor, xt: Tensor, store: ParamStore,
               prefixes: tuple[str, str] = ("dec_v", "dec_t")) -> Tensor:
    """Squared reconstruction error of both modalities' tokens, mean over the batch."""
    total = None
    for P, x, prefix in ((Pv, xv, prefixes[0]), (Pt, xt, prefixes[1])):
        recon, _ = broadcast_decode(P, store, prefix)
        diff = x - recon
        term = (diff * diff).sum() * (1.0 / x.shape[0])
        total = term if total is None else total + term
    return total


# -- total objective -----------------------------------------------------

def total_loss(batch: Batch, cfg: LossConfig, store: ParamStore, fusion_depth: int = 1
               ) -> tuple[Tensor, dict[str, float]]:
    """Sum of the enabled terms (reconstruction scaled by ``recon_weight``).

    The breakdown maps each enabled term to its unweighted value.
    """
    builders = {
        "global_nce": lambda: global_nce(batch.gv, batch.gt, cfg.tau),
        "id": lambda: id_loss(batch.gv, batch.gt, batch.labels, store["cls_id.w"]),
        "part_nce": lambda: part_nce(batch.Pv, batch.Pt, batch.tdpa, cfg.tau),
        "part_id": lambda: part_id_loss(batch.Pv, batch.Pt, batch.labels, store["cls_part.w"]),
        "cmlm": lambda: cmlm_loss(batch.xv, batch.xt_masked, batch.text_ids, store, fusion_depth,
                                  batch.text_mask, cfg.cmlm_masked_only),
        "recon": lambda: recon_loss(batch.Pv, batch.Pt, *(batch.recon_targets
                                                          or (batch.xv, batch.xt)), store),
    }
    terms: dict[str, Tensor] = {}
    for name in cfg.enabled():
        try:
            value = builders[name]()
        except DomainError:
            raise NumericFailure(name) from None
        if not np.isfinite(value.data):
            raise NumericFailure(name)
        terms[name] = value
    if not terms:
        raise ConfigurationError("every loss term is disabled")
    total = None
    for name, t in terms.items():
        t = t * cfg.recon_weight if name == "recon" else t
        total = t if total is None else total + t
    return total, {n: float(t.data) for n, t in terms.items()}
