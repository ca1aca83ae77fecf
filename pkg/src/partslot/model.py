"""Full two-branch model: parameter layout and batch embedding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import (CorpusConfig, MaskedText, TokenSequence, encode_text, encode_visual,
                     init_encoder, mask_text)
from .errors import ConfigurationError
from .kernel import tensor as T
from .kernel.nn import ParamStore
from .kernel.tensor import Tensor
from .losses import Batch, init_broadcast_decoder, init_fusion
from .parts import AttentionMap, PartDiscovery, PsaConfig, shared_slot_init
from .similarity import init_tdpa, tdpa_weights


@dataclass
class ModelConfig:
    dim: int = 32
    num_slots: int = 4
    iters: int = 3
    head_dim: int = 0
    encoder_depth: int = 2
    fusion_depth: int = 1
    mlp_ratio: int = 4
    eps_col: float = 1e-8

    def validate(self) -> None:
        if min(self.dim, self.num_slots, self.iters, self.mlp_ratio) < 1:
            raise ConfigurationError("dim, num_slots, iters and mlp_ratio must be >= 1")
        if self.encoder_depth < 0 or self.fusion_depth < 0 or self.head_dim < 0:
            raise ConfigurationError("depths and head_dim must be nonnegative")


@dataclass
class Embeddings:
    """Output of one branch for a stack of samples."""

    g: Tensor               # (B, D)
    parts: Tensor           # (B, K, D)
    tokens: Tensor          # (B, N or L, D)
    attn: AttentionMap      # final PSA iteration


class PartSlotModel:
    """Owns the :class:`ParamStore` and runs both branches.

    Parameter prefixes: ``enc_v``/``enc_t`` encoders, ``psa_v``/``psa_t`` PSA
    blocks, ``slots`` the shared initial slots, ``tdpa`` the part weighting MLP,
    ``cls_id``/``cls_part`` identity classifiers, ``fusion``/``cmlm`` the CMLM
    head, ``mask_token`` the learnable mask, ``dec_v``/``dec_t`` decoders.
    """

    def __init__(self, cfg: ModelConfig, corpus_cfg: CorpusConfig, seed: int = 0):
        cfg.validate()
        self.cfg, self.corpus_cfg, self.seed = cfg, corpus_cfg, seed
        D, K = cfg.dim, cfg.num_slots
        store = self.store = ParamStore(seed)
        init_encoder(store, "enc_v", corpus_cfg.token_dim, D, cfg.encoder_depth, cfg.mlp_ratio)
        init_encoder(store, "enc_t", corpus_cfg.token_dim, D, cfg.encoder_depth, cfg.mlp_ratio)
        self.slots = shared_slot_init(K, D, seed=seed + 1, store=store)
        self.psa_cfg = PsaConfig(iters=cfg.iters, head_dim=cfg.head_dim, eps_col=cfg.eps_col,
                                 mlp_ratio=cfg.mlp_ratio)
        self.psa_v = PartDiscovery(store, "psa_v", self.slots, D, self.psa_cfg)
        self.psa_t = PartDiscovery(store, "psa_t", self.slots, D, self.psa_cfg)
        init_tdpa(store, D, K)
        C = corpus_cfg.num_identities
        store.uniform("cls_id.w", (D, C), D)
        store.uniform("cls_part.w", (K * D, C), K * D)
        init_fusion(store, D, corpus_cfg.vocab_size, cfg.fusion_depth, cfg.mlp_ratio)
        store.uniform("mask_token", (corpus_cfg.token_dim,), corpus_cfg.token_dim)
        init_broadcast_decoder(store, "dec_v", corpus_cfg.num_patches, D, cfg.mlp_ratio)
        init_broadcast_decoder(store, "dec_t", corpus_cfg.text_len, D, cfg.mlp_ratio)

    # -- branches ------------------------------------------------------
    def embed_visual(self, tokens, slots: Tensor | None = None) -> Embeddings:
        g, x = encode_visual(tokens, self.store, self.cfg.encoder_depth)
        P, attn = self.psa_v(x, slots)
        return Embeddings(g, P, x, attn)

    def embed_text(self, tokens, slots: Tensor | None = None) -> Embeddings:
        g, x = encode_text(tokens, self.store, self.cfg.encoder_depth)
        P, attn = self.psa_t(x, slots)
        return Embeddings(g, P, x, attn)

    def tdpa(self, g_text) -> Tensor:
        return tdpa_weights(g_text, self.store)

    # -- batches -------------------------------------------------------
    def make_batch(self, images: list[TokenSequence], captions: list[TokenSequence],
                   mask_seed: int = 0, mask_rate: float = 0.15,
                   slots_v: Tensor | None = None, slots_t: Tensor | None = None,
                   with_cmlm: bool = True, recon_targets=None) -> Batch:
        """Embed aligned (image, caption) pairs into a loss-ready :class:`Batch`.

        ``slots_v``/``slots_t`` substitute the initial slots of one branch,
        which lets callers separate the two branches' slot gradients.
        Reconstruction targets are the encoded tokens held constant; pass
        ``recon_targets`` (two arrays) to pin them to fixed values instead.
        """
        if len(images) != len(captions):
            raise ConfigurationError("images and captions must be aligned pairs")
        vis = self.embed_visual(np.stack([s.tokens for s in images]), slots_v)
        txt = self.embed_text(np.stack([s.tokens for s in captions]), slots_t)
        labels = np.array([s.identity for s in captions])
        batch = Batch(gv=vis.g, gt=txt.g, Pv=vis.parts, Pt=txt.parts, labels=labels,
                      xv=vis.tokens, xt=txt.tokens, tdpa=self.tdpa(txt.g))
        if recon_targets is None:
            recon_targets = (vis.tokens.data, txt.tokens.data)
        batch.recon_targets = (Tensor(recon_targets[0]), Tensor(recon_targets[1]))
        if with_cmlm:
            masks = [mask_text(s, mask_rate, seed=mask_seed * 100003 + i)
                     for i, s in enumerate(captions)]
            batch.xt_masked = self.encode_masked(masks)
            batch.text_ids = np.stack([s.ids for s in captions])
            batch.text_mask = np.stack([np.delete(m.mask(), m.seq.special) for m in masks])
        return batch

    def encode_masked(self, masks: list[MaskedText]) -> Tensor:
        rows = np.stack([m.mask() for m in masks])[..., None]
        toks = T.where(rows, self.store["mask_token"], Tensor(np.stack([m.seq.tokens for m in masks])))
        return encode_text(toks, self.store, self.cfg.encoder_depth)[1]
