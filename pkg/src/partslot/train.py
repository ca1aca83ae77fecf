"""Training loop, identity-disjoint batching and held-out caption evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .corpus import SyntheticCorpus, TokenSequence
from .errors import ConfigurationError, DomainError, NumericFailure
from .kernel.nn import backward
from .kernel.optim import Adam, AdamConfig, cosine_lr
from .kernel.tensor import no_grad
from .losses import LossConfig, total_loss
from .model import PartSlotModel
from .retrieval import RetrievalReport, Ranking, contingency, best_matching, recall_at_k, sort_scores
from .similarity import gallery_scores

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    schedule: str = "constant"     # or "cosine" (linear warm-up, cosine decay)
    warmup_epochs: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError("epochs must be nonnegative")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 for contrastive terms")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")


def training_pairs(corpus: SyntheticCorpus) -> dict[int, list[tuple[int, int]]]:
    """Per identity, every (image index, training caption index) combination."""
    imgs: dict[int, list[int]] = {}
    for i, s in enumerate(corpus.visual):
        imgs.setdefault(s.identity, []).append(i)
    pairs: dict[int, list[tuple[int, int]]] = {c: [] for c in imgs}
    for j, s in enumerate(corpus.text):
        if s.split == "train":
            pairs[s.identity].extend((i, j) for i in imgs[s.identity])
    return pairs


def epoch_batches(pairs: dict[int, list[tuple[int, int]]], batch_size: int,
                  rng: np.random.Generator) -> list[list[tuple[int, int]]]:
    """Shuffle pairs into batches in which no identity appears twice.

    Each round draws one unused pair per identity, so an epoch visits every
    pair once.  Trailing chunks with fewer than two pairs are dropped.
    """
    ids = sorted(pairs)
    order = {c: rng.permutation(len(pairs[c])) for c in ids}
    rounds = max(len(p) for p in pairs.values())
    batches = []
    for r in range(rounds):
        chosen = [pairs[c][order[c][r]] for c in rng.permutation(ids) if r < len(pairs[c])]
        for k in range(0, len(chosen), batch_size):
            chunk = chosen[k:k + batch_size]
            if len(chunk) >= 2:
                batches.append(chunk)
    return batches


def train(model: PartSlotModel, corpus: SyntheticCorpus, loss_cfg: LossConfig,
          train_cfg: TrainConfig, adam_cfg: AdamConfig | None = None, seed: int = 0,
          on_step: Callable[[dict], None] | None = None) -> list[dict]:
    """Run Adam over the total loss; returns one record per step."""
    train_cfg.validate()
    adam = Adam(adam_cfg or AdamConfig())
    rng = np.random.default_rng(seed)
    pairs = training_pairs(corpus)
    per_epoch = len(epoch_batches(pairs, train_cfg.batch_size, np.random.default_rng(0)))
    total_steps = per_epoch * train_cfg.epochs
    warmup = per_epoch * train_cfg.warmup_epochs
    history = []
    step = 0
    for epoch in range(train_cfg.epochs):
        for chunk in epoch_batches(pairs, train_cfg.batch_size, rng):
            images = [corpus.visual[i] for i, _ in chunk]
            captions = [corpus.text[j] for _, j in chunk]
            try:
                batch = model.make_batch(images, captions, mask_seed=seed * 1_000_003 + step,
                                         mask_rate=loss_cfg.mask_rate, with_cmlm=loss_cfg.use_cmlm)
            except DomainError:
                # the encoders or PSA went non-finite before any loss term ran
                raise NumericFailure("forward", step) from None
            try:
                loss, parts = total_loss(batch, loss_cfg, model.store, model.cfg.fusion_depth)
            except NumericFailure as exc:
                raise NumericFailure(exc.term, step) from None
            backward(loss, model.store)
            lr = adam.cfg.lr
            if train_cfg.schedule == "cosine":
                lr = cosine_lr(adam.cfg.lr, step, total_steps, warmup)
            adam.step(model.store, lr=lr)
            rec = {"step": step, "epoch": epoch, "total": float(loss.data), **parts}
            history.append(rec)
            if on_step is not None:
                on_step(rec)
            step += 1
    return history


# -- evaluation -----------------------------------------------------------

@dataclass
class EvalResult:
    report: RetrievalReport
    purity: float
    rankings: list[Ranking]
    visual_attn: np.ndarray      # (M, N, K) row-stochastic A
    visual_attn_bar: np.ndarray  # (M, N, K)
    text_attn_bar: np.ndarray    # (Q, L, K)
    tdpa: np.ndarray             # (Q, K)
    queries: list[TokenSequence]
    matching: list[tuple[int, int]]   # (slot, planted part)


def embed_corpus(model: PartSlotModel, samples: list[TokenSequence], visual: bool):
    with no_grad():
        toks = np.stack([s.tokens for s in samples])
        emb = model.embed_visual(toks) if visual else model.embed_text(toks)
    return emb


def evaluate(model: PartSlotModel, corpus: SyntheticCorpus, ks=(1, 5, 10),
             split: str = "test", global_only: bool = False) -> EvalResult:
    """Text-to-image retrieval of ``split`` captions against every image.

    ``global_only`` ranks by the global cosine alone, for models trained
    without part losses.
    """
    gallery = corpus.visual
    queries = corpus.captions(split)
    gemb = embed_corpus(model, gallery, visual=True)
    qemb = embed_corpus(model, queries, visual=False)
    with no_grad():
        a = model.tdpa(qemb.g).data
    gv, Pv = gemb.g.data, gemb.parts.data
    gallery_ids = np.arange(len(gallery))
    rankings = []
    for q in range(len(queries)):
        weights = np.zeros_like(a[q]) if global_only else a[q]
        s = gallery_scores(qemb.g.data[q], qemb.parts.data[q], weights, gv, Pv)
        order = sort_scores(s, gallery_ids)
        rankings.append(Ranking(query=q, ids=gallery_ids[order], scores=s[order]))
    by_identity: dict[int, set] = {}
    for i, s in enumerate(gallery):
        by_identity.setdefault(s.identity, set()).add(i)
    relevance = {q: by_identity.get(s.identity, set()) for q, s in enumerate(queries)}
    report = recall_at_k(rankings, relevance, ks)
    A = gemb.attn.A.data
    labels = [s.parts for s in gallery]
    table = contingency(list(A), labels)
    matching = best_matching(table)
    purity = float(sum(table[r, c] for r, c in matching) / table.sum())
    report.extra["purity"] = purity
    return EvalResult(report=report, purity=purity, rankings=rankings, visual_attn=A,
                      visual_attn_bar=gemb.attn.A_bar.data, text_attn_bar=qemb.attn.A_bar.data,
                      tdpa=a, queries=queries, matching=matching)


def tdpa_by_mention(result: EvalResult, num_parts: int) -> dict[int, tuple[float, float]]:
    """For each planted part: mean TDPA weight of its matched slot over queries
    mentioning the part and over queries omitting it (NaN when a group is empty)."""
    out = {}
    slot_of = {part: slot for slot, part in result.matching}
    for part in range(num_parts):
        if part not in slot_of:
            continue
        w = result.tdpa[:, slot_of[part]]
        has = np.array([part in q.mentioned for q in result.queries])
        out[part] = (float(w[has].mean()) if has.any() else float("nan"),
                     float(w[~has].mean()) if (~has).any() else float("nan"))
    return out
