"""Synthetic person corpus with planted part structure, toy encoders, text masking.

Every identity owns one discrete attribute value per part.  A visual sample is
a token grid where each patch shows one part (or background clutter); a
caption is a short word sequence naming a random subset of the parts plus
filler words.  Both modalities live in ``token_dim`` space but use different
part codes and attribute projections, so alignment has to be learned.

The global token (visual ``[cls]`` at position 0, textual ``[eos]`` at the end)
is generated as the mean of the sample's content tokens plus a fixed special
code.  It plays the role of the backbone's pooled summary, which per-token toy
encoders cannot compute themselves.

Corpus file format (JSON lines, ``.jsonl``)
-------------------------------------------
Line 1 is a header ``{"kind": "header", "seed", "config", "vocab_size"}``.
Every further line is one sample record with keys, in this order:

``identity``  int, identity id in ``[0, C)``
``modality``  ``"visual"`` or ``"text"``
``index``     int, sample index within (identity, modality)
``split``     ``"train"`` or ``"test"`` (held-out captions)
``special``   int, row of the global token inside ``tokens``
``tokens``    list of rows, ``(N + 1) x token_dim`` or ``(L + 1) x token_dim``
``parts``     planted part per content token, ``-1`` for noise/filler
``ids``       vocabulary id per content token (text) or ``null`` (visual)
``mentioned`` sorted part indices a caption names (text) or ``null``
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError
from .kernel import tensor as T
from .kernel.nn import (ParamStore, apply_layer_norm, apply_linear, init_layer_norm,
                        init_linear, init_mlp, mlp)
from .kernel.tensor import Tensor

VISUAL, TEXT = "visual", "text"


@dataclass
class CorpusConfig:
    num_identities: int = 200
    num_parts: int = 4
    num_patches: int = 16
    grid_rows: int = 4
    text_len: int = 6
    attr_dim: int = 8
    token_dim: int = 32
    values_per_part: int = 64
    filler_words: int = 8
    noise_std: float = 0.3
    part_scale: float = 1.0
    background_prob: float = 0.125
    omit_prob: float = 0.2
    min_mentioned: int = 2
    images_per_id: int = 2
    captions_per_id: int = 8
    heldout_captions: int = 1

    @property
    def vocab_size(self) -> int:
        return self.num_parts * self.values_per_part + self.filler_words

    @property
    def grid(self) -> tuple[int, int]:
        return self.grid_rows, self.num_patches // self.grid_rows

    def validate(self) -> None:
        if self.num_identities < 2:
            raise ConfigurationError("corpus needs at least 2 identities")
        if self.num_parts < 2:
            raise ConfigurationError("corpus needs at least 2 planted parts")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be nonnegative")
        if self.num_patches % self.grid_rows:
            raise ConfigurationError("num_patches must be divisible by grid_rows")
        if self.grid_rows < 1 or self.num_patches < 1:
            raise ConfigurationError("grid must be non-empty")
        if not 2 <= self.min_mentioned <= self.num_parts:
            raise ConfigurationError("min_mentioned must lie in [2, num_parts]")
        if self.text_len < self.num_parts:
            raise ConfigurationError("text_len must fit one word per part")
        if self.images_per_id < 1 or self.captions_per_id < 1:
            raise ConfigurationError("every identity needs >=1 image and >=1 caption")
        if not 0 <= self.heldout_captions < self.captions_per_id:
            raise ConfigurationError("heldout_captions must leave >=1 training caption")
        if self.values_per_part < 1 or self.filler_words < 1:
            raise ConfigurationError("vocabulary pieces must be non-empty")
        if self.values_per_part ** self.num_parts < self.num_identities:
            raise ConfigurationError("too few attribute combinations for distinct identities")
        if not (0 <= self.background_prob < 1 and 0 <= self.omit_prob < 1):
            raise ConfigurationError("probabilities must lie in [0, 1)")


@dataclass
class TokenSequence:
    """One pre-tokenised sample: content tokens plus a single global token."""

    identity: int
    modality: str
    index: int
    split: str
    tokens: np.ndarray
    special: int
    parts: np.ndarray
    ids: np.ndarray | None = None
    mentioned: tuple[int, ...] | None = None

    @property
    def length(self) -> int:
        return self.tokens.shape[0] - 1

    @property
    def content(self) -> np.ndarray:
        return np.delete(self.tokens, self.special, axis=0)


@dataclass
class SyntheticCorpus:
    cfg: CorpusConfig
    seed: int
    visual: list[TokenSequence] = field(default_factory=list)
    text: list[TokenSequence] = field(default_factory=list)

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    def samples(self) -> list[TokenSequence]:
        return self.visual + self.text

    def captions(self, split: str) -> list[TokenSequence]:
        return [s for s in self.text if s.split == split]


def gen_corpus(cfg: CorpusConfig, seed: int) -> SyntheticCorpus:
    """Generate the corpus; a pure function of ``(cfg, seed)``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    C, K, Dt = cfg.num_identities, cfg.num_parts, cfg.token_dim

    code_v = cfg.part_scale * rng.normal(size=(K, Dt))
    code_t = cfg.part_scale * rng.normal(size=(K, Dt))
    special_v = rng.normal(size=Dt)
    special_t = rng.normal(size=Dt)
    attrs = rng.normal(size=(K, cfg.values_per_part, cfg.attr_dim))
    proj_v = rng.normal(size=(cfg.attr_dim, Dt)) / np.sqrt(cfg.attr_dim)
    proj_t = rng.normal(size=(cfg.attr_dim, Dt)) / np.sqrt(cfg.attr_dim)
    part_vis = code_v[:, None, :] + attrs @ proj_v     # (K, values, Dt)
    part_word = code_t[:, None, :] + attrs @ proj_t
    filler = rng.normal(size=(cfg.filler_words, Dt))

    values: list[tuple[int, ...]] = []
    taken: set[tuple[int, ...]] = set()
    while len(values) < C:
        v = tuple(int(x) for x in rng.integers(cfg.values_per_part, size=K))
        if v not in taken:
            taken.add(v)
            values.append(v)

    rows, cols = cfg.grid
    band = (np.arange(rows) * K) // rows
    layout = np.repeat(band, cols)                     # part per patch before clutter

    corpus = SyntheticCorpus(cfg=cfg, seed=seed)
    for c, val in enumerate(values):
        for i in range(cfg.images_per_id):
            parts = layout.copy()
            parts[rng.random(cfg.num_patches) < cfg.background_prob] = -1
            toks = np.where(parts[:, None] >= 0,
                            part_vis[np.maximum(parts, 0), np.array(val)[np.maximum(parts, 0)]],
                            rng.normal(size=(cfg.num_patches, Dt)))
            toks = toks + cfg.noise_std * rng.normal(size=toks.shape)
            cls = toks.mean(axis=0) + special_v
            corpus.visual.append(TokenSequence(
                identity=c, modality=VISUAL, index=i, split="train",
                tokens=np.vstack([cls, toks]), special=0, parts=parts))
        n_train = cfg.captions_per_id - cfg.heldout_captions
        for j in range(cfg.captions_per_id):
            mentioned = np.flatnonzero(rng.random(K) >= cfg.omit_prob)
            if mentioned.size < cfg.min_mentioned:
                rest = np.setdiff1d(np.arange(K), mentioned)
                extra = rng.choice(rest, size=cfg.min_mentioned - mentioned.size, replace=False)
                mentioned = np.sort(np.concatenate([mentioned, extra]))
            parts = np.full(cfg.text_len, -1)
            parts[rng.choice(cfg.text_len, size=mentioned.size, replace=False)] = rng.permutation(mentioned)
            fill = rng.integers(cfg.filler_words, size=cfg.text_len)
            ids = np.where(parts >= 0,
                           np.maximum(parts, 0) * cfg.values_per_part + np.array(val)[np.maximum(parts, 0)],
                           K * cfg.values_per_part + fill)
            toks = np.where(parts[:, None] >= 0,
                            part_word[np.maximum(parts, 0), np.array(val)[np.maximum(parts, 0)]],
                            filler[fill])
            toks = toks + cfg.noise_std * rng.normal(size=toks.shape)
            eos = toks.mean(axis=0) + special_t
            corpus.text.append(TokenSequence(
                identity=c, modality=TEXT, index=j, split="train" if j < n_train else "test",
                tokens=np.vstack([toks, eos]), special=cfg.text_len, parts=parts,
                ids=ids, mentioned=tuple(int(m) for m in mentioned)))
    return corpus


# -- serialisation ------------------------------------------------------

def _record(s: TokenSequence) -> dict:
    return {
        "identity": s.identity,
        "modality": s.modality,
        "index": s.index,
        "split": s.split,
        "special": s.special,
        "tokens": s.tokens.tolist(),
        "parts": s.parts.tolist(),
        "ids": None if s.ids is None else s.ids.tolist(),
        "mentioned": None if s.mentioned is None else list(s.mentioned),
    }


def save_corpus(corpus: SyntheticCorpus, path: str | Path) -> int:
    """Write ``corpus`` as JSON lines; returns the number of sample records."""
    header = {"kind": "header", "seed": corpus.seed, "config": asdict(corpus.cfg),
              "vocab_size": corpus.vocab_size}
    samples = corpus.samples()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in samples:
            fh.write(json.dumps(_record(s)) + "\n")
    return len(samples)


def load_corpus(path: str | Path) -> SyntheticCorpus:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "header":
            raise ContractError(f"{path}: first line is not a corpus header")
        corpus = SyntheticCorpus(cfg=CorpusConfig(**header["config"]), seed=header["seed"])
        for line in fh:
            r = json.loads(line)
            seq = TokenSequence(
                identity=r["identity"], modality=r["modality"], index=r["index"],
                split=r["split"], tokens=np.array(r["tokens"], dtype=np.float64),
                special=r["special"], parts=np.array(r["parts"], dtype=np.int64),
                ids=None if r["ids"] is None else np.array(r["ids"], dtype=np.int64),
                mentioned=None if r["mentioned"] is None else tuple(r["mentioned"]))
            (corpus.visual if seq.modality == VISUAL else corpus.text).append(seq)
    return corpus


# -- toy encoders --------------------------------------------------------

def init_encoder(store: ParamStore, prefix: str, din: int, dim: int, depth: int,
                 mlp_ratio: int = 4) -> None:
    if depth == 0 and din != dim:
        raise ConfigurationError("a depth-0 encoder needs token_dim == dim")
    for i in range(depth):
        init_linear(store, f"{prefix}.{i}.proj", din if i == 0 else dim, dim)
        init_layer_norm(store, f"{prefix}.{i}.ln", dim)
        init_mlp(store, f"{prefix}.{i}.mlp", dim, mlp_ratio * dim, dim)


def encode_tokens(tokens: Tensor, store: ParamStore, prefix: str, depth: int) -> Tensor:
    """Per-token stack of ``depth`` layers: linear, layer norm, residual MLP."""
    h = tokens
    for i in range(depth):
        h = apply_layer_norm(store, f"{prefix}.{i}.ln", apply_linear(store, f"{prefix}.{i}.proj", h))
        h = h + mlp(h, store, f"{prefix}.{i}.mlp")
    return h


def encode_visual(tokens, store: ParamStore, depth: int, prefix: str = "enc_v"):
    """Returns ``(g, x)``: the transformed ``[cls]`` row and the N patch rows.

    ``tokens`` is ``(..., N + 1, token_dim)`` with ``[cls]`` first.
    """
    h = encode_tokens(T.as_tensor(tokens), store, prefix, depth)
    return h[..., 0, :], h[..., 1:, :]


def encode_text(tokens, store: ParamStore, depth: int, prefix: str = "enc_t"):
    """Returns ``(g, x)``: the transformed ``[eos]`` row and the L word rows.

    ``tokens`` is ``(..., L + 1, token_dim)`` with ``[eos]`` last.
    """
    h = encode_tokens(T.as_tensor(tokens), store, prefix, depth)
    return h[..., -1, :], h[..., :-1, :]


# -- masking -------------------------------------------------------------

@dataclass
class MaskedText:
    seq: TokenSequence
    masked_positions: np.ndarray
    original_ids: np.ndarray

    def mask(self) -> np.ndarray:
        """Boolean row mask over ``seq.tokens`` (special row never set)."""
        m = np.zeros(self.seq.tokens.shape[0], dtype=bool)
        m[self.masked_positions] = True
        return m

    def apply(self, mask_vector: Tensor) -> Tensor:
        """Token rows with masked positions replaced by ``mask_vector``."""
        return T.where(self.mask()[:, None], mask_vector, Tensor(self.seq.tokens))


def mask_text(seq: TokenSequence, rate: float = 0.15, seed: int = 0) -> MaskedText:
    """Mask each content position independently with probability ``rate``.

    At least one position is always masked: if the draw selects none, the
    lowest-index eligible position is used.
    """
    if not 0 < rate < 1:
        raise ContractError(f"mask rate must lie in (0, 1), got {rate}")
    eligible = np.array([i for i in range(seq.tokens.shape[0]) if i != seq.special])
    if eligible.size == 0:
        raise ContractError("sequence has no maskable positions")
    draws = np.random.default_rng(seed).random(eligible.size)
    pos = eligible[draws < rate]
    if pos.size == 0:
        pos = eligible[:1]
    ids = np.array([] if seq.ids is None else
                   [seq.ids[p if p < seq.special else p - 1] for p in pos], dtype=np.int64)
    return MaskedText(seq=seq, masked_positions=pos, original_ids=ids)
