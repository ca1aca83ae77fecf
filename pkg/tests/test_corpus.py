import numpy as np
import pytest
from hypothesis import given, strategies as st

from partslot.corpus import (CorpusConfig, TokenSequence, encode_text, encode_visual, gen_corpus,
                             init_encoder, load_corpus, mask_text, save_corpus)
from partslot.errors import ConfigurationError, ContractError
from partslot.kernel.nn import ParamStore
from partslot.kernel.tensor import Tensor

SMALL = CorpusConfig(num_identities=6, num_parts=3, num_patches=6, grid_rows=3, text_len=5,
                     attr_dim=4, token_dim=8, values_per_part=4, filler_words=2)


def test_generation_is_a_pure_function_of_config_and_seed():
    a, b = gen_corpus(SMALL, 3), gen_corpus(SMALL, 3)
    for s, t in zip(a.samples(), b.samples()):
        assert np.array_equal(s.tokens, t.tokens) and np.array_equal(s.parts, t.parts)
    c = gen_corpus(SMALL, 4)
    assert not np.array_equal(a.visual[0].tokens, c.visual[0].tokens)


def test_default_corpus_sizes_are_exact():
    cfg = CorpusConfig()
    corpus = gen_corpus(cfg, 0)
    C = cfg.num_identities
    assert len(corpus.visual) == C * cfg.images_per_id
    assert len(corpus.text) == C * cfg.captions_per_id
    assert len(corpus.captions("test")) == C * cfg.heldout_captions
    assert {s.identity for s in corpus.visual} == set(range(C))
    for s in corpus.visual:
        assert s.tokens.shape == (cfg.num_patches + 1, cfg.token_dim) and s.special == 0
        assert s.parts.max() < cfg.num_parts
    for s in corpus.text:
        assert s.tokens.shape == (cfg.text_len + 1, cfg.token_dim) and s.special == cfg.text_len
        assert len(s.mentioned) >= cfg.min_mentioned
        assert set(s.parts[s.parts >= 0].tolist()) == set(s.mentioned)
        assert s.ids.max() < cfg.vocab_size


def test_noiseless_tokens_are_separable_by_attribute():
    cfg = CorpusConfig(num_identities=2, num_parts=3, num_patches=6, grid_rows=3, text_len=4,
                       values_per_part=5, noise_std=0.0, background_prob=0.0)
    corpus = gen_corpus(cfg, 1)
    protos = {}
    for s in corpus.visual:
        for tok, p in zip(s.content, s.parts):
            protos.setdefault((s.identity, int(p)), tok)
    keys = list(protos)
    centers = np.stack([protos[k] for k in keys])
    for s in corpus.visual:
        for tok, p in zip(s.content, s.parts):
            nearest = keys[int(np.argmin(((centers - tok) ** 2).sum(axis=1)))]
            assert nearest[1] == p and np.allclose(protos[nearest], tok)


@pytest.mark.parametrize("field,value", [("num_identities", 1), ("num_parts", 1),
                                          ("noise_std", -0.1), ("heldout_captions", 8),
                                          ("num_patches", 7), ("min_mentioned", 5)])
def test_degenerate_configs_are_rejected(field, value):
    cfg = CorpusConfig(**{field: value})
    with pytest.raises(ConfigurationError):
        gen_corpus(cfg, 0)


def test_serialisation_round_trip(tmp_path):
    corpus = gen_corpus(SMALL, 2)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    n = save_corpus(corpus, p1)
    assert n == len(corpus.samples())
    back = load_corpus(p1)
    assert back.cfg == corpus.cfg and back.seed == 2
    for s, t in zip(corpus.samples(), back.samples()):
        assert np.array_equal(s.tokens, t.tokens) and s.mentioned == t.mentioned
        assert s.split == t.split and s.identity == t.identity
    save_corpus(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_rejects_headerless_file(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"identity": 0}\n')
    with pytest.raises(ContractError):
        load_corpus(p)


# -- encoders ---------------------------------------------------------------------

def test_depth_zero_encoder_is_identity(rng):
    store = ParamStore(0)
    init_encoder(store, "enc_v", 8, 8, 0)
    init_encoder(store, "enc_t", 8, 8, 0)
    toks = rng.normal(size=(5, 8))
    g, x = encode_visual(toks, store, 0)
    assert np.array_equal(g.data, toks[0]) and np.array_equal(x.data, toks[1:])
    g, x = encode_text(toks, store, 0)
    assert np.array_equal(g.data, toks[-1]) and np.array_equal(x.data, toks[:-1])
    with pytest.raises(ConfigurationError):
        init_encoder(ParamStore(0), "e", 4, 8, 0)


@pytest.mark.parametrize("encode,prefix,special", [(encode_visual, "enc_v", 0),
                                                    (encode_text, "enc_t", -1)])
def test_encoder_shapes_and_token_permutation(encode, prefix, special, rng):
    store = ParamStore(1)
    init_encoder(store, prefix, 6, 10, 2)
    toks = rng.normal(size=(7, 6))
    g, x = encode(toks, store, 2)
    assert g.shape == (10,) and x.shape == (6, 10)
    content = [i for i in range(7) if i != special % 7]
    perm = rng.permutation(6)
    shuffled = toks.copy()
    shuffled[content] = toks[content][perm]
    g2, x2 = encode(shuffled, store, 2)
    assert np.allclose(x2.data, x.data[perm], atol=1e-12)
    assert np.allclose(g2.data, g.data, atol=1e-12)
    gb, xb = encode(np.stack([toks, shuffled]), store, 2)
    assert gb.shape == (2, 10) and xb.shape == (2, 6, 10)


# -- masking -----------------------------------------------------------------------

def _seq(L=8):
    toks = np.arange((L + 1) * 2, dtype=float).reshape(L + 1, 2)
    return TokenSequence(identity=0, modality="text", index=0, split="train", tokens=toks,
                         special=L, parts=np.full(L, -1), ids=np.arange(100, 100 + L))


def test_mask_rate_limits():
    full = mask_text(_seq(), rate=0.999999, seed=0)
    assert full.masked_positions.tolist() == list(range(8))
    assert full.original_ids.tolist() == list(range(100, 108))
    floor = mask_text(_seq(), rate=1e-12, seed=0)
    assert floor.masked_positions.tolist() == [0]


@given(st.floats(0.01, 0.99), st.integers(0, 10_000), st.integers(1, 12))
def test_mask_properties(rate, seed, L):
    seq = _seq(L)
    m = mask_text(seq, rate, seed)
    pos = m.masked_positions.tolist()
    assert len(pos) >= 1 and len(set(pos)) == len(pos)
    assert seq.special not in pos
    assert m.original_ids.tolist() == [100 + p for p in pos]
    again = mask_text(seq, rate, seed)
    assert np.array_equal(again.masked_positions, m.masked_positions)
    applied = m.apply(Tensor(np.full(2, -1.0))).data
    assert np.all(applied[pos] == -1.0)
    keep = [i for i in range(L + 1) if i not in pos]
    assert np.array_equal(applied[keep], seq.tokens[keep])


def test_mask_contract_errors():
    with pytest.raises(ContractError):
        mask_text(_seq(), rate=0.0)
    with pytest.raises(ContractError):
        mask_text(_seq(), rate=1.0)
    lone = TokenSequence(identity=0, modality="text", index=0, split="train",
                         tokens=np.zeros((1, 2)), special=0, parts=np.zeros(0, dtype=int))
    with pytest.raises(ContractError):
        mask_text(lone, 0.5)
