import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from partslot.errors import ConfigurationError
from partslot.kernel.nn import ParamStore
from partslot.kernel.tensor import Tensor, no_grad
from partslot.parts import (PartDiscovery, PsaConfig, discover_parts, init_psa, psa_attention,
                            psa_update, shared_slot_init)


def _psa(seed, D, K, iters=3, eps_col=1e-8):
    store = ParamStore(seed)
    cfg = PsaConfig(iters=iters, eps_col=eps_col, mlp_ratio=2)
    slots = shared_slot_init(K, D, seed=seed + 100, store=store)
    init_psa(store, "psa", D, cfg)
    return store, slots, cfg


def _params(store, prefix):
    return {n[len(prefix) + 1:]: store[n].data.tolist() for n in store.names(prefix + ".")}


def _oracle_psa(tokens, S, p, iters, eps_col):
    """Loop-by-loop reference: lists and scalars only."""
    N, K = len(tokens), len(S)
    xn = [oracles.layer_norm(t, p["ln_in.gain"], p["ln_in.bias"]) for t in tokens]
    keys = [oracles.vecmat(x, p["k.w"]) for x in xn]
    vals = [oracles.vecmat(x, p["v.w"]) for x in xn]
    Dh = len(keys[0])
    A = A_bar = None
    for _ in range(iters):
        qs = [oracles.vecmat(oracles.layer_norm(s, p["ln_slots.gain"], p["ln_slots.bias"]),
                             p["q.w"]) for s in S]
        A = [oracles.softmax([math.fsum(a * b for a, b in zip(keys[n], qs[k])) / math.sqrt(Dh)
                              for k in range(K)]) for n in range(N)]
        mass = [math.fsum(A[n][k] for n in range(N)) for k in range(K)]
        A_bar = [[A[n][k] / max(mass[k], eps_col) for k in range(K)] for n in range(N)]
        new = []
        for k in range(K):
            u = [math.fsum(A_bar[n][k] * vals[n][d] for n in range(N)) for d in range(Dh)]
            s_bar = oracles.gru(S[k], u, {g[4:]: v for g, v in p.items() if g.startswith("gru.")})
            h = oracles.layer_norm(s_bar, p["ln_mlp.gain"], p["ln_mlp.bias"])
            out = oracles.mlp(h, p["mlp.fc1.w"], p["mlp.fc1.b"], p["mlp.fc2.w"], p["mlp.fc2.b"])
            new.append([a + b for a, b in zip(out, s_bar)])
        S = new
    return np.array(S), np.array(A), np.array(A_bar)


@pytest.mark.parametrize("iters", [1, 5])
def test_discover_parts_matches_unrolled_oracle(iters, rng):
    store, slots, cfg = _psa(3, 5, 3, iters=iters)
    tokens = rng.normal(size=(7, 5))
    P, attn = discover_parts(Tensor(tokens), slots, cfg, store, "psa")
    S, A, A_bar = _oracle_psa(tokens.tolist(), slots.S0.data.tolist(), _params(store, "psa"),
                              iters, cfg.eps_col)
    assert np.allclose(P.data, S, atol=1e-10, rtol=0)
    assert np.allclose(attn.A.data, A, atol=1e-12, rtol=0)
    assert np.allclose(attn.A_bar.data, A_bar, atol=1e-12, rtol=0)


def test_single_iteration_is_attention_then_update(rng):
    store, slots, cfg = _psa(0, 4, 3, iters=1)
    x = Tensor(rng.normal(size=(6, 4)))
    attn = psa_attention(slots.S0, x, store, "psa", cfg)
    step = psa_update(slots.S0, x, attn, store, "psa")
    P, last = discover_parts(x, slots, cfg, store, "psa")
    assert np.array_equal(P.data, step.data) and np.array_equal(last.A.data, attn.A.data)


def test_one_slot_takes_everything(rng):
    store, slots, cfg = _psa(1, 4, 1)
    attn = psa_attention(slots.S0, Tensor(rng.normal(size=(5, 4))), store, "psa", cfg)
    assert np.array_equal(attn.A.data, np.ones((5, 1)))
    assert np.allclose(attn.A_bar.data, 1 / 5, atol=1e-15)


def test_two_by_two_hand_computation():
    store = ParamStore(0)
    cfg = PsaConfig(iters=1, mlp_ratio=1)
    init_psa(store, "psa", 2, cfg)
    store["psa.k.w"].data[...] = [[1.0, 0.5], [0.0, 2.0]]
    store["psa.q.w"].data[...] = [[0.3, 0.0], [1.0, -1.0]]
    tokens = np.array([[0.2, 1.0], [1.5, -0.4]])
    S = np.array([[0.1, 0.9], [-0.7, 0.2]])
    attn = psa_attention(Tensor(S), Tensor(tokens), store, "psa", cfg)

    def ln(row):   # unit gain, zero bias, two entries
        mu = (row[0] + row[1]) / 2
        var = ((row[0] - mu) ** 2 + (row[1] - mu) ** 2) / 2
        return [(x - mu) / mpmath.sqrt(var + mpmath.mpf("1e-5")) for x in row]

    def proj(row, w):
        return [row[0] * w[0][j] + row[1] * w[1][j] for j in range(2)]

    mp = lambda rows: [[mpmath.mpf(float(v)) for v in r] for r in rows]  # noqa: E731
    kw, qw = mp(store["psa.k.w"].data), mp(store["psa.q.w"].data)
    keys = [proj(ln(r), kw) for r in mp(tokens)]
    qs = [proj(ln(r), qw) for r in mp(S)]
    M = [[(k[0] * q[0] + k[1] * q[1]) / mpmath.sqrt(2) for q in qs] for k in keys]
    A = [[mpmath.e ** m / sum(mpmath.e ** x for x in row) for m in row] for row in M]
    cols = [A[0][k] + A[1][k] for k in range(2)]
    A_bar = [[A[n][k] / cols[k] for k in range(2)] for n in range(2)]
    assert np.allclose(attn.A.data, np.array(A, dtype=float), atol=1e-14, rtol=0)
    assert np.allclose(attn.A_bar.data, np.array(A_bar, dtype=float), atol=1e-14, rtol=0)


def test_zero_gru_halves_slots_before_mlp(rng):
    store, slots, cfg = _psa(2, 4, 3)
    for n in store.names("psa.gru."):
        store[n].data[...] = 0.0
    for n in store.names("psa.mlp."):
        store[n].data[...] = 0.0
    x = Tensor(rng.normal(size=(5, 4)))
    attn = psa_attention(slots.S0, x, store, "psa", cfg)
    out = psa_update(slots.S0, x, attn, store, "psa")
    assert np.allclose(out.data, 0.5 * slots.S0.data, atol=1e-15)


@given(st.integers(0, 10_000))
def test_attention_is_stochastic(seed):
    r = np.random.default_rng(seed)
    N, K, D = int(r.integers(1, 9)), int(r.integers(1, 6)), int(r.integers(2, 6))
    store, slots, cfg = _psa(seed, D, K)
    attn = psa_attention(slots.S0, Tensor(r.normal(size=(N, D)) * 3), store, "psa", cfg)
    assert np.all(np.abs(attn.A.data.sum(axis=1) - 1) < 1e-12)
    assert np.all(np.abs(attn.A_bar.data.sum(axis=0) - 1) < 1e-12)


def test_slot_permutation_equivariance_and_token_permutation_invariance(rng):
    store, slots, cfg = _psa(4, 6, 4)
    x = rng.normal(size=(9, 6))
    with no_grad():
        P, attn = discover_parts(Tensor(x), slots, cfg, store, "psa")
        sp = rng.permutation(4)
        P2, attn2 = discover_parts(Tensor(x), Tensor(slots.S0.data[sp]), cfg, store, "psa")
        tp = rng.permutation(9)
        P3, attn3 = discover_parts(Tensor(x[tp]), slots, cfg, store, "psa")
    assert np.allclose(P2.data, P.data[sp], atol=1e-12)
    assert np.allclose(attn2.A.data, attn.A.data[:, sp], atol=1e-12)
    assert np.allclose(P3.data, P.data, atol=1e-12)
    assert np.allclose(attn3.A.data, attn.A.data[tp], atol=1e-12)


def test_batched_input_matches_per_sample(rng):
    store, slots, cfg = _psa(5, 4, 3)
    x = rng.normal(size=(3, 6, 4))
    P, _ = discover_parts(Tensor(x), slots, cfg, store, "psa")
    for b in range(3):
        Pb, _ = discover_parts(Tensor(x[b]), slots, cfg, store, "psa")
        assert np.allclose(P.data[b], Pb.data, atol=1e-13)


def test_shared_slot_init_rules():
    a = shared_slot_init(8, 16, seed=7)
    b = shared_slot_init(8, 16, seed=7)
    assert a.S0.shape == (8, 16) and np.array_equal(a.S0.data, b.S0.data)
    assert np.all(np.abs(a.S0.data) <= 0.25)
    with pytest.raises(ConfigurationError):
        shared_slot_init(8, 16, seed=7, store=a.store)
    with pytest.raises(ConfigurationError):
        shared_slot_init(0, 4)
    with pytest.raises(ConfigurationError):
        PsaConfig(iters=0)


def test_both_modules_read_one_slot_matrix(rng):
    store = ParamStore(0)
    slots = shared_slot_init(3, 4, store=store)
    cfg = PsaConfig(iters=2)
    vis, txt = PartDiscovery(store, "v", slots, 4, cfg), PartDiscovery(store, "t", slots, 4, cfg)
    assert vis.slots.S0 is txt.slots.S0
    assert store.names("slots") == ["slots"]
    Pv, _ = vis(Tensor(rng.normal(size=(5, 4))))
    Pt, _ = txt(Tensor(rng.normal(size=(3, 4))))
    assert Pv.shape == Pt.shape == (3, 4)


def test_shared_slots_receive_gradient_from_both_branches():
    from partslot import config
    from partslot.gradcheck import gradcheck_batch, slot_branch_grads
    both = 0
    for seed in range(20):
        cfg = config.tiny_preset()
        cfg.seed = seed
        model, images, captions = gradcheck_batch(cfg)
        g_v, g_t, g_shared = slot_branch_grads(model, images, captions, cfg.loss, mask_seed=seed)
        assert np.allclose(g_v + g_t, g_shared, rtol=0, atol=1e-12)
        both += np.abs(g_v).max() > 1e-12 and np.abs(g_t).max() > 1e-12
    assert both == 20
