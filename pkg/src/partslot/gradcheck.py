"""Per-term finite-difference check of the full model's losses."""
from __future__ import annotations

import numpy as np

from .config import RunConfig
from .corpus import gen_corpus
from .errors import ContractError, DomainError
from .kernel.tensor import Tensor, grad, no_grad
from .losses import TERMS, total_loss
from .model import PartSlotModel
from .train import epoch_batches, training_pairs

GRADCHECK_TOL = 1e-5


def gradcheck_batch(cfg: RunConfig):
    """Model, image and caption lists for one seeded batch of the run config."""
    corpus = gen_corpus(cfg.corpus, cfg.seed)
    model = PartSlotModel(cfg.model, cfg.corpus, cfg.seed)
    chunk = epoch_batches(training_pairs(corpus), cfg.train.batch_size,
                          np.random.default_rng(cfg.seed))[0]
    images = [corpus.visual[i] for i, _ in chunk]
    captions = [corpus.text[j] for _, j in chunk]
    return model, images, captions


def run_gradcheck(cfg: RunConfig, h: float = 1e-5, max_coords: int | None = 6,
                  corrupt: float = 0.0, terms=None) -> dict[str, float]:
    """Max relative FD error for every enabled loss term alone and for their sum.

    The CMLM mask and the reconstruction targets are frozen at the starting
    parameters so that every perturbed evaluation sees the same objective.
    One forward pass per perturbation yields every term's value, so all the
    checks share their finite differences.  The error measure and coordinate
    sampling follow :func:`fd_gradcheck`.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"step h={h} outside [1e-7, 1e-3]")
    model, images, captions = gradcheck_batch(cfg)
    store = model.store
    ref = model.make_batch(images, captions, mask_seed=cfg.seed, mask_rate=cfg.loss.mask_rate)
    targets = tuple(t.data.copy() for t in ref.recon_targets)
    enabled = [t for t in (terms or TERMS) if getattr(cfg.loss, f"use_{t}")]
    loss_cfg = cfg.loss.only(*enabled)
    weight = {t: cfg.loss.recon_weight if t == "recon" else 1.0 for t in enabled}

    def terms_at():
        batch = model.make_batch(images, captions, mask_seed=cfg.seed,
                                 mask_rate=loss_cfg.mask_rate, with_cmlm=loss_cfg.use_cmlm,
                                 recon_targets=targets)
        return total_loss(batch, loss_cfg, store, model.cfg.fusion_depth)

    names = store.names()
    analytic = {}
    for term in enabled + ["total"]:
        one = loss_cfg if term == "total" else cfg.loss.only(term)
        batch = model.make_batch(images, captions, mask_seed=cfg.seed,
                                 mask_rate=one.mask_rate, with_cmlm=one.use_cmlm,
                                 recon_targets=targets)
        loss = total_loss(batch, one, store, model.cfg.fusion_depth)[0]
        grads = grad(loss, [store[n] for n in names])
        analytic[term] = {n: g + corrupt for n, g in zip(names, grads)}

    def values() -> dict[str, float]:
        with no_grad():
            _, parts = terms_at()
        parts["total"] = sum(weight[t] * parts[t] for t in enabled)
        return parts

    rng = np.random.default_rng(cfg.seed)
    worst = dict.fromkeys(enabled + ["total"], 0.0)
    for n in names:
        p = store[n].data
        flat = np.arange(p.size)
        if max_coords and p.size > max_coords:
            flat = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        for k in flat:
            idx = np.unravel_index(k, p.shape)
            old = p[idx]
            p[idx] = old + h
            plus = values()
            p[idx] = old - h
            minus = values()
            p[idx] = old
            for term in worst:
                num = (plus[term] - minus[term]) / (2.0 * h)
                if not np.isfinite(num):
                    raise DomainError(f"non-finite {term} while perturbing {n}{list(idx)}")
                err = abs(analytic[term][n][idx] - num) / max(1.0, abs(num))
                worst[term] = max(worst[term], err)
    return worst

def slot_branch_grads(model: PartSlotModel, images, captions, loss_cfg,
                      mask_seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradient of the total loss w.r.t. the shared initial slots, split by branch.

    Each branch receives its own leaf copy of the slots, so the two returned
    pieces add up to the gradient of the shared parameter (also returned).
    """
    S0 = model.slots.S0
    leaf_v = Tensor(S0.data.copy(), requires_grad=True)
    leaf_t = Tensor(S0.data.copy(), requires_grad=True)
    batch = model.make_batch(images, captions, mask_seed=mask_seed,
                             mask_rate=loss_cfg.mask_rate, with_cmlm=loss_cfg.use_cmlm,
                             slots_v=leaf_v, slots_t=leaf_t)
    loss = total_loss(batch, loss_cfg, model.store, model.cfg.fusion_depth)[0]
    g_v, g_t = grad(loss, [leaf_v, leaf_t])
    shared = model.make_batch(images, captions, mask_seed=mask_seed,
                              mask_rate=loss_cfg.mask_rate, with_cmlm=loss_cfg.use_cmlm)
    (g_shared,) = grad(total_loss(shared, loss_cfg, model.store, model.cfg.fusion_depth)[0], [S0])
    return g_v, g_t, g_shared
