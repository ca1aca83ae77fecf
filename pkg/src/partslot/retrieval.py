"""Gallery ranking, Recall@K, part purity and attention export."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractError
from .kernel.nn import ParamStore
from .kernel.tensor import Tensor, no_grad
from .similarity import TDPA_PREFIX, gallery_scores, tdpa_weights


@dataclass
class EmbeddingPair:
    global_: np.ndarray      # (D,)
    parts: np.ndarray        # (K, D)
    modality: str = "visual"


@dataclass
class Ranking:
    query: int
    ids: np.ndarray          # gallery ids, best first
    scores: np.ndarray       # aligned with ids, non-increasing


@dataclass
class RetrievalReport:
    recall_at: dict[int, float]
    num_queries: int
    num_gallery: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"recall_at": {str(k): v for k, v in self.recall_at.items()},
                           "num_queries": self.num_queries, "num_gallery": self.num_gallery,
                           **self.extra}, indent=2, sort_keys=True)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def sort_scores(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Order indices by descending score, ties by ascending id."""
    return np.lexsort((ids, -scores))


def rank_gallery(query: EmbeddingPair, gallery: Sequence[EmbeddingPair], store: ParamStore,
                 gallery_ids: Sequence[int] | None = None, query_id: int = 0,
                 tdpa_prefix: str = TDPA_PREFIX) -> Ranking:
    """Rank visual ``gallery`` items for a text ``query`` by pair score."""
    if len(gallery) == 0:
        raise ContractError("cannot rank an empty gallery")
    ids = np.arange(len(gallery)) if gallery_ids is None else np.asarray(gallery_ids)
    gv = np.stack([_arr(e.global_) for e in gallery])
    Pv = np.stack([_arr(e.parts) for e in gallery])
    with no_grad():
        a = tdpa_weights(_arr(query.global_), store, tdpa_prefix).data
    scores = gallery_scores(_arr(query.global_), _arr(query.parts), a, gv, Pv)
    order = sort_scores(scores, ids)
    return Ranking(query=query_id, ids=ids[order], scores=scores[order])


def recall_at_k(rankings: Sequence[Ranking], relevance: Mapping[int, set], ks: Sequence[int]
                ) -> RetrievalReport:
    """Fraction of queries with a relevant item in the top K, for every K in ``ks``."""
    hits = {k: 0 for k in ks}
    for r in rankings:
        if r.query not in relevance:
            raise ContractError(f"no relevance set for query {r.query}")
        rel = relevance[r.query]
        pos = [i for i, g in enumerate(r.ids.tolist()) if g in rel]
        first = pos[0] if pos else None
        for k in ks:
            if first is not None and first < k:
                hits[k] += 1
    n = len(rankings)
    return RetrievalReport(recall_at={k: (hits[k] / n if n else 0.0) for k in ks},
                           num_queries=n,
                           num_gallery=len(rankings[0].ids) if rankings else 0)


def contingency(attn_maps: Sequence, labels: Sequence) -> np.ndarray:
    """Counts of (argmax slot, planted part) over non-noise tokens."""
    K = _arr(attn_maps[0]).shape[-1]
    Kt = 1 + max(int(np.max(l)) for l in labels)
    table = np.zeros((K, max(Kt, 1)), dtype=np.int64)
    for A, lab in zip(attn_maps, labels):
        A, lab = _arr(A), np.asarray(lab)
        keep = lab >= 0
        np.add.at(table, (A.argmax(axis=-1)[keep], lab[keep]), 1)
    return table


def best_matching(table: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one slot/part pairs maximising matched counts (Hungarian method)."""
    rows, cols = linear_sum_assignment(table, maximize=True)
    return list(zip(rows.tolist(), cols.tolist()))


def part_purity(attn_maps: Sequence, labels: Sequence, num_parts: int | None = None) -> float:
    """Share of labelled tokens whose argmax slot is matched to their planted part.

    ``attn_maps`` are (N, K) row-stochastic maps; ``labels`` hold the planted
    part per token with -1 for noise (excluded).
    """
    table = contingency(attn_maps, labels)
    if num_parts is not None and table.shape[1] < num_parts:
        table = np.pad(table, ((0, 0), (0, num_parts - table.shape[1])))
    total = table.sum()
    if total == 0:
        raise ContractError("no labelled tokens to score")
    return float(sum(table[r, c] for r, c in best_matching(table)) / total)


# -- export ---------------------------------------------------------------

def write_matrix_csv(path: Path, M: np.ndarray, prefix: str = "slot") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"{prefix}_{k}" for k in range(M.shape[1])])
        for row in M:
            w.writerow([repr(float(x)) for x in row])


def read_matrix_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(x) for x in r] for r in rows[1:]])


def write_pgm(path: Path, img: np.ndarray, maxval: int = 255) -> None:
    """Plain (P2) graymap, scaled so the image maximum maps to ``maxval``."""
    top = img.max()
    q = np.zeros(img.shape, dtype=int) if top <= 0 else np.rint(img / top * maxval).astype(int)
    lines = ["P2", f"{img.shape[1]} {img.shape[0]}", str(maxval)]
    lines += [" ".join(str(v) for v in row) for row in q]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path: Path) -> np.ndarray:
    tok = Path(path).read_text().split()
    if tok[0] != "P2":
        raise ContractError(f"{path} is not a plain graymap")
    w, h = int(tok[1]), int(tok[2])
    return np.array([int(t) for t in tok[4:4 + w * h]]).reshape(h, w)


def export_attention(attn: Mapping[str, Sequence], tdpa, path: str | Path,
                     grid: tuple[int, int] | None = None) -> list[Path]:
    """Write attention maps, TDPA weights and visual heatmaps under ``path``.

    ``attn`` maps a modality name to a list of (N, K) column-normalised maps.
    Files: ``attn_<modality>_<i>.csv`` per sample, ``tdpa.csv`` (one row per
    query), and ``heat_visual_<i>_slot<k>.pgm`` per visual sample and slot when
    ``grid`` (rows, cols) is given.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for modality, maps in attn.items():
        for i, A in enumerate(maps):
            A = _arr(A)
            p = out / f"attn_{modality}_{i:04d}.csv"
            write_matrix_csv(p, A)
            written.append(p)
            if modality == "visual" and grid is not None:
                for k in range(A.shape[1]):
                    hp = out / f"heat_visual_{i:04d}_slot{k}.pgm"
                    write_pgm(hp, A[:, k].reshape(grid))
                    written.append(hp)
    if tdpa is not None:
        p = out / "tdpa.csv"
        write_matrix_csv(p, np.atleast_2d(_arr(tdpa)))
        written.append(p)
    return written
