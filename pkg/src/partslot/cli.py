"""Command-line entry points.

Exit codes: 0 success, 1 check failure, 2 invalid input, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .corpus import gen_corpus, load_corpus, save_corpus
from .errors import ConfigurationError, ContractError, DimensionError, DomainError
from .gradcheck import GRADCHECK_TOL, run_gradcheck
from .model import PartSlotModel
from .retrieval import export_attention
from .train import evaluate, tdpa_by_mention, train

log = logging.getLogger("partslot")

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3

LADDER = (
    ("global NCE", ("global_nce",)),
    ("+ ID", ("global_nce", "id")),
    ("+ CMLM", ("global_nce", "id", "cmlm")),
    ("+ PartNCE", ("global_nce", "id", "cmlm", "part_nce")),
    ("+ PartID", ("global_nce", "id", "cmlm", "part_nce", "part_id")),
)


class InputError(Exception):
    pass


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = config_mod.load(args.config, args.preset)
    else:
        cfg = config_mod.PRESETS[args.preset]()
        cfg.validate()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _load_corpus(path):
    try:
        return load_corpus(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read corpus {path}: {exc}") from None


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(model: PartSlotModel, cfg: RunConfig, path: Path) -> None:
    """JSON checkpoint: the run config text plus every parameter (float repr)."""
    payload = {
        "config": config_mod.dumps(cfg),
        "step_count": model.store.step_count,
        "params": {n: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
                   for n, t in model.store.items()},
    }
    path.write_text(json.dumps(payload))


def load_checkpoint(path) -> tuple[PartSlotModel, RunConfig]:
    try:
        payload = json.loads(Path(path).read_text())
        cfg = config_mod.loads(payload["config"])
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from None
    model = PartSlotModel(cfg.model, cfg.corpus, cfg.seed)
    state = {n: np.array(p["data"]).reshape(p["shape"]) for n, p in payload["params"].items()}
    model.store.load_state(state)
    model.store.step_count = payload["step_count"]
    return model, cfg


def _check_compatible(cfg: RunConfig, corpus) -> None:
    a, b = cfg.corpus, corpus.cfg
    for name in ("token_dim", "num_patches", "text_len", "num_identities", "num_parts",
                 "values_per_part", "filler_words"):
        if getattr(a, name) != getattr(b, name):
            raise DimensionError(f"checkpoint and corpus disagree on {name}: "
                                 f"{getattr(a, name)} vs {getattr(b, name)}")


# -- commands ---------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _load_config(args)
    corpus = gen_corpus(cfg.corpus, cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = save_corpus(corpus, out)
    print(f"wrote {n} records ({len(corpus.visual)} visual, {len(corpus.text)} text, "
          f"{cfg.corpus.num_identities} identities, vocab {corpus.vocab_size}) "
          f"seed={cfg.seed} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    corpus = _load_corpus(args.corpus)
    cfg.corpus = corpus.cfg
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump(cfg, out / "config.ini")
    model = PartSlotModel(cfg.model, cfg.corpus, cfg.seed)
    t0 = time.time()
    with open(out / "losses.jsonl", "w") as fh:
        def on_step(rec):
            for term, value in rec.items():
                if term not in ("step", "epoch"):
                    fh.write(json.dumps({"term": term, "step": rec["step"], "value": value}) + "\n")
            if rec["step"] % 50 == 0:
                log.info("step %d epoch %d total %.4f", rec["step"], rec["epoch"], rec["total"])
        try:
            history = train(model, corpus, cfg.loss, cfg.train, cfg.optim, cfg.seed, on_step)
        except DomainError as exc:
            print(f"numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
    save_checkpoint(model, cfg, out / "checkpoint.json")
    last = history[-1]["total"] if history else float("nan")
    print(f"trained {len(history)} steps in {time.time() - t0:.1f}s; final loss {last:.4f}; "
          f"checkpoint -> {out / 'checkpoint.json'}")
    return EXIT_OK


def _evaluate_and_report(model, cfg, corpus, ks, out: Path | None, export: bool,
                         global_only: bool = False):
    result = evaluate(model, corpus, ks, global_only=global_only)
    tdpa = tdpa_by_mention(result, corpus.cfg.num_parts)
    result.report.extra["tdpa_by_mention"] = {str(k): list(v) for k, v in tdpa.items()}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(result.report.to_json() + "\n")
        if export:
            n = min(len(result.queries), 8)
            export_attention({"visual": list(result.visual_attn_bar[:n]),
                              "text": list(result.text_attn_bar[:n])},
                             result.tdpa[:n], out / "attention", grid=corpus.cfg.grid)
    return result


def cmd_eval(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    _check_compatible(cfg, corpus)
    out = Path(args.out) if args.out else None
    result = _evaluate_and_report(model, cfg, corpus, args.ks, out, args.export)
    print(result.report.to_json())
    return EXIT_OK


def cmd_export(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    _check_compatible(cfg, corpus)
    result = evaluate(model, corpus, args.ks)
    n = min(args.limit, len(result.queries))
    files = export_attention({"visual": list(result.visual_attn_bar[:n]),
                              "text": list(result.text_attn_bar[:n])},
                             result.tdpa[:n], args.out, grid=corpus.cfg.grid)
    print(f"wrote {len(files)} files to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    t0 = time.time()
    errors = run_gradcheck(cfg, h=args.h, max_coords=args.max_coords,
                           corrupt=args.corrupt_grad)
    ok = True
    for term, err in errors.items():
        passed = err < GRADCHECK_TOL
        ok &= passed
        print(f"{term:12s} max_rel_err={err:.3e} {'PASS' if passed else 'FAIL'}")
    print(f"gradcheck {'passed' if ok else 'FAILED'} in {time.time() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_CHECK


@dataclass
class LadderRow:
    label: str
    terms: tuple
    recalls: list        # per seed: {k: R@k}

    def mean(self, k: int) -> float:
        return float(np.mean([r[k] for r in self.recalls]))


def run_ablation(cfg: RunConfig, corpus, seeds, ks=(1, 5, 10), log_fn=print) -> list[LadderRow]:
    """Train every ladder configuration for every seed and evaluate R@K.

    Rows without part losses score with the global cosine alone; reconstruction
    follows the base config and is only active on rows that train parts.
    """
    rows = []
    for label, terms in LADDER:
        has_parts = "part_nce" in terms
        extra = ("recon",) if has_parts and cfg.loss.use_recon else ()
        loss_cfg = cfg.loss.only(*terms, *extra)
        recalls = []
        for seed in seeds:
            model = PartSlotModel(cfg.model, corpus.cfg, seed)
            train(model, corpus, loss_cfg, cfg.train, cfg.optim, seed)
            rep = evaluate(model, corpus, ks, global_only=not has_parts).report
            recalls.append(rep.recall_at)
            log_fn(f"  {label:12s} seed={seed} " +
                   " ".join(f"R@{k}={rep.recall_at[k]:.4f}" for k in ks))
        rows.append(LadderRow(label, terms, recalls))
    return rows


def format_ladder(rows: list[LadderRow], ks=(1, 5, 10)) -> str:
    cols = ["NCE", "ID", "CMLM", "PartNCE", "PartID"]
    names = ["global_nce", "id", "cmlm", "part_nce", "part_id"]
    head = f"{'Method':12s} " + " ".join(f"{c:>7s}" for c in cols) + "".join(
        f"{'R@' + str(k):>18s}" for k in ks)
    lines = [head, "-" * len(head)]
    base = {k: rows[0].mean(k) for k in ks}
    for row in rows:
        marks = " ".join(f"{'x' if n in row.terms else '-':>7s}" for n in names)
        vals = "".join(f"{100 * row.mean(k):>9.2f} ({100 * (row.mean(k) - base[k]):+6.2f})"
                       for k in ks)
        lines.append(f"{row.label:12s} {marks}{vals}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    corpus = _load_corpus(args.corpus) if args.corpus else gen_corpus(cfg.corpus, cfg.seed)
    cfg.corpus = corpus.cfg
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    rows = run_ablation(cfg, corpus, seeds, args.ks)
    table = format_ladder(rows, args.ks)
    print(table)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "ablation.txt").write_text(table + "\n")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _ks(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad --ks {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("--ks needs positive integers")
    return ks


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partslot", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, preset="desk"):
        sp.add_argument("--config", help="INI run config")
        sp.add_argument("--preset", choices=sorted(config_mod.PRESETS), default=preset)
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("gen", help="generate a synthetic corpus")
    common(sp)
    sp.add_argument("--out", required=True, help="corpus .jsonl path")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train on a corpus")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", help="run directory (default: [run] out_dir)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="held-out text-to-image retrieval")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--ks", type=_ks, default=[1, 5, 10])
    sp.add_argument("--out")
    sp.add_argument("--export", action="store_true", help="also export attention maps")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    common(sp, preset="tiny")
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--max-coords", type=int, default=6,
                    help="coordinates checked per parameter tensor (0 = all)")
    sp.add_argument("--corrupt-grad", type=float, default=0.0, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="loss-ablation ladder")
    common(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--ks", type=_ks, default=[1, 5, 10])
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("export-attn", help="write attention CSV/PGM and TDPA exports")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--limit", type=int, default=8)
    sp.add_argument("--ks", type=_ks, default=[1, 5, 10])
    sp.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ContractError, DimensionError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
