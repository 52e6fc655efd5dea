"""Command line: ``mmhomog {generate,train,eval,visualize,gradcheck}``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, load_config
from .data import EvalView, generate_corpus, load_corpus, save_corpus, split
from .errors import ConfigError, DataError, DegenerateConfigurationError, NumericalAbort
from .networks import CheckpointError, load_checkpoint

log = logging.getLogger("mmhomog")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if cfg.generate is not None:
            cfg.generate.seed = args.seed
        cfg.train.seed = args.seed
    if args.out:
        cfg.out = args.out
    return cfg


def _corpus_layout(root: Path) -> str:
    return "generated_manifest" if (root / "manifest.json").exists() else "paired_dirs"


def _eval_view(corpus: str) -> EvalView:
    root = Path(corpus)
    pairs = load_corpus(root, _corpus_layout(root))
    if not pairs:
        raise DataError(f"corpus {root} holds no pairs")
    return EvalView.from_pairs(pairs)


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    if cfg.generate is None:
        raise UsageError("config needs a 'generate' section")
    if not cfg.out:
        raise UsageError("no output directory (set 'out' or pass --out)")
    pairs = generate_corpus(cfg.generate)
    root = save_corpus(pairs, cfg.out, cfg.generate)
    view = EvalView.from_pairs(pairs)
    base = 0.0
    if len(view):
        from .geometry import CornerSet, ace_batch

        h, w = view.moving.shape[-2:]
        base = float(ace_batch(view.truth, np.broadcast_to(np.eye(3), view.truth.shape), CornerSet(w, h)).mean())
    print(f"wrote {len(pairs)} pairs to {root}  (identity-baseline MACE {base:.4f} px)")
    return EXIT_OK


def cmd_train(args) -> int:
    from .evaluation import evaluate, mace_curve_csv
    from .trainer import train

    cfg = _load_cfg(args)
    if args.corpus:
        cfg.data.corpus = args.corpus
    if cfg.data.corpus:
        root = Path(cfg.data.corpus)
        pairs = load_corpus(root, cfg.data.layout if cfg.data.layout else _corpus_layout(root))
    elif cfg.generate is not None:
        pairs = generate_corpus(cfg.generate)
    else:
        raise UsageError("config needs either data.corpus or a 'generate' section")
    if not pairs:
        raise DataError("training corpus is empty")
    h, w = pairs[0].fixed.shape[-2:]
    if list(cfg.network.image_size) != [h, w]:
        raise UsageError(f"network.image_size {cfg.network.image_size} does not match corpus images {h}x{w}")
    train_view, eval_view = split(pairs, cfg.data.fractions, cfg.data.split_seed)
    out = Path(cfg.out or "runs/train")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    res = train(cfg.train, cfg.network, train_view, eval_view if len(eval_view) else None, out_dir=out, progress=True)
    if res.evaluations:
        mace_curve_csv(res.evaluations, out / "mace_curve.csv")
        rep = evaluate(res.trainer.model, eval_view, checkpoint=str(res.checkpoints[-1]), config=cfg.to_dict())
        rep.write(out / "final_eval")
        print(f"final MACE {rep.mace:.4f} px  (no-warp baseline {rep.baseline_mace:.4f} px)")
    print(f"{res.trainer.t} steps, {len(res.checkpoints)} checkpoints in {out}, collapse={res.collapsed}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate

    if not args.corpus:
        raise UsageError("--corpus is required")
    view = _eval_view(args.corpus)
    if not view.has_truth:
        raise DataError("evaluation corpus lacks ground-truth records")
    model, payload, preds = None, {}, None
    if args.predict == "truth":
        preds = view.truth.copy()
    elif args.predict == "identity":
        preds = np.broadcast_to(np.eye(3), view.truth.shape).copy()
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --predict truth|identity")
        model, payload = load_checkpoint(args.checkpoint)
        if list(model.cfg.image_size) != list(view.moving.shape[-2:]):
            raise DataError("checkpoint image size does not match corpus")
    rep = evaluate(model, view, predictions=preds, checkpoint=args.checkpoint,
                   config={"network": payload.get("network_config"), "train": payload.get("train_config"),
                           "predict": args.predict})
    out = Path(args.out or "eval_report")
    jpath, cpath = rep.write(out)
    print(f"MACE {rep.mace:.4f} px  baseline {rep.baseline_mace:.4f} px  over {len(rep.ace)} pairs -> {jpath}, {cpath}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    from .evaluation import box_overlay, evaluate, predict_homographies, triplet_strip

    if not args.corpus:
        raise UsageError("--corpus is required")
    view = _eval_view(args.corpus)
    if not view.has_truth:
        raise DataError("visualisation needs ground truth for every pair")
    if args.n > len(view):
        raise UsageError(f"asked for {args.n} samples but the corpus has {len(view)}")
    if args.predict == "truth":
        preds = view.truth.copy()
    elif args.predict == "identity":
        preds = np.broadcast_to(np.eye(3), view.truth.shape).copy()
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --predict truth|identity")
        model, _ = load_checkpoint(args.checkpoint)
        preds = predict_homographies(model, view)
    rep = evaluate(None, view, predictions=preds)
    out = Path(args.out or "figures")
    out.mkdir(parents=True, exist_ok=True)
    with (out / "boxes.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["identifier", "ace", "box_corner_gap"])
        for i in range(args.n):
            ident = view.identifiers[i]
            im, qt, qp = box_overlay(view.fixed[i], view.truth[i], preds[i], args.box_fraction)
            im.save(out / f"{ident}_boxes.png")
            triplet_strip(view.moving[i], view.fixed[i], preds[i]).save(out / f"{ident}_triplet.png")
            wr.writerow([ident, rep.ace[i], float(np.linalg.norm(qt - qp, axis=1).mean())])
    print(f"wrote {args.n} overlays and triplet strips to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_all

    sizes = tuple(int(s) for s in args.sizes.split(",")) if args.sizes else (16, 32, 64)
    rows = run_all(sizes, args.which)
    print(format_table(rows))
    bad = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(bad)}/{len(rows)} checks passed")
    return EXIT_NUMERIC if (bad and args.strict) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output path")
    common.add_argument("--checkpoint")
    common.add_argument("--corpus")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mmhomog", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="synthesise a corpus").set_defaults(fn=cmd_generate)
    sub.add_parser("train", parents=[common], help="alternating training").set_defaults(fn=cmd_train)
    pe = sub.add_parser("eval", parents=[common], help="MACE report")
    pe.add_argument("--predict", choices=("model", "truth", "identity"), default="model")
    pe.set_defaults(fn=cmd_eval)
    pv = sub.add_parser("visualize", parents=[common], help="box overlays and image strips")
    pv.add_argument("-n", type=int, default=8)
    pv.add_argument("--box-fraction", type=float, default=0.5)
    pv.add_argument("--predict", choices=("model", "truth", "identity"), default="model")
    pv.set_defaults(fn=cmd_visualize)
    pg = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks")
    pg.add_argument("--sizes", default="16,32,64")
    pg.add_argument("--which", choices=("all", "losses", "chain", "frozen"), default="all")
    pg.add_argument("--strict", action="store_true", help="exit 3 if any check fails")
    pg.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalAbort, DegenerateConfigurationError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
