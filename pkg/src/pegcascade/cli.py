"""Command-line interface: generate, train, predict, evaluate, gradcheck, sweep."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import META_FILE, DataError, load_dataset
from .metrics import compute_metrics
from .preference import ConfigurationError
from .topic import Vocabulary

log = logging.getLogger("pegcascade")

LR_GRID = (1e-2, 1e-3, 1e-4)
PREDICTION_HEADER = ["cascade_id", "predicted_size", "true_size"]
SWEEP_HEADER = ["n_topics", "n_layers", "tau", "best_epoch", "val_mrse", "test_mrse"]


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _train_config(args):
    from .training import TrainConfig

    cfg = TrainConfig.load(_existing(args.config)) if args.config else TrainConfig()
    overrides = {}
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    return replace(cfg, **overrides) if overrides else cfg


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    return p


def _load_data(args, cfg=None, vocab=None):
    return load_dataset(
        _existing(args.data_dir),
        observation_window=args.observation_window,
        min_count=cfg.min_count if cfg is not None else 5,
        vocab=vocab,
    )


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    from .synth import SynthConfig, generate

    cfg = SynthConfig.load(_existing(args.config)) if args.config else SynthConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    paths = generate(cfg, args.out)
    if args.observation_window is not None:
        meta_path = Path(args.out) / META_FILE
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        meta["observation_window"] = args.observation_window
        meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for name, p in paths.items():
        print(f"{name}\t{p}")
    return 0


def _fit(cfg, data, splits=None):
    from .training import train

    result = train(cfg, data, splits)
    result.model.load_state_dict(result.best_state)
    return result


def cmd_train(args) -> int:
    from .training import make_splits, save_checkpoint

    cfg = _train_config(args)
    data = _load_data(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = make_splits(data, cfg)
    rates = LR_GRID if args.lr_grid else (cfg.learning_rate,)
    best = None
    for lr in rates:
        run_cfg = replace(cfg, learning_rate=lr)
        result = _fit(run_cfg, data, splits)
        log.info("lr %g: best val_mrse %.6f at epoch %d", lr, result.best_val_mrse, result.best_epoch)
        if len(rates) > 1:
            print(f"lr={lr:g}\tval_mrse={result.best_val_mrse:.6f}")
        if best is None or result.best_val_mrse < best[1].best_val_mrse:
            best = (run_cfg, result)
    run_cfg, result = best
    save_checkpoint(out / "checkpoint.npz", result.model, run_cfg, data.vocab.tokens, result.best_state)
    result.write_log(out / "train_log.csv")
    run_cfg.save(out / "config.toml")
    print(f"checkpoint\t{out / 'checkpoint.npz'}")
    print(f"best_epoch\t{result.best_epoch}")
    print(f"val_mrse\t{result.best_val_mrse:.6f}")
    return 0


def cmd_predict(args) -> int:
    from .training import TrainConfig, load_checkpoint, make_splits

    model, header = load_checkpoint(_existing(args.checkpoint))
    cfg = TrainConfig.from_dict(header["train_config"]) if header.get("train_config") else TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    vocab = Vocabulary(header["vocab"], [0] * len(header["vocab"])) if header.get("vocab") else None
    data = _load_data(args, cfg, vocab)
    if args.split == "all":
        idx = list(range(len(data.cascades)))
    else:
        idx = make_splits(data, cfg)[args.split]
    pred = model.predict(data, idx)
    truth = data.truths(idx)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(PREDICTION_HEADER)
        for i, p, t in zip(idx, pred, truth):
            w.writerow([data.cascades[i].item_id, repr(float(p)), int(t)])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def read_predictions(path) -> tuple[np.ndarray, np.ndarray]:
    with open(_existing(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != PREDICTION_HEADER:
        raise DataError(f"{path}: expected header {','.join(PREDICTION_HEADER)}")
    pred, truth = [], []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        try:
            pred.append(float(row[1]))
            truth.append(float(row[2]))
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric size")
    return np.array(pred), np.array(truth)


def cmd_evaluate(args) -> int:
    pred, truth = read_predictions(args.predictions)
    report = compute_metrics(pred, truth)
    print(report.to_text())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    else:
        print(report.to_json())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(points=args.points, h=args.h, tol=args.tol)
    width = max(len(n) for n, _ in results)
    print(f"{'op':<{width}}  status  max_rel_err")
    for name, r in results:
        print(f"{name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.max_rel_error:.3e}")
    failed = [n for n, r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return 1 if failed else 0


def cmd_sweep(args) -> int:
    from .training import evaluate_mrse, make_splits

    cfg = _train_config(args)
    data = _load_data(args, cfg)
    splits = make_splits(data, cfg)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(SWEEP_HEADER)
        for k, n_layers, tau in itertools.product(args.k, args.layers, args.tau):
            run_cfg = replace(cfg, n_topics=k, n_layers=n_layers, tau=tau)
            result = _fit(run_cfg, data, splits)
            test = evaluate_mrse(result.model, data, splits["test"])
            w.writerow([k, n_layers, tau, result.best_epoch, repr(result.best_val_mrse), repr(test)])
            out.flush()
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    from .model import VARIANTS

    parser = argparse.ArgumentParser(prog="pegcascade", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_flags(p):
        p.add_argument("--data-dir", required=True, help="directory with network.tsv, cascades.jsonl, ...")
        p.add_argument("--observation-window", type=float, default=None,
                       help="seconds after posting whose adopters count as seeds (default: meta.json)")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--config", help="synth TOML file")
    p.add_argument("--seed", type=int)
    p.add_argument("--observation-window", type=float, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    data_flags(p)
    p.add_argument("--config", help="training TOML file")
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr-grid", action="store_true", help=f"try learning rates {LR_GRID}, keep best on validation")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict cascade sizes with a checkpoint")
    data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, help="split seed (default: the checkpoint's)")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics for a prediction CSV")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", help="JSON path (default: JSON also on stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every registered op")
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--h", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="grid over topics K, layers L and window tau")
    data_flags(p)
    p.add_argument("--config", help="training TOML file")
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--k", type=_int_list, default=[2, 4, 8])
    p.add_argument("--layers", type=_int_list, default=[1, 2, 3])
    p.add_argument("--tau", type=_int_list, default=[5, 10, 15])
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename or e}", file=sys.stderr)
        return 1
    except (DataError, ConfigurationError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
