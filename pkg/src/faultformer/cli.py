"""Command line entry point: ``faultformer <command> --config FILE [--seed N] [--out DIR]``.

Exit status is 0 on success, 2 on a configuration or input error and 3 when
training aborts.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, augment_with_branch
from .data import BundleFormatError, IngestionError, SplitError
from .experiments import (
    ExperimentConfig,
    _run_pretraining,
    build_split,
    compare_models,
    grid_configs,
    load_source,
    run_experiment,
)
from .model import ConfigError
from .tokenize import Tokenizer
from .training import (
    CheckpointFormatError,
    TrainingAbort,
    TransferError,
    classifier_from_checkpoint,
    encoder_from_checkpoint,
    evaluate,
    load_checkpoint,
)

EXIT_CONFIG = 2
EXIT_ABORT = 3


def _config(args) -> ExperimentConfig:
    path = Path(args.config)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["output_dir"] = str(Path(args.out).resolve())
    return ExperimentConfig.from_dict(raw, path.parent.resolve())


def _split_sets(cfg: ExperimentConfig):
    ds = load_source(cfg, cfg["data"])
    pre = load_source(cfg, cfg["pretrain_data"]) if cfg["pretrain_data"] else None
    split = build_split(cfg, ds, pre)
    return ds, pre, split


def cmd_experiment(args) -> None:
    cfg = _config(args)
    if args.grid:
        cfgs = grid_configs(cfg.raw, models=args.models.split(","), base_dir=cfg.base_dir)
        table = compare_models(cfgs, cfg.output_dir() / "comparison.csv")
        print(table.to_csv(), end="")
        return
    result = run_experiment(cfg)
    print(result.table.to_csv(), end="")
    print(f"artifacts written to {result.output_dir}", file=sys.stderr)


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    if cfg["pretrain"] is None:
        raise ConfigError("config has no 'pretrain' section")
    ds, pre, split = _split_sets(cfg)
    source = pre if split.pretrain_source != "same" else ds
    if not split.pretrain_indices:
        raise ConfigError(f"the {cfg['experiment']} split has no pretraining pool")
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["seeds"][0])
    path, losses, _ = _run_pretraining(cfg, source.values[split.pretrain_indices], ds.n_classes, seed, out)
    (out / "pretrain_loss.csv").write_text(
        "epoch,loss\n" + "".join(f"{i},{loss!r}\n" for i, loss in enumerate(losses, start=1)))
    print(path)


def cmd_eval(args) -> None:
    cfg = _config(args)
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    ds, _, split = _split_sets(cfg)
    model = classifier_from_checkpoint(load_checkpoint(args.checkpoint))
    m = evaluate(ds.subset(split.test_indices), model)
    report = {"accuracy": m.test_accuracy, "loss": m.test_loss, "n": m.n_evaluated,
              "confusion": m.confusion.tolist()}
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report))


def _samples(cfg: ExperimentConfig, n: int) -> tuple[np.ndarray, np.ndarray | None]:
    ds = load_source(cfg, cfg["data"])
    n = min(n, len(ds))
    return ds.values[:n], (None if ds.labels is None else ds.labels[:n])


def cmd_augment_preview(args) -> None:
    cfg = _config(args)
    x, _ = _samples(cfg, args.n)
    p = float(cfg["augment_probability"]) or 1.0
    aug = AugmentConfig(probability=p)
    rng = np.random.default_rng(int(cfg["seeds"][0]))
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    path = out / "augment_preview.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "branch", "t", "before", "after"])
        for i, row in enumerate(x):
            y, branch = augment_with_branch(row, aug, rng)
            for t, (a, b) in enumerate(zip(row, y)):
                w.writerow([i, branch or "none", t, repr(float(a)), repr(float(b))])
    print(path)


def cmd_tokenize_dump(args) -> None:
    cfg = _config(args)
    x, _ = _samples(cfg, args.n)
    t = cfg["tokenizer"]
    tok = Tokenizer(t["kind"], d=t["d"], n_modes=t["n_modes"], normalize_frequency=t["normalize_frequency"],
                    rng=np.random.default_rng(int(cfg["seeds"][0])))
    tokens = tok(x).data
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"tokens_{tok.kind}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "token"] + [f"c{j}" for j in range(tokens.shape[-1])])
        for i, mat in enumerate(tokens):
            for j, vec in enumerate(mat):
                w.writerow([i, j] + [repr(float(v)) for v in vec])
    print(path)


def cmd_attn_dump(args) -> None:
    cfg = _config(args)
    if not args.checkpoint:
        raise ConfigError("attn-dump needs --checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.descriptor.get("model") in ("cnn", "mlp"):
        raise ConfigError("attention scores need a transformer checkpoint")
    if ckpt.descriptor["model"] == "pretrain":
        enc, tok = encoder_from_checkpoint(ckpt)
    else:
        model = classifier_from_checkpoint(ckpt)
        enc, tok = model.net, model.tokenizer
    x, _ = _samples(cfg, args.n)
    tokens = tok(x).data
    layers = range(len(enc.layers)) if args.layer is None else [args.layer]
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    path = out / "attention.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "layer", "head", "token", "score"])
        for layer in layers:
            scores = enc.attention_scores(tokens, layer)
            for i, per_head in enumerate(scores):
                for h, row in enumerate(per_head):
                    for j, s in enumerate(row):
                        w.writerow([i, layer, h, j, repr(float(s))])
    print(path)


COMMANDS = {
    "experiment": cmd_experiment,
    "finetune": cmd_experiment,
    "pretrain": cmd_pretrain,
    "eval": cmd_eval,
    "augment-preview": cmd_augment_preview,
    "tokenize-dump": cmd_tokenize_dump,
    "attn-dump": cmd_attn_dump,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faultformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if name in ("eval", "attn-dump"):
            p.add_argument("--checkpoint")
        if name in ("augment-preview", "tokenize-dump", "attn-dump"):
            p.add_argument("--n", type=int, default=4, help="number of samples")
        if name == "attn-dump":
            p.add_argument("--layer", type=int)
        if name in ("experiment", "finetune"):
            p.add_argument("--grid", action="store_true",
                           help="run the tokenizer x augmentation-probability grid")
            p.add_argument("--models", default="transformer")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ConfigError, SplitError, IngestionError, BundleFormatError, CheckpointFormatError,
            TransferError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
