"""Declarative experiment runs: split, optional pretraining, training, reporting.

A run is described by one JSON file. Relative paths inside it resolve against
the file's directory; a relative ``output_dir`` resolves against
``$FAULTFORMER_OUTPUT_ROOT`` when that is set.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig
from .data import Dataset, SplitError, SplitPlan, load_bundle, make_split, read_csv, synth_generate
from .model import MODELS, ConfigError, Encoder, EncoderConfig, build_classifier, count_parameters_by_block
from .optim import LrSchedule, OptimizerState
from .tokenize import Tokenizer
from .training import (
    MaskConfig,
    TrainMetrics,
    TransferError,
    encoder_descriptor,
    fit,
    load_checkpoint,
    pretrain,
    quantize_,
    save_checkpoint,
    transfer_for_finetune,
)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "FAULTFORMER_OUTPUT_ROOT"
EXPERIMENT_KINDS = ("baseline", "scarcity", "task_adapt", "dataset_adapt", "synthetic")

REPORT_GRIDS = {
    "task_adapt": [1, 2, 5, 20, 40],
    "dataset_adapt": [1, 2, 5, 10, 20],
}
SCARCITY_GRID = [100, 200, 400]

PROFILES = {
    "full": {"model_dim": 256, "n_heads": 32, "n_layers": 4, "dropout": 0.3},
    "desk": {"model_dim": 64, "n_heads": 4, "n_layers": 2, "dropout": 0.1},
}

DEFAULTS = {
    "experiment": "synthetic",
    "data": {"synthetic": {"n_classes": 4, "per_class": 75, "length": 1600, "noise_sigma": 0.3, "seed": 0}},
    "pretrain_data": None,
    "split": {"seed": 0},
    "tokenizer": {"kind": "fourier", "d": 8, "n_modes": 40, "normalize_frequency": True},
    "augment_probability": 0.0,
    "model": "transformer",
    "profile": "desk",
    "encoder": {},
    "baseline": {},
    "epochs": 20,
    "batch_size": 16,
    "schedule": {"warmup_steps": 100, "min_lr": 1e-4, "max_lr": 1e-3},
    "optimizer": {"beta1": 0.9, "beta2": 0.98, "eps": 1e-8, "weight_decay": 0.01},
    "pretrain": None,
    "checkpoint": None,
    "report_epochs": None,
    "eval_every": 1,
    "seeds": [0, 1, 2],
    "zscore": False,
    "output_dir": "runs/experiment",
}

PRETRAIN_DEFAULTS = {
    "epochs": 20,
    "batch_size": 16,
    "tokenizer": None,
    "mask": {"mask_p": 0.5, "zero_frac": 0.7, "random_frac": 0.2, "loss_on": "masked"},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentConfig":
        unknown = set(d) - set(DEFAULTS) - {"seed", "name"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        raw = _merge(DEFAULTS, {k: v for k, v in d.items() if k != "seed"})
        if "data" in d:
            raw["data"] = copy.deepcopy(d["data"])
        if "seed" in d:
            raw["seeds"] = [int(d["seed"])]
        if raw["pretrain"] is not None:
            raw["pretrain"] = _merge(PRETRAIN_DEFAULTS, raw["pretrain"])
        cfg = cls(raw, Path(base_dir) if base_dir else Path.cwd())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(d, path.parent.resolve())

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def name(self) -> str:
        return self.raw.get("name") or f"{self['experiment']}-{self['model']}-{self.tokenizer_kind}-p{self['augment_probability']}"

    @property
    def tokenizer_kind(self) -> str:
        return self["tokenizer"]["kind"]

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def output_dir(self) -> Path:
        out = Path(self["output_dir"])
        if out.is_absolute():
            return out
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return Path(root) / out if root else self.base_dir / out

    def validate(self) -> None:
        r = self.raw
        if r["experiment"] not in EXPERIMENT_KINDS:
            raise ConfigError(f"experiment must be one of {EXPERIMENT_KINDS}, got {r['experiment']!r}")
        if r["model"] not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {r['model']!r}")
        if not 0.0 <= float(r["augment_probability"]) <= 1.0:
            raise ConfigError("augment_probability must lie in [0, 1]")
        if r["profile"] not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}")
        if int(r["epochs"]) < 1:
            raise ConfigError("epochs must be positive")
        if not r["seeds"]:
            raise ConfigError("at least one seed is required")
        if r["model"] == "transformer_pretrained" and not r["checkpoint"] and not r["pretrain"]:
            raise ConfigError("transformer_pretrained needs a 'checkpoint' path or a 'pretrain' section")
        if r["model"] != "transformer_pretrained" and (r["checkpoint"] or r["pretrain"]):
            raise ConfigError(f"model {r['model']!r} does not use a pretrained checkpoint")
        if r["experiment"] == "dataset_adapt" and r["pretrain_data"] is None:
            raise ConfigError("dataset_adapt needs 'pretrain_data'")
        Tokenizer(self.tokenizer_kind)
        self.encoder_config(1, 1)
        for key in ("data", "pretrain_data"):
            src = r[key]
            if src is not None and "synthetic" not in src and "path" not in src:
                raise ConfigError(f"'{key}' needs either 'path' or 'synthetic'")
            if src is not None and "path" in src and not self.resolve(src["path"]).exists():
                raise ConfigError(f"data file {self.resolve(src['path'])} does not exist")
        if r["checkpoint"] and not self.resolve(r["checkpoint"]).exists():
            raise ConfigError(f"checkpoint {self.resolve(r['checkpoint'])} does not exist")

    def encoder_config(self, input_dim: int, n_classes: int) -> EncoderConfig:
        d = dict(PROFILES[self["profile"]])
        d.update(self["encoder"])
        d.update(input_dim=input_dim, n_classes=n_classes)
        return EncoderConfig.from_dict(d)

    def report_epochs(self) -> list[int]:
        grid = self["report_epochs"] or REPORT_GRIDS.get(self["experiment"], [])
        epochs = int(self["epochs"])
        return sorted({e for e in grid if e <= epochs} | {epochs})

    def snapshot(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def load_source(cfg: ExperimentConfig, src: dict) -> Dataset:
    if "synthetic" in src:
        s = dict(src["synthetic"])
        ds = synth_generate(s.pop("n_classes"), s.pop("per_class"), s.pop("length"),
                            s.pop("noise_sigma"), s.pop("seed"), **s)
    elif str(src["path"]).endswith(".csv"):
        ds = read_csv(cfg.resolve(src["path"]), n_classes=src["n_classes"],
                      sample_rate_hz=src.get("sample_rate_hz", 48_000.0))
    else:
        ds = load_bundle(cfg.resolve(src["path"]))
    return ds.zscore() if cfg["zscore"] else ds


def build_split(cfg: ExperimentConfig, dataset: Dataset, pretrain_dataset: Dataset | None) -> SplitPlan:
    s = dict(cfg["split"])
    seed = int(s.pop("seed", 0))
    kind = cfg["experiment"]
    if kind == "synthetic":
        kind = "baseline"
    return make_split(dataset, kind, seed, pretrain_dataset=pretrain_dataset, **s)


# result tables


@dataclass
class ResultRow:
    model: str
    tokenizer: str
    augment_p: float
    epoch: str
    accuracy: float
    seed: str = "mean"


RESULT_COLUMNS = ("tokenizer", "model", "augment_p", "epoch", "seed", "accuracy")


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)

    def sorted(self) -> "ResultTable":
        def key(r):
            ep = r.epoch
            return (r.tokenizer, r.model, r.augment_p, ep == "final", int(ep) if ep != "final" else 0,
                    r.seed != "mean", r.seed)
        return ResultTable(sorted(self.rows, key=key))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in self.rows:
            w.writerow([r.tokenizer, r.model, repr(float(r.augment_p)), r.epoch, r.seed, repr(float(r.accuracy))])
        return buf.getvalue()

    def mean_accuracy(self, epoch: str = "final") -> float:
        vals = [r.accuracy for r in self.rows if r.epoch == epoch and r.seed == "mean"]
        if not vals:
            raise KeyError(f"no mean row for epoch {epoch}")
        return vals[0]


METRIC_COLUMNS = ("epoch", "split", "loss", "accuracy", "lr")


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def metrics_csv(pretrain_losses: list[float], history: list[TrainMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for i, loss in enumerate(pretrain_losses, start=1):
        w.writerow([i, "pretrain", _fmt(loss), "", ""])
    for m in history:
        w.writerow([m.epoch, "train", _fmt(m.train_loss), "", _fmt(m.lr)])
        if m.confusion.size:
            w.writerow([m.epoch, "test", _fmt(m.test_loss), _fmt(m.test_accuracy), ""])
    return buf.getvalue()


def timing_csv(pretrain_seconds: list[float], history: list[TrainMetrics]) -> str:
    lines = ["epoch,split,seconds"]
    lines += [f"{i},pretrain,{s:.3f}" for i, s in enumerate(pretrain_seconds, start=1)]
    lines += [f"{m.epoch},train,{m.wall_seconds:.3f}" for m in history]
    return "\n".join(lines) + "\n"


def epochs_to_accuracy(history: list[TrainMetrics], threshold: float) -> int | None:
    for m in history:
        if m.confusion.size and m.test_accuracy >= threshold:
            return m.epoch
    return None


# running


@dataclass
class SeedResult:
    seed: int
    history: list[TrainMetrics]
    pretrain_losses: list[float]
    run_dir: Path

    def accuracy_at(self, epoch: int) -> float:
        for m in self.history:
            if m.epoch == epoch and m.confusion.size:
                return m.test_accuracy
        raise KeyError(f"no evaluation at epoch {epoch}")


@dataclass
class ExperimentResult:
    table: ResultTable
    seeds: list[SeedResult]
    split: SplitPlan
    output_dir: Path


def _optimizer(cfg: ExperimentConfig) -> OptimizerState:
    o = cfg["optimizer"]
    return OptimizerState(lr=cfg["schedule"]["max_lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                          weight_decay=o["weight_decay"])


def _schedule(cfg: ExperimentConfig, steps_per_epoch: int, epochs: int) -> LrSchedule:
    s = cfg["schedule"]
    return LrSchedule.fitted(steps_per_epoch * epochs, s["warmup_steps"], s["min_lr"], s["max_lr"])


def _pretrain_tokenizer(cfg: ExperimentConfig) -> Tokenizer:
    t = _merge(cfg["tokenizer"], cfg["pretrain"].get("tokenizer") or {})
    return Tokenizer(t["kind"], d=t["d"], n_modes=t["n_modes"], normalize_frequency=t["normalize_frequency"])


def _run_pretraining(cfg: ExperimentConfig, signals: np.ndarray, n_classes: int, seed: int,
                     run_dir: Path) -> tuple[Path, list[float], list[float]]:
    p = cfg["pretrain"]
    tok = _pretrain_tokenizer(cfg)
    rng = np.random.default_rng([seed, 1])
    enc = Encoder(cfg.encoder_config(tok.token_dim, n_classes), rng)
    log.info("pretraining %d parameters on %d signals", enc.n_parameters(), len(signals))
    opt = _optimizer(cfg)
    steps = -(-len(signals) // p["batch_size"])
    sched = _schedule(cfg, steps, p["epochs"])
    seconds = []
    t0 = [time.perf_counter()]

    def tick(epoch, loss):
        now = time.perf_counter()
        seconds.append(now - t0[0])
        t0[0] = now
        log.info("pretrain epoch %d loss %.6g", epoch, loss)

    losses = pretrain(signals, enc, tok, epochs=p["epochs"], rng=rng, opt=opt, sched=sched,
                      batch_size=p["batch_size"], mask=MaskConfig(**p["mask"]), on_epoch=tick)
    params = enc.named_parameters()
    quantize_(params, opt)
    path = run_dir / "pretrain.ffck"
    save_checkpoint(path, encoder_descriptor(enc, tok, epochs=p["epochs"]), params, rng, opt)
    return path, losses, seconds


def _expected_arch(cfg: ExperimentConfig) -> dict:
    tok = Tokenizer(cfg.tokenizer_kind)
    enc = cfg.encoder_config(tok.token_dim, 1)
    return {"tokenizer": cfg.tokenizer_kind, "input_dim": tok.token_dim, "model_dim": enc.model_dim}


def run_seed(cfg: ExperimentConfig, dataset: Dataset, pretrain_dataset: Dataset | None, split: SplitPlan,
             seed: int, run_dir: Path) -> SeedResult:
    run_dir.mkdir(parents=True, exist_ok=True)
    train_set = dataset.subset(split.train_indices)
    test_set = dataset.subset(split.test_indices)
    n_classes = dataset.n_classes
    pretrain_losses, pretrain_seconds = [], []
    if cfg["model"] == "transformer_pretrained":
        if cfg["checkpoint"]:
            ckpt_path = cfg.resolve(cfg["checkpoint"])
        else:
            source = pretrain_dataset if split.pretrain_source != "same" else dataset
            if not split.pretrain_indices:
                raise ConfigError("pretraining requested but the split has no pretraining pool")
            signals = source.values[split.pretrain_indices]
            ckpt_path, pretrain_losses, pretrain_seconds = _run_pretraining(
                cfg, signals, n_classes, seed, run_dir)
        rng = np.random.default_rng([seed, 2])
        try:
            model = transfer_for_finetune(load_checkpoint(ckpt_path), n_classes, rng, _expected_arch(cfg),
                                          dropout=cfg.encoder_config(1, 1).dropout)
        except TransferError as exc:
            raise ConfigError(str(exc)) from None
    else:
        rng = np.random.default_rng([seed, 2])
        t = cfg["tokenizer"]
        tok = Tokenizer(t["kind"], d=t["d"], n_modes=t["n_modes"], normalize_frequency=t["normalize_frequency"],
                        rng=rng)
        enc_cfg = cfg.encoder_config(tok.token_dim, n_classes)
        model = build_classifier(cfg["model"], tok, n_classes, rng, enc_cfg, dropout=enc_cfg.dropout,
                                 baseline_overrides=cfg["baseline"] or None)
    if model.is_transformer:
        log.info("model blocks: %s", count_parameters_by_block(model.net))
    opt = _optimizer(cfg)
    epochs = int(cfg["epochs"])
    steps = -(-len(train_set) // cfg["batch_size"])
    sched = _schedule(cfg, steps, epochs)
    aug = AugmentConfig(probability=float(cfg["augment_probability"]), rng_seed=seed)
    history = fit(model, train_set, test_set, epochs=epochs, rng=rng, opt=opt, sched=sched,
                  augment_cfg=aug, batch_size=cfg["batch_size"], eval_every=cfg["eval_every"],
                  eval_epochs=cfg.report_epochs(), checkpoint_path=run_dir / "final.ffck",
                  descriptor_extra={"seed": seed, "baseline": cfg["baseline"] or None},
                  on_epoch=lambda m: log.info("seed %d epoch %d loss %.4f acc %s", seed, m.epoch,
                                              m.train_loss, _fmt(m.test_accuracy)))
    (run_dir / "metrics.csv").write_text(metrics_csv(pretrain_losses, history))
    (run_dir / "timing.csv").write_text(timing_csv(pretrain_seconds, history))
    return SeedResult(seed, history, pretrain_losses, run_dir)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Split, optionally pretrain, train every seed and write the run artifacts:
    config snapshot, split manifest, per-seed metrics and checkpoints,
    ``results.csv``, ``summary.json`` and ``accuracy.svg``.
    """
    dataset = load_source(cfg, cfg["data"])
    pretrain_dataset = load_source(cfg, cfg["pretrain_data"]) if cfg["pretrain_data"] else None
    try:
        split = build_split(cfg, dataset, pretrain_dataset)
        split.check(dataset, pretrain_dataset)
    except (SplitError, TypeError) as exc:
        raise ConfigError(f"bad split: {exc}") from None
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.snapshot() + "\n")
    (out / "split.json").write_text(split.to_json() + "\n")

    seeds = [run_seed(cfg, dataset, pretrain_dataset, split, int(s), out / f"seed_{int(s)}")
             for s in cfg["seeds"]]
    table = ResultTable()
    base = dict(model=cfg["model"], tokenizer=cfg.tokenizer_kind, augment_p=float(cfg["augment_probability"]))
    grid = cfg.report_epochs()
    for ep in grid:
        label = "final" if ep == int(cfg["epochs"]) else str(ep)
        accs = [s.accuracy_at(ep) for s in seeds]
        for s, a in zip(seeds, accs):
            table.rows.append(ResultRow(epoch=label, accuracy=a, seed=str(s.seed), **base))
        table.rows.append(ResultRow(epoch=label, accuracy=float(np.mean(accs)), **base))
    table = table.sorted()
    (out / "results.csv").write_text(table.to_csv())
    summary = {
        "name": cfg.name,
        "final_mean_accuracy": table.mean_accuracy("final"),
        "final_accuracy_by_seed": {str(s.seed): s.history[-1].test_accuracy for s in seeds},
        "report_epochs": grid,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "accuracy.svg").write_text(accuracy_svg(
        {f"seed {s.seed}": [(m.epoch, m.test_accuracy) for m in s.history if m.confusion.size] for s in seeds},
        title=cfg.name))
    return ExperimentResult(table, seeds, split, out)


def compare_models(cfgs: list[ExperimentConfig], output: Path | None = None) -> ResultTable:
    """Run every config on one shared split and merge the result tables,
    sorted by tokenizer, model and augmentation probability.
    """
    split_seeds = {int(c["split"].get("seed", 0)) for c in cfgs}
    if len(split_seeds) > 1:
        raise ConfigError(f"configs use different split seeds {sorted(split_seeds)}")
    merged = ResultTable()
    for c in cfgs:
        merged.rows.extend(run_experiment(c).table.rows)
    merged = merged.sorted()
    if output is not None:
        output.parent.mkdir(parents=True, exist_ok=True)
        output.write_text(merged.to_csv())
    return merged


def grid_configs(base: dict, models=("transformer",), tokenizers=("fourier", "cnn", "constant"),
                 probabilities=(0.0, 0.3, 0.6, 0.9), base_dir=None) -> list[ExperimentConfig]:
    out = []
    root = base.get("output_dir", "runs/grid")
    for m in models:
        for t in tokenizers:
            for p in probabilities:
                d = _merge(base, {"model": m, "tokenizer": {"kind": t}, "augment_probability": p,
                                  "output_dir": f"{root}/{m}-{t}-p{p}"})
                out.append(ExperimentConfig.from_dict(d, base_dir))
    return out


# plotting

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def accuracy_svg(series: dict[str, list[tuple[int, float]]], title: str = "", width: int = 480,
                 height: int = 300) -> str:
    """Line chart of accuracy against epoch, one polyline per series."""
    pad = 40
    pts = [p for s in series.values() for p in s]
    max_ep = max((p[0] for p in pts), default=1)
    min_ep = min((p[0] for p in pts), default=0)
    span = max(max_ep - min_ep, 1)

    def xy(ep, acc):
        x = pad + (ep - min_ep) / span * (width - 2 * pad)
        y = height - pad - acc * (height - 2 * pad)
        return f"{x:.1f},{y:.1f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="12">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    for tick in (0.0, 0.5, 1.0):
        y = height - pad - tick * (height - 2 * pad)
        parts.append(f'<text x="{pad - 5}" y="{y + 4:.1f}" text-anchor="end" font-size="10">{tick:.1f}</text>')
    parts.append(f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" font-size="10">epoch</text>')
    for i, (label, s) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        if s:
            parts.append(f'<polyline fill="none" stroke="{color}" points="{" ".join(xy(e, a) for e, a in s)}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 12 * i}" text-anchor="end" font-size="10" '
                     f'fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
