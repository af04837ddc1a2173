"""Masked pretraining, supervised training, evaluation and checkpoints."""

from __future__ import annotations

import contextlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, augment_batch
from .data import Dataset
from .model import Classifier, ConfigError, Encoder, EncoderConfig, build_classifier
from .optim import LrSchedule, OptimizerState, adamw_step, onecycle_lr
from .tensor import Tensor
from .tokenize import Tokenizer

ZERO, RANDOM, KEEP = 0, 1, 2
UNMASKED = -1


class TrainingAbort(RuntimeError):
    def __init__(self, message: str, step: int, op: str | None = None):
        super().__init__(f"{message} at step {step}" + (f" (first non-finite op: {op})" if op else ""))
        self.step = step
        self.op = op


class DataError(ValueError):
    pass


class TransferError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


# masking


@dataclass(frozen=True)
class MaskConfig:
    mask_p: float = 0.5
    zero_frac: float = 0.7
    random_frac: float = 0.2
    loss_on: str = "masked"

    def __post_init__(self):
        if not 0.0 <= self.mask_p <= 1.0:
            raise ValueError(f"mask_p must lie in [0, 1], got {self.mask_p}")
        if self.zero_frac < 0 or self.random_frac < 0 or self.zero_frac + self.random_frac > 1:
            raise ValueError("zero_frac + random_frac must lie in [0, 1]")
        if self.loss_on not in ("masked", "all"):
            raise ValueError(f"loss_on must be 'masked' or 'all', got {self.loss_on!r}")


@dataclass
class MaskPlan:
    masked: np.ndarray
    action: np.ndarray
    replacement_values: np.ndarray

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())


def apply_mask(tokens, rng: np.random.Generator, mask_p: float = 0.5, zero_frac: float = 0.7,
               random_frac: float = 0.2) -> tuple[np.ndarray, MaskPlan]:
    """Corrupt ``tokens`` (n, d) or (B, n, d).

    Each token is masked with probability ``mask_p``. A masked token is zeroed
    (``zero_frac``), overwritten with values drawn uniformly from its sample's
    [min, max] (``random_frac``), or kept. ``plan.action`` is -1 where unmasked.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    batched = tokens.ndim == 3
    tok = tokens if batched else tokens[None]
    b, n, d = tok.shape
    masked = rng.random((b, n)) < mask_p
    u = rng.random((b, n))
    action = np.where(u < zero_frac, ZERO, np.where(u < zero_frac + random_frac, RANDOM, KEEP))
    action = np.where(masked, action, UNMASKED)
    lo = tok.min(axis=(1, 2))[:, None, None]
    hi = tok.max(axis=(1, 2))[:, None, None]
    repl = lo + (hi - lo) * rng.random((b, n, d))
    out = tok.copy()
    out[action == ZERO] = 0.0
    out[action == RANDOM] = repl[action == RANDOM]
    repl = np.where((action == RANDOM)[..., None], repl, 0.0)
    if not batched:
        return out[0], MaskPlan(masked[0], action[0], repl[0])
    return out, MaskPlan(masked, action, repl)


def reconstruction_loss(recon: Tensor, target: np.ndarray, plan: MaskPlan, loss_on: str = "masked") -> Tensor:
    """Mean squared error over masked tokens (or all tokens); 0 when nothing is masked."""
    weight = plan.masked if loss_on == "masked" else np.ones_like(plan.masked)
    count = int(weight.sum()) * target.shape[-1]
    if count == 0:
        return Tensor(0.0)
    w = np.broadcast_to(weight[..., None], target.shape).astype(np.float64)
    diff = T.sub(recon, Tensor(target))
    return T.mul(T.tsum(T.mul(T.square(diff), Tensor(w))), 1.0 / count)


# metrics


@dataclass
class TrainMetrics:
    epoch: int
    train_loss: float
    test_accuracy: float
    confusion: np.ndarray
    lr: float
    wall_seconds: float
    test_loss: float = float("nan")
    lr_trace: list[float] = field(default_factory=list)

    @property
    def n_evaluated(self) -> int:
        return int(self.confusion.sum())


def _check_finite(loss: Tensor, step: int) -> None:
    if not np.isfinite(loss.data).all():
        node = T.first_nonfinite(loss)
        raise TrainingAbort("non-finite loss", step, node.op if node is not None else None)


@contextlib.contextmanager
def _forward_guard(step: int):
    """Report a NaN that reached softmax as a training abort."""
    try:
        yield
    except T.NumericError as exc:
        raise TrainingAbort(str(exc), step, "softmax") from None


def _step(params: dict[str, Tensor], loss: Tensor, opt: OptimizerState, lr: float) -> None:
    for p in params.values():
        p.grad = None
    loss.backward()
    adamw_step(params, opt, lr)


def pretrain_step(batch_tokens: np.ndarray, encoder: Encoder, opt: OptimizerState, sched: LrSchedule,
                  rng: np.random.Generator, mask: MaskConfig = MaskConfig()) -> float:
    """Mask, reconstruct, and take one AdamW step. Returns the loss.

    Batches with no masked token give loss 0 and leave parameters untouched.
    """
    corrupted, plan = apply_mask(batch_tokens, rng, mask.mask_p, mask.zero_frac, mask.random_frac)
    if mask.loss_on == "masked" and plan.n_masked == 0:
        return 0.0
    params = encoder.mode_parameters("reconstruct")
    with _forward_guard(opt.step):
        recon = encoder.encode(Tensor(corrupted), "reconstruct", rng, training=True)
    loss = reconstruction_loss(recon, np.asarray(batch_tokens), plan, mask.loss_on)
    _check_finite(loss, opt.step)
    _step(params, loss, opt, onecycle_lr(opt.step, sched))
    return loss.item()


def pretrain_epoch(signals: np.ndarray, encoder: Encoder, tokenizer: Tokenizer, opt: OptimizerState,
                   sched: LrSchedule, rng: np.random.Generator, batch_size: int = 16,
                   mask: MaskConfig = MaskConfig()) -> float:
    if tokenizer.trainable:
        raise ConfigError("masked pretraining needs a fixed tokenizer (constant or fourier)")
    order = rng.permutation(len(signals))
    losses = []
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        losses.append(pretrain_step(tokenizer.tokens(signals[idx]), encoder, opt, sched, rng, mask))
    return float(np.mean(losses))


def finetune_epoch(train_set: Dataset, model: Classifier, opt: OptimizerState, sched: LrSchedule,
                   augment_cfg: AugmentConfig, rng: np.random.Generator, *, batch_size: int = 16,
                   epoch: int = 0, test_set: Dataset | None = None) -> TrainMetrics:
    """One pass over shuffled minibatches with per-sample augmentation, then
    evaluation on the untouched ``test_set`` when given.
    """
    if train_set.labels is None:
        raise DataError("training set has no labels")
    if train_set.labels.max() >= model.n_classes:
        raise DataError(f"label {train_set.labels.max()} >= n_classes {model.n_classes}")
    start = time.perf_counter()
    params = model.trainable()
    order = rng.permutation(len(train_set))
    losses, weights, lrs = [], [], []
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        x = augment_batch(train_set.values[idx], augment_cfg, rng)
        with _forward_guard(opt.step):
            logits = model.logits(x, rng, training=True)
        loss = T.cross_entropy(logits, train_set.labels[idx])
        _check_finite(loss, opt.step)
        lr = onecycle_lr(opt.step, sched)
        _step(params, loss, opt, lr)
        losses.append(loss.item())
        weights.append(len(idx))
        lrs.append(lr)
    train_loss = float(np.average(losses, weights=weights))
    if test_set is not None:
        ev = evaluate(test_set, model)
        acc, conf, tl = ev.test_accuracy, ev.confusion, ev.test_loss
    else:
        acc, conf, tl = float("nan"), np.zeros((0, 0), dtype=np.int64), float("nan")
    return TrainMetrics(epoch, train_loss, acc, conf, lrs[-1], time.perf_counter() - start, tl, lrs)


def predict_logits(signals: np.ndarray, model: Classifier, batch_size: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for lo in range(0, len(signals), batch_size):
            out.append(model.logits(signals[lo:lo + batch_size], None, training=False).data)
    return np.concatenate(out)


def evaluate(test_set: Dataset, model: Classifier, batch_size: int = 64, epoch: int = 0) -> TrainMetrics:
    """Accuracy and confusion matrix without augmentation or dropout."""
    if len(test_set) == 0 or test_set.labels is None:
        raise DataError("evaluation needs a non-empty labeled test set")
    start = time.perf_counter()
    logits = predict_logits(test_set.values, model, batch_size)
    n_classes = logits.shape[1]
    pred = logits.argmax(axis=1)
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (test_set.labels, pred), 1)
    with T.no_grad():
        loss = T.cross_entropy(Tensor(logits), test_set.labels).item()
    acc = float(np.trace(conf) / conf.sum())
    return TrainMetrics(epoch, float("nan"), acc, conf, float("nan"), time.perf_counter() - start, loss)


# checkpoints

CHECKPOINT_MAGIC = b"FFCK1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelCheckpoint:
    descriptor: dict
    params: dict[str, np.ndarray]
    rng_state: dict | None = None
    optimizer: dict | None = None


def _write_str(fh, s: str) -> None:
    b = s.encode("utf-8")
    fh.write(struct.pack("<I", len(b)))
    fh.write(b)


def _records(params: dict[str, np.ndarray], optimizer: OptimizerState | None) -> list[tuple[str, np.ndarray]]:
    recs = list(params.items())
    if optimizer is not None:
        recs += [(f"@m/{k}", v) for k, v in optimizer.first_moment.items()]
        recs += [(f"@v/{k}", v) for k, v in optimizer.second_moment.items()]
    return recs


def save_checkpoint(path, descriptor: dict, params: dict[str, Tensor | np.ndarray],
                    rng: np.random.Generator | None = None, optimizer: OptimizerState | None = None) -> None:
    """FFCK1: magic, version byte, JSON descriptor, records of (name, rank,
    u32 dims, f32 values), then the JSON-encoded generator state.
    All integers are little-endian u32 and every string is length-prefixed.
    """
    arrays = {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in params.items()}
    desc = dict(descriptor)
    if optimizer is not None:
        desc["optimizer"] = optimizer.hyperparams()
    recs = _records(arrays, optimizer)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        _write_str(fh, json.dumps(desc, sort_keys=True))
        fh.write(struct.pack("<I", len(recs)))
        for name, arr in recs:
            _write_str(fh, name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        _write_str(fh, json.dumps(rng.bit_generator.state if rng is not None else None))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated while reading {what} at byte offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what: str) -> str:
        return self.take(self.u32(what), what).decode("utf-8")


def load_checkpoint(path) -> ModelCheckpoint:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(5, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = r.take(1, "version")[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    descriptor = json.loads(r.text("descriptor"))
    params, moments = {}, {"@m": {}, "@v": {}}
    for _ in range(r.u32("record count")):
        name = r.text("record name")
        rank = r.u32("rank")
        shape = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}")))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(r.take(4 * count, f"values of {name}"), dtype="<f4").reshape(shape)
        values = values.astype(np.float64)
        if name.startswith(("@m/", "@v/")):
            moments[name[:2]][name[3:]] = values
        else:
            params[name] = values
    rng_state = json.loads(r.text("rng state"))
    if r.pos != len(r.buf):
        raise CheckpointFormatError(f"{len(r.buf) - r.pos} trailing bytes at offset {r.pos}")
    opt = None
    if "optimizer" in descriptor:
        opt = dict(descriptor["optimizer"], first_moment=moments["@m"], second_moment=moments["@v"])
    return ModelCheckpoint(descriptor, params, rng_state, opt)


def restore_optimizer(ckpt: ModelCheckpoint) -> OptimizerState | None:
    return None if ckpt.optimizer is None else OptimizerState(**ckpt.optimizer)


def restore_rng(ckpt: ModelCheckpoint) -> np.random.Generator | None:
    if ckpt.rng_state is None:
        return None
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    return rng


def quantize_(params: dict[str, Tensor], optimizer: OptimizerState | None = None) -> None:
    """Round parameters (and moments) to float32 in place, matching what a
    checkpoint stores so a resumed run continues from the identical state.
    """
    for p in params.values():
        p.data = p.data.astype(np.float32).astype(np.float64)
    if optimizer is not None:
        for d in (optimizer.first_moment, optimizer.second_moment):
            for k in d:
                d[k] = d[k].astype(np.float32).astype(np.float64)


def classifier_descriptor(model: Classifier, **extra) -> dict:
    desc = {"model": model.kind, "tokenizer": model.tokenizer.descriptor(), "n_classes": model.n_classes}
    if model.is_transformer:
        desc["encoder"] = model.net.cfg.to_dict()
    desc.update(extra)
    return desc


def encoder_descriptor(encoder: Encoder, tokenizer: Tokenizer, **extra) -> dict:
    desc = {"model": "pretrain", "tokenizer": tokenizer.descriptor(), "encoder": encoder.cfg.to_dict()}
    desc.update(extra)
    return desc


def _tokenizer_from(desc: dict, rng: np.random.Generator) -> Tokenizer:
    t = desc["tokenizer"]
    return Tokenizer(t["kind"], d=t["d"], n_modes=t["n_modes"],
                     normalize_frequency=t["normalize_frequency"], rng=rng)


def classifier_from_checkpoint(ckpt: ModelCheckpoint, baseline_overrides: dict | None = None) -> Classifier:
    desc = ckpt.descriptor
    rng = np.random.default_rng(0)
    tok = _tokenizer_from(desc, rng)
    if desc["model"] in ("transformer", "transformer_pretrained"):
        cfg = EncoderConfig.from_dict(desc["encoder"])
        model = build_classifier(desc["model"], tok, cfg.n_classes, rng, cfg)
    elif desc["model"] in ("cnn", "mlp"):
        model = build_classifier(desc["model"], tok, desc["n_classes"], rng,
                                 baseline_overrides=baseline_overrides or desc.get("baseline"))
    else:
        raise CheckpointFormatError(f"checkpoint holds a {desc['model']!r} model, not a classifier")
    if model.is_transformer and not any(k.startswith("net.recon_head.") for k in ckpt.params):
        model.drop_reconstruction_head()
    model.load_state_dict(ckpt.params)
    return model


def encoder_from_checkpoint(ckpt: ModelCheckpoint) -> tuple[Encoder, Tokenizer]:
    desc = ckpt.descriptor
    rng = np.random.default_rng(0)
    enc = Encoder(EncoderConfig.from_dict(desc["encoder"]), rng)
    prefix = "net." if desc["model"] != "pretrain" else ""
    enc.load_state_dict({k[len(prefix):]: v for k, v in ckpt.params.items() if k.startswith(prefix)},
                        strict=False)
    return enc, _tokenizer_from(desc, rng)


TRANSFER_FIELDS = ("input_dim", "model_dim", "n_heads", "n_layers", "ff_hidden_dim", "ff_variant", "embedder")


def transfer_for_finetune(pretrained: ModelCheckpoint, n_classes: int, rng: np.random.Generator,
                          expected: dict | None = None, dropout: float | None = None) -> Classifier:
    """Classifier whose embedder and layers come from ``pretrained``; the class
    token and classification head are freshly initialised and the
    reconstruction head is dropped.

    ``expected`` may name encoder fields and ``tokenizer`` that must match.
    """
    desc = pretrained.descriptor
    if "encoder" not in desc:
        raise TransferError("checkpoint has no encoder")
    cfg = EncoderConfig.from_dict(desc["encoder"])
    if expected:
        bad = []
        for key, want in expected.items():
            have = desc["tokenizer"]["kind"] if key == "tokenizer" else getattr(cfg, key, None)
            if have != want:
                bad.append(f"{key}: checkpoint={have!r} expected={want!r}")
        if bad:
            raise TransferError("architecture mismatch; " + "; ".join(bad))
    enc, tok = encoder_from_checkpoint(pretrained)
    if dropout is not None:
        cfg.dropout = dropout
        enc.cfg.dropout = dropout
        for layer in enc.layers:
            layer.attn.dropout = dropout
            layer.ff.dropout = dropout
    enc.reset_head(rng, n_classes)
    enc.recon_head = None
    return Classifier("transformer_pretrained", tok, enc)


# training loops


def fit(model: Classifier, train_set: Dataset, test_set: Dataset | None, *, epochs: int,
        rng: np.random.Generator, opt: OptimizerState, sched: LrSchedule,
        augment_cfg: AugmentConfig = AugmentConfig(), batch_size: int = 16, start_epoch: int = 0,
        eval_every: int = 1, eval_epochs=(), checkpoint_path=None, checkpoint_every: int | None = None,
        descriptor_extra: dict | None = None, on_epoch=None) -> list[TrainMetrics]:
    """Train epochs ``start_epoch+1 .. epochs``.

    With ``checkpoint_path``, a checkpoint is written after every
    ``checkpoint_every``-th epoch and after the last one; parameters and
    optimizer moments are rounded to float32 at that point so a run resumed
    from the file replays the uninterrupted run exactly.
    """
    history = []
    eval_epochs = set(eval_epochs)
    for epoch in range(start_epoch + 1, epochs + 1):
        do_eval = test_set is not None and (
            epoch in eval_epochs or epoch == epochs or (eval_every and epoch % eval_every == 0))
        m = finetune_epoch(train_set, model, opt, sched, augment_cfg, rng, batch_size=batch_size,
                           epoch=epoch, test_set=test_set if do_eval else None)
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
        due = checkpoint_every and epoch % checkpoint_every == 0
        if checkpoint_path is not None and (due or epoch == epochs):
            quantize_(model.trainable(), opt)
            desc = classifier_descriptor(model, epoch=epoch, total_epochs=epochs,
                                         schedule=asdict(sched), batch_size=batch_size,
                                         augment=asdict(augment_cfg), **(descriptor_extra or {}))
            save_checkpoint(checkpoint_path, desc, model.named_parameters(), rng, opt)
    return history


def resume_fit(checkpoint_path, train_set: Dataset, test_set: Dataset | None, **kwargs) -> tuple[Classifier, list[TrainMetrics]]:
    """Continue a :func:`fit` run from its checkpoint up to the recorded ``total_epochs``."""
    ckpt = load_checkpoint(checkpoint_path)
    desc = ckpt.descriptor
    if "epoch" not in desc or "total_epochs" not in desc:
        raise CheckpointFormatError("checkpoint was not written by a training loop; cannot resume")
    model = classifier_from_checkpoint(ckpt)
    opt = restore_optimizer(ckpt)
    rng = restore_rng(ckpt)
    aug = desc.get("augment", {})
    aug = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in aug.items()})
    history = fit(model, train_set, test_set, epochs=desc["total_epochs"], rng=rng, opt=opt,
                  sched=LrSchedule(**desc["schedule"]), augment_cfg=aug,
                  batch_size=desc["batch_size"], start_epoch=desc["epoch"],
                  checkpoint_path=kwargs.pop("checkpoint_out", checkpoint_path), **kwargs)
    return model, history


def pretrain(signals: np.ndarray, encoder: Encoder, tokenizer: Tokenizer, *, epochs: int,
             rng: np.random.Generator, opt: OptimizerState, sched: LrSchedule, batch_size: int = 16,
             mask: MaskConfig = MaskConfig(), on_epoch=None) -> list[float]:
    losses = []
    for epoch in range(1, epochs + 1):
        loss = pretrain_epoch(signals, encoder, tokenizer, opt, sched, rng, batch_size, mask)
        losses.append(loss)
        if on_epoch is not None:
            on_epoch(epoch, loss)
    return losses
