import math

import numpy as np
import pytest

from faultformer.augment import AugmentConfig
from faultformer.data import Dataset, synth_generate
from faultformer.model import Encoder, build_classifier, desk_config
from faultformer.optim import LrSchedule, OptimizerState, onecycle_lr
from faultformer.tensor import Tensor
from faultformer.tokenize import Tokenizer
from faultformer.training import (
    KEEP,
    RANDOM,
    UNMASKED,
    ZERO,
    CheckpointFormatError,
    DataError,
    MaskConfig,
    TrainingAbort,
    TransferError,
    apply_mask,
    classifier_from_checkpoint,
    encoder_descriptor,
    evaluate,
    finetune_epoch,
    fit,
    load_checkpoint,
    predict_logits,
    pretrain_step,
    reconstruction_loss,
    restore_rng,
    resume_fit,
    save_checkpoint,
    transfer_for_finetune,
)


def small_classifier(rng, n_classes=4, kind="fourier", dropout=0.0):
    return build_classifier("transformer", Tokenizer(kind), n_classes, rng,
                            desk_config(dropout=dropout, n_layers=1))


def toy_sets(n_classes=4, per_class=10, length=256, seed=0):
    ds = synth_generate(n_classes, per_class, length, 0.1, seed)
    idx = np.arange(len(ds))
    return ds.subset(idx[idx % 2 == 0]), ds.subset(idx[idx % 2 == 1])


# masking


def test_mask_statistics():
    rng = np.random.default_rng(0)
    tokens = rng.standard_normal((1000, 100, 3))
    _, plan = apply_mask(tokens, rng)
    n = plan.masked.size
    frac = plan.masked.mean()
    assert abs(frac - 0.5) <= 3 * math.sqrt(0.25 / n)
    acts = plan.action[plan.masked]
    m = acts.size
    for code, p in [(ZERO, 0.7), (RANDOM, 0.2), (KEEP, 0.1)]:
        assert abs(np.mean(acts == code) - p) <= 3 * math.sqrt(p * (1 - p) / m)


def test_mask_actions(rng):
    tokens = rng.standard_normal((8, 50, 4))
    out, plan = apply_mask(tokens, rng)
    assert not out[plan.action == ZERO].any()
    np.testing.assert_array_equal(out[plan.action == KEEP], tokens[plan.action == KEEP])
    np.testing.assert_array_equal(out[plan.action == UNMASKED], tokens[plan.action == UNMASKED])
    for b in range(8):
        r = out[b][plan.action[b] == RANDOM]
        assert np.all((r >= tokens[b].min()) & (r <= tokens[b].max()))


def test_mask_p_zero(rng):
    tokens = rng.standard_normal((40, 3))
    out, plan = apply_mask(tokens, rng, mask_p=0.0)
    np.testing.assert_array_equal(out, tokens)
    assert plan.n_masked == 0


def test_loss_ignores_unmasked_positions(rng):
    target = rng.standard_normal((2, 10, 3))
    _, plan = apply_mask(target, rng)
    recon = Tensor(rng.standard_normal(target.shape), requires_grad=True)
    reconstruction_loss(recon, target, plan).backward()
    assert not recon.grad[~plan.masked].any()
    assert recon.grad[plan.masked].any()


def test_pretrain_step_without_masked_tokens_is_a_no_op(rng):
    enc = Encoder(desk_config(input_dim=3, n_classes=4), rng)
    before = {k: v.copy() for k, v in enc.state_dict().items()}
    opt = OptimizerState()
    loss = pretrain_step(rng.standard_normal((2, 40, 3)), enc, opt, LrSchedule(), rng, MaskConfig(mask_p=0.0))
    assert loss == 0.0 and opt.step == 0
    for k, v in enc.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_pretrain_loss_trend():
    rng = np.random.default_rng(0)
    x = synth_generate(4, 8, 256, 0.1, 0).values
    tok = Tokenizer("fourier")
    enc = Encoder(desk_config(input_dim=3, n_classes=4, n_layers=1), rng)
    opt, sched = OptimizerState(), LrSchedule.fitted(200, 20)
    losses = [pretrain_step(tok.tokens(x[rng.choice(len(x), 8)]), enc, opt, sched, rng) for _ in range(200)]
    ema, trace = losses[0], []
    for v in losses:
        ema = 0.9 * ema + 0.1 * v
        trace.append(ema)
    quarters = [np.mean(trace[i:i + 50]) for i in range(0, 200, 50)]
    assert all(a >= b for a, b in zip(quarters, quarters[1:])), quarters
    assert quarters[-1] < 0.5 * quarters[0]


def test_nan_parameter_aborts(rng):
    enc = Encoder(desk_config(input_dim=3, n_classes=4), rng)
    enc.embedder.weight.data[0, 0] = np.nan
    with pytest.raises(TrainingAbort) as err:
        pretrain_step(rng.standard_normal((1, 40, 3)), enc, OptimizerState(), LrSchedule(), rng)
    assert err.value.op == "softmax" and err.value.step == 0


# supervised training and evaluation


def test_capacity_reaches_full_train_accuracy():
    # class bins spread over the band so the frequency channel separates them
    rng = np.random.default_rng(0)
    train = synth_generate(4, 20, 256, 0.1, 0, base_bin=12, bin_step=38)
    model = small_classifier(rng)
    opt, sched = OptimizerState(), LrSchedule.fitted(50 * 10, 20, max_lr=3e-3)
    for epoch in range(1, 51):
        finetune_epoch(train, model, opt, sched, AugmentConfig(), rng, batch_size=8, epoch=epoch)
        if evaluate(train, model).test_accuracy == 1.0:
            break
    assert evaluate(train, model).test_accuracy == 1.0, epoch


def test_lr_trace_matches_schedule(rng):
    train, test = toy_sets()
    model = small_classifier(rng)
    opt, sched = OptimizerState(), LrSchedule.fitted(30, 5)
    trace = []
    for e in range(3):
        trace += finetune_epoch(train, model, opt, sched, AugmentConfig(), rng).lr_trace
    assert trace == [onecycle_lr(k, sched) for k in range(len(trace))]


def test_label_out_of_range(rng):
    train = Dataset(np.zeros((2, 256)), [0, 5], n_classes=6)
    with pytest.raises(DataError):
        finetune_epoch(train, small_classifier(rng), OptimizerState(), LrSchedule(), AugmentConfig(), rng)


class FixedLogits:
    """Stand-in model returning preset logits row by row."""

    def __init__(self, logits):
        self.rows = np.asarray(logits, dtype=np.float64)
        self.pos = 0

    def logits(self, signals, rng=None, training=False):
        out = self.rows[self.pos:self.pos + len(signals)]
        self.pos += len(signals)
        return Tensor(out)


def test_evaluate_identities(rng):
    labels = rng.integers(0, 5, size=600)
    ds = Dataset(np.zeros((600, 4)), labels, n_classes=5)
    m = evaluate(ds, FixedLogits(rng.standard_normal((600, 5))))
    assert abs(m.test_accuracy - 0.2) <= 3 * math.sqrt(0.2 * 0.8 / 600)
    np.testing.assert_array_equal(m.confusion.sum(axis=1), np.bincount(labels, minlength=5))
    assert m.test_accuracy == np.trace(m.confusion) / m.confusion.sum()
    const = np.zeros((600, 5))
    const[:, 2] = 1.0
    assert evaluate(ds, FixedLogits(const)).test_accuracy == np.mean(labels == 2)
    assert evaluate(ds, FixedLogits(np.eye(5)[labels])).test_accuracy == 1.0
    with pytest.raises(DataError):
        evaluate(ds.subset([0], drop_labels=True), FixedLogits(const))


def test_evaluate_ignores_dropout(rng):
    _, test = toy_sets()
    model = small_classifier(rng, dropout=0.5)
    np.testing.assert_array_equal(predict_logits(test.values, model), predict_logits(test.values, model))


# checkpoints


def test_checkpoint_roundtrip(tmp_path, rng):
    train, test = toy_sets()
    for kind, tok in [("transformer", "fourier"), ("cnn", "constant"), ("mlp", "cnn")]:
        model = build_classifier(kind, Tokenizer(tok, rng=rng), 4, rng, desk_config(n_layers=1))
        path = tmp_path / f"{kind}.ffck"
        fit(model, train, None, epochs=1, rng=rng, opt=OptimizerState(), sched=LrSchedule.fitted(3, 1),
            checkpoint_path=path)
        back = classifier_from_checkpoint(load_checkpoint(path))
        a, b = predict_logits(test.values, model), predict_logits(test.values, back)
        assert np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-3)) <= 1e-6, kind


def test_checkpoint_rng_state(tmp_path, rng):
    enc = Encoder(desk_config(input_dim=3, n_classes=4), rng)
    path = tmp_path / "e.ffck"
    gen = np.random.default_rng(42)
    gen.random(3)
    save_checkpoint(path, encoder_descriptor(enc, Tokenizer("fourier")), enc.named_parameters(), gen)
    restored = restore_rng(load_checkpoint(path))
    assert restored.random() == gen.random()


def test_corrupt_checkpoints(tmp_path, rng):
    enc = Encoder(desk_config(input_dim=3, n_classes=4), rng)
    path = tmp_path / "e.ffck"
    save_checkpoint(path, encoder_descriptor(enc, Tokenizer("fourier")), enc.named_parameters(), rng)
    raw = path.read_bytes()
    cases = {"magic": b"XXXXX" + raw[5:], "version": raw[:5] + bytes([9]) + raw[6:], "truncated": raw[:-100]}
    for name, blob in cases.items():
        bad = tmp_path / f"{name}.ffck"
        bad.write_bytes(blob)
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(bad)


def test_resume_replays_uninterrupted_run(tmp_path):
    train, test = toy_sets()
    aug = AugmentConfig(probability=0.9)

    class Crash(Exception):
        pass

    def crash_at_three(m):
        if m.epoch == 3:
            raise Crash

    def run(path, on_epoch=None):
        rng = np.random.default_rng(3)
        model = small_classifier(rng, dropout=0.1)
        return fit(model, train, test, epochs=4, rng=rng, opt=OptimizerState(), sched=LrSchedule.fitted(12, 3),
                   augment_cfg=aug, checkpoint_path=path, checkpoint_every=2, on_epoch=on_epoch)

    full = run(tmp_path / "full.ffck")
    with pytest.raises(Crash):
        run(tmp_path / "crashed.ffck", crash_at_three)
    _, resumed = resume_fit(tmp_path / "crashed.ffck", train, test)
    assert [m.epoch for m in resumed] == [3, 4]
    for a, b in zip(full[2:], resumed):
        assert (a.train_loss, a.test_accuracy, a.lr) == (b.train_loss, b.test_accuracy, b.lr)
        np.testing.assert_array_equal(a.confusion, b.confusion)
    assert (tmp_path / "full.ffck").read_bytes() == (tmp_path / "crashed.ffck").read_bytes()


# transfer


def _pretrained(tmp_path, rng, tokenizer="fourier"):
    tok = Tokenizer(tokenizer)
    enc = Encoder(desk_config(input_dim=tok.token_dim, n_classes=4), rng)
    path = tmp_path / "pre.ffck"
    save_checkpoint(path, encoder_descriptor(enc, tok), enc.named_parameters(), rng)
    return load_checkpoint(path)


def test_transfer_copies_body(tmp_path, rng):
    ckpt = _pretrained(tmp_path, rng)
    a = transfer_for_finetune(ckpt, 3, np.random.default_rng(1))
    b = transfer_for_finetune(ckpt, 3, np.random.default_rng(2))
    for name, value in a.net.body_parameters().items():
        np.testing.assert_array_equal(value.data, ckpt.params[name])
    assert a.net.recon_head is None and a.n_classes == 3
    assert not np.array_equal(a.net.cls_head.weight.data, b.net.cls_head.weight.data)
    # identical sequence embeddings apart from the head
    x = Tensor(rng.standard_normal((2, 40, 3)))
    np.testing.assert_array_equal(a.net.hidden(x, with_class_token=False).data,
                                  b.net.hidden(x, with_class_token=False).data)


def test_transfer_mismatch(tmp_path, rng):
    ckpt = _pretrained(tmp_path, rng, "constant")
    with pytest.raises(TransferError, match="input_dim"):
        transfer_for_finetune(ckpt, 4, rng, {"tokenizer": "fourier", "input_dim": 3})
