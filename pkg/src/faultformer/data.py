"""Signal windows, datasets, experiment splits and the SIGB1 bundle format."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CWRU_RATE_HZ = 48_000.0
PADERBORN_RATE_HZ = 64_000.0

BUNDLE_MAGIC = b"SIGB1"


class IngestionError(ValueError):
    pass


class SplitError(ValueError):
    pass


class BundleFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class SignalSample:
    values: np.ndarray
    label: int | None = None
    sample_rate_hz: float = CWRU_RATE_HZ


class Dataset:
    """Immutable collection of equal-length windows.

    Values live in one ``(n_samples, window_length)`` float64 array; labels
    in an int64 array, or ``None`` for unlabeled data.
    """

    def __init__(self, values, labels=None, *, n_classes: int, sample_rate_hz: float = CWRU_RATE_HZ,
                 name: str = "dataset"):
        values = np.array(values, dtype=np.float64, copy=True)
        if values.ndim != 2 or values.shape[0] == 0:
            raise IngestionError(f"dataset values must be a non-empty 2-D array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise IngestionError("dataset contains non-finite values")
        if n_classes < 1:
            raise IngestionError(f"n_classes must be positive, got {n_classes}")
        if labels is not None:
            labels = np.array(labels, dtype=np.int64, copy=True)
            if labels.shape != (values.shape[0],):
                raise IngestionError(f"{labels.shape[0]} labels for {values.shape[0]} samples")
            if labels.min() < 0 or labels.max() >= n_classes:
                raise IngestionError(f"labels must lie in [0, {n_classes}), got range "
                                     f"[{labels.min()}, {labels.max()}]")
            labels.setflags(write=False)
        values.setflags(write=False)
        self.values = values
        self.labels = labels
        self.n_classes = int(n_classes)
        self.sample_rate_hz = float(sample_rate_hz)
        self.name = name

    @property
    def window_length(self) -> int:
        return self.values.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> SignalSample:
        label = None if self.labels is None else int(self.labels[i])
        return SignalSample(self.values[i], label, self.sample_rate_hz)

    @property
    def samples(self) -> list[SignalSample]:
        return [self[i] for i in range(len(self))]

    @classmethod
    def from_samples(cls, samples: Sequence[SignalSample], n_classes: int, name: str = "dataset") -> "Dataset":
        if not samples:
            raise IngestionError("no samples")
        lengths = {len(s.values) for s in samples}
        if len(lengths) != 1:
            raise IngestionError(f"samples have differing lengths {sorted(lengths)}")
        rates = {s.sample_rate_hz for s in samples}
        if len(rates) != 1:
            raise IngestionError(f"samples have differing sample rates {sorted(rates)}")
        labeled = [s.label is not None for s in samples]
        if any(labeled) and not all(labeled):
            raise IngestionError("mixture of labeled and unlabeled samples")
        labels = [s.label for s in samples] if all(labeled) else None
        return cls(np.stack([s.values for s in samples]), labels, n_classes=n_classes,
                   sample_rate_hz=rates.pop(), name=name)

    def subset(self, indices, *, drop_labels: bool = False, name: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if drop_labels or self.labels is None else self.labels[indices]
        return Dataset(self.values[indices], labels, n_classes=self.n_classes,
                       sample_rate_hz=self.sample_rate_hz, name=name or self.name)

    def zscore(self) -> "Dataset":
        """Copy with every window scaled to zero mean and unit variance."""
        mu = self.values.mean(axis=1, keepdims=True)
        sd = self.values.std(axis=1, keepdims=True)
        sd[sd == 0] = 1.0
        return Dataset((self.values - mu) / sd, self.labels, n_classes=self.n_classes,
                       sample_rate_hz=self.sample_rate_hz, name=self.name)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None
            and np.array_equal(self.labels, other.labels))
        return (same_labels and np.array_equal(self.values, other.values)
                and self.n_classes == other.n_classes and self.name == other.name
                and self.sample_rate_hz == other.sample_rate_hz)

    __hash__ = None


# ingestion


def window_recording(raw, window_length: int, trim: int, *, label: int | None = None,
                     sample_rate_hz: float = CWRU_RATE_HZ) -> list[SignalSample]:
    """Cut ``raw`` into disjoint blocks of ``window_length + 2*trim`` points and
    drop ``trim`` points from each end of every block. A partial trailing block
    is discarded.
    """
    raw = np.asarray(raw, dtype=np.float64)
    block = window_length + 2 * trim
    if window_length < 1 or trim < 0:
        raise IngestionError(f"bad window_length={window_length} / trim={trim}")
    if raw.ndim != 1 or raw.shape[0] < block:
        raise IngestionError(f"recording of {raw.shape[0] if raw.ndim else 0} points is shorter "
                             f"than one block of {block}")
    n = raw.shape[0] // block
    blocks = raw[: n * block].reshape(n, block)[:, trim: trim + window_length]
    return [SignalSample(b.copy(), label, sample_rate_hz) for b in blocks]


def split_paderborn(raw, seconds: float = 4.0, rate_hz: float = PADERBORN_RATE_HZ, n_splits: int = 100,
                    *, label: int | None = None) -> list[SignalSample]:
    """Split the first ``seconds * rate_hz`` points into ``n_splits`` equal windows."""
    raw = np.asarray(raw, dtype=np.float64)
    total = int(round(seconds * rate_hz))
    if raw.ndim != 1 or raw.shape[0] < total:
        raise IngestionError(f"signal of {raw.shape[0] if raw.ndim else 0} points is shorter than "
                             f"{seconds} s at {rate_hz} Hz ({total} points)")
    if total % n_splits:
        raise IngestionError(f"{total} points do not divide into {n_splits} equal windows")
    width = total // n_splits
    return [SignalSample(w.copy(), label, rate_hz) for w in raw[:total].reshape(n_splits, width)]


def read_csv(path, *, n_classes: int, labeled: bool = True, sample_rate_hz: float = CWRU_RATE_HZ,
             name: str | None = None) -> Dataset:
    """One sample per row; when ``labeled`` the last column is the integer class."""
    rows = []
    labels = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if labeled:
                    labels.append(int(float(row[-1])))
                    row = row[:-1]
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise IngestionError(f"{path}: no rows")
    if len({len(r) for r in rows}) != 1:
        raise IngestionError(f"{path}: rows have differing lengths")
    return Dataset(np.array(rows), labels if labeled else None, n_classes=n_classes,
                   sample_rate_hz=sample_rate_hz, name=name or Path(path).stem)


# SIGB1 bundles


def save_bundle(dataset: Dataset, path) -> None:
    if len(dataset) == 0:
        raise IngestionError("refusing to write an empty dataset")
    header = json.dumps({
        "name": dataset.name,
        "n_samples": len(dataset),
        "window_length": dataset.window_length,
        "sample_rate_hz": dataset.sample_rate_hz,
        "n_classes": dataset.n_classes,
        "has_labels": dataset.has_labels,
    }, sort_keys=True).encode("utf-8")
    if dataset.has_labels and dataset.n_classes > 256:
        raise IngestionError("SIGB1 stores labels as unsigned bytes; n_classes must be <= 256")
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(dataset.values.astype("<f4").tobytes())
        if dataset.has_labels:
            fh.write(dataset.labels.astype(np.uint8).tobytes())


def read_bundle_header(buf: bytes) -> tuple[dict, int]:
    if len(buf) < len(BUNDLE_MAGIC) or buf[:5] != BUNDLE_MAGIC:
        raise BundleFormatError(f"bad magic {buf[:5]!r}, expected {BUNDLE_MAGIC!r}", 0)
    if len(buf) < 9:
        raise BundleFormatError("truncated header length", len(buf))
    (hlen,) = struct.unpack_from("<I", buf, 5)
    if len(buf) < 9 + hlen:
        raise BundleFormatError(f"header of {hlen} bytes truncated", len(buf))
    try:
        header = json.loads(buf[9: 9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"unreadable header: {exc}", 9) from None
    missing = {"name", "n_samples", "window_length", "sample_rate_hz", "n_classes", "has_labels"} - set(header)
    if missing:
        raise BundleFormatError(f"header missing fields {sorted(missing)}", 9)
    return header, 9 + hlen


def load_bundle(path) -> Dataset:
    buf = Path(path).read_bytes()
    header, offset = read_bundle_header(buf)
    n, width = int(header["n_samples"]), int(header["window_length"])
    if n < 1 or width < 1:
        raise BundleFormatError(f"header declares {n} samples of length {width}", 9)
    n_values = n * width
    end = offset + 4 * n_values
    if len(buf) < end:
        row = (len(buf) - offset) // (4 * width)
        raise BundleFormatError(f"values truncated inside record {row} of {n}", len(buf))
    values = np.frombuffer(buf, dtype="<f4", count=n_values, offset=offset).reshape(n, width)
    labels = None
    if header["has_labels"]:
        if len(buf) < end + n:
            raise BundleFormatError(f"labels truncated: expected {n} bytes", len(buf))
        labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=end).astype(np.int64)
        end += n
    if len(buf) != end:
        raise BundleFormatError(f"{len(buf) - end} trailing bytes after payload", end)
    return Dataset(values.astype(np.float64), labels, n_classes=int(header["n_classes"]),
                   sample_rate_hz=float(header["sample_rate_hz"]), name=header["name"])


# synthetic data


def synth_generate(n_classes: int, per_class: int, length: int, noise_sigma: float, seed: int,
                   *, base_bin: int | None = None, bin_step: int | None = None,
                   harmonic_amp: tuple[float, float] = (0.2, 0.5),
                   sample_rate_hz: float = CWRU_RATE_HZ, name: str = "synthetic") -> Dataset:
    """Class ``c`` is a unit sinusoid at FFT bin ``base_bin + bin_step*c`` with a
    random phase, plus a 2nd or 3rd harmonic of random amplitude and phase, plus
    white Gaussian noise.

    By default the bins scale with the window (25 + 60c at length 1600) so the
    classes spread over the band the Fourier tokenizer's normalized frequency
    channel can resolve. The step shrinks if the top class would reach Nyquist.
    """
    if n_classes < 2:
        raise ValueError(f"need at least two classes, got {n_classes}")
    if base_bin is None:
        base_bin = max(1, length // 64)
    if bin_step is None:
        bin_step = max(1, 3 * length // 80)
        nyquist = length // 2
        if base_bin + bin_step * (n_classes - 1) >= nyquist:
            bin_step = max(1, (nyquist - 1 - base_bin) // (n_classes - 1))
    rng = np.random.default_rng(seed)
    t = np.arange(length) / length
    values = np.empty((n_classes * per_class, length))
    labels = np.repeat(np.arange(n_classes), per_class)
    for i, c in enumerate(labels):
        f = base_bin + bin_step * c
        phase, h_phase = rng.uniform(0.0, 2 * np.pi, size=2)
        order = rng.integers(2, 4)
        amp = rng.uniform(*harmonic_amp)
        values[i] = (np.sin(2 * np.pi * f * t + phase)
                     + amp * np.sin(2 * np.pi * order * f * t + h_phase)
                     + noise_sigma * rng.standard_normal(length))
    return Dataset(values, labels, n_classes=n_classes, sample_rate_hz=sample_rate_hz, name=name)


# experiment splits


@dataclass
class SplitPlan:
    pretrain_indices: list[int]
    train_indices: list[int]
    test_indices: list[int]
    allowed_classes_pretrain: list[int]
    allowed_classes_train: list[int]
    pretrain_source: str = "same"
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "pretrain_indices": self.pretrain_indices,
            "train_indices": self.train_indices,
            "test_indices": self.test_indices,
            "allowed_classes_pretrain": self.allowed_classes_pretrain,
            "allowed_classes_train": self.allowed_classes_train,
            "pretrain_source": self.pretrain_source,
            "meta": self.meta,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        return cls(**json.loads(text))

    def check(self, dataset: Dataset, pretrain_dataset: Dataset | None = None) -> None:
        """Raise SplitError unless disjointness and class restrictions hold."""
        train, test = set(self.train_indices), set(self.test_indices)
        if train & test:
            raise SplitError(f"{len(train & test)} samples in both train and test")
        if self.pretrain_source == "same" and set(self.pretrain_indices) & test:
            raise SplitError("pretraining pool overlaps the test set")
        if dataset.labels is not None:
            bad = set(dataset.labels[self.train_indices + self.test_indices].tolist()) \
                - set(self.allowed_classes_train)
            if bad:
                raise SplitError(f"train/test contain disallowed classes {sorted(bad)}")
        src = dataset if self.pretrain_source == "same" else pretrain_dataset
        if src is not None and src.labels is not None and self.pretrain_indices:
            bad = set(src.labels[self.pretrain_indices].tolist()) - set(self.allowed_classes_pretrain)
            if bad:
                raise SplitError(f"pretraining pool contains disallowed classes {sorted(bad)}")


EXPERIMENTS = ("baseline", "scarcity", "task_adapt", "dataset_adapt")


def _by_class(labels: np.ndarray, classes: Iterable[int], rng: np.random.Generator) -> dict[int, np.ndarray]:
    return {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}


def _take(pools: dict[int, np.ndarray], per_class: dict[int, int], what: str) -> list[int]:
    taken = []
    for c, k in per_class.items():
        if len(pools[c]) < k:
            raise SplitError(f"class {c} has {len(pools[c])} samples left, {what} needs {k}")
        taken.extend(pools[c][:k].tolist())
        pools[c] = pools[c][k:]
    return sorted(taken)


def _even(total: int, classes: Sequence[int]) -> dict[int, int]:
    """Spread ``total`` over ``classes`` as evenly as possible, remainder to the lowest ids."""
    q, r = divmod(total, len(classes))
    return {c: q + (i < r) for i, c in enumerate(classes)}


def make_split(dataset: Dataset, experiment: str, seed: int, *, n_train: int | None = None,
               n_test: int | None = None, n_pretrain: int | None = None,
               train_fraction: float = 0.8, pretrain_classes: Sequence[int] | None = None,
               finetune_classes: Sequence[int] | None = None,
               pretrain_dataset: Dataset | None = None) -> SplitPlan:
    """Build the index lists for one experiment family.

    Defaults reproduce the CWRU/Paderborn counts:
    baseline 2240/560, scarcity 2000 unlabeled + n/100, task adaptation
    1960 unlabeled on classes {0,1,2,4,5,7,8} + 672/168 on {3,6,9}, dataset
    adaptation all of ``pretrain_dataset`` + an 80/20 split of ``dataset``.
    Train and test are stratified by class; pools never overlap.
    """
    if dataset.labels is None:
        raise SplitError("splitting needs a labeled dataset")
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    all_classes = list(range(dataset.n_classes))
    meta = {"experiment": experiment, "seed": seed, "dataset": dataset.name}

    def fraction_split(classes):
        pools = _by_class(labels, classes, rng)
        for c in classes:
            if len(pools[c]) < 2:
                raise SplitError(f"class {c} has {len(pools[c])} samples; need at least 2 to split")
        n_tr = {c: int(math.floor(train_fraction * len(pools[c]) + 1e-9)) for c in classes}
        train = _take(pools, n_tr, "train")
        test = _take(pools, {c: len(pools[c]) for c in classes}, "test")
        return train, test

    if experiment == "baseline":
        if n_train is None and n_test is None:
            train, test = fraction_split(all_classes)
        else:
            pools = _by_class(labels, all_classes, rng)
            test = _take(pools, _even(n_test or 0, all_classes), "test")
            train = _take(pools, _even(n_train or 0, all_classes), "train")
        return SplitPlan([], train, test, [], all_classes, meta=meta)

    if experiment == "scarcity":
        n_train = 100 if n_train is None else n_train
        n_test = 100 if n_test is None else n_test
        n_pretrain = 2000 if n_pretrain is None else n_pretrain
        pools = _by_class(labels, all_classes, rng)
        test = _take(pools, _even(n_test, all_classes), "test")
        train = _take(pools, _even(n_train, all_classes), "train")
        rest = rng.permutation(np.concatenate([pools[c] for c in all_classes]))
        if len(rest) < n_pretrain:
            raise SplitError(f"only {len(rest)} samples remain for a pretraining pool of {n_pretrain}")
        pretrain = sorted(rest[:n_pretrain].tolist())
        meta["n_train"] = n_train
        return SplitPlan(pretrain, train, test, all_classes, all_classes, meta=meta)

    if experiment == "task_adapt":
        finetune = sorted(finetune_classes if finetune_classes is not None else (3, 6, 9))
        pre_cls = sorted(pretrain_classes if pretrain_classes is not None
                         else [c for c in all_classes if c not in finetune])
        if set(pre_cls) & set(finetune):
            raise SplitError(f"pretraining classes {pre_cls} overlap fine-tuning classes {finetune}")
        pre_pool = np.flatnonzero(np.isin(labels, pre_cls))
        if n_pretrain is not None:
            if len(pre_pool) < n_pretrain:
                raise SplitError(f"only {len(pre_pool)} samples in classes {pre_cls}, need {n_pretrain}")
            pre_pool = rng.permutation(pre_pool)[:n_pretrain]
        if n_train is None and n_test is None:
            train, test = fraction_split(finetune)
        else:
            pools = _by_class(labels, finetune, rng)
            test = _take(pools, _even(n_test or 0, finetune), "test")
            train = _take(pools, _even(n_train or 0, finetune), "train")
        return SplitPlan(sorted(pre_pool.tolist()), train, test, pre_cls, finetune, meta=meta)

    if experiment == "dataset_adapt":
        if pretrain_dataset is None:
            raise SplitError("dataset adaptation needs a separate pretraining dataset")
        pretrain = list(range(len(pretrain_dataset)))
        if n_pretrain is not None:
            pretrain = sorted(rng.permutation(len(pretrain_dataset))[:n_pretrain].tolist())
        train, test = fraction_split(all_classes)
        meta["pretrain_dataset"] = pretrain_dataset.name
        return SplitPlan(pretrain, train, test, list(range(pretrain_dataset.n_classes)), all_classes,
                         pretrain_source=pretrain_dataset.name, meta=meta)

    raise SplitError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
