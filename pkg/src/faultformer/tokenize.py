"""Turn raw windows into token sequences.

Three strategies:

* constant: reshape ``L`` points into ``L/d`` tokens of width ``d``;
* cnn: two strided convolutions (trainable) giving ``floor(L/4)`` tokens of width 8;
* fourier: the 40 largest non-redundant FFT bins as (real, imag, frequency) triples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .fft import fft
from .nn import Conv1d, Module
from .tensor import Tensor

TOKENIZERS = ("constant", "cnn", "fourier")


@dataclass
class TokenSequence:
    tokens: np.ndarray
    tokenizer_id: str
    source_length: int

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[-2]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[-1]


def tokenize_constant(x, d: int) -> TokenSequence:
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if d < 1 or n % d:
        raise ValueError(f"token width {d} does not divide signal length {n}")
    return TokenSequence(x.reshape(x.shape[:-1] + (n // d, d)), "constant", n)


def tokenize_fourier(x, n_modes: int = 40, normalize_frequency: bool = True) -> TokenSequence:
    """Rank bins 0..L/2 by |X[k]|/L, keep the top ``n_modes`` (ties to the lower
    bin) and emit (Re, Im, k) per mode in descending-magnitude order. With
    ``normalize_frequency`` the bin index is divided by L/2.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    n_bins = n // 2 + 1
    if n_bins < n_modes:
        raise ValueError(f"signal of length {n} has {n_bins} non-redundant bins, need {n_modes}")
    spec = fft(x)[..., :n_bins] / n
    mag = np.abs(spec)
    # magnitudes equal to 12 significant digits of the row peak count as ties,
    # so FFT rounding cannot reorder them; the stable sort then keeps lower bins first
    peak = mag.max(axis=-1, keepdims=True)
    key = np.round(mag / np.where(peak > 0, peak, 1.0) * 1e12)
    order = np.argsort(-key, axis=-1, kind="stable")[..., :n_modes]
    picked = np.take_along_axis(spec, order, axis=-1)
    freq = order.astype(np.float64)
    if normalize_frequency:
        freq = freq / (n / 2)
    tokens = np.stack([picked.real, picked.imag, freq], axis=-1)
    return TokenSequence(tokens, "fourier", n)


class CnnTokenizer(Module):
    """conv(k=4, s=2, 1->4) -> GELU -> conv(k=4, s=2, 4->8), left-padded by 2
    before each conv so the lengths are exactly floor(L/2) then floor(L/4).
    """

    min_length = 16

    def __init__(self, rng: np.random.Generator):
        self.conv1 = Conv1d(1, 4, 4, 2, rng, pad_left=2, pad_right=0)
        self.conv2 = Conv1d(4, 8, 4, 2, rng, pad_left=2, pad_right=0)

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        single = x.ndim == 1
        if single:
            x = T.reshape(x, (1, x.shape[0]))
        if x.shape[-1] < self.min_length:
            raise ValueError(f"CNN tokenizer needs at least {self.min_length} points, got {x.shape[-1]}")
        h = T.reshape(x, (x.shape[0], 1, x.shape[1]))
        h = self.conv2(T.gelu(self.conv1(h)))
        out = T.swapaxes(h, 1, 2)
        return T.reshape(out, out.shape[1:]) if single else out


def tokenize_cnn(x, params: CnnTokenizer) -> TokenSequence:
    out = params(x)
    return TokenSequence(out.data, "cnn", np.shape(x)[-1])


class Tokenizer:
    """Uniform wrapper: ``tokenizer(batch) -> Tensor (B, n_tokens, token_dim)``.

    Only the CNN variant carries parameters; they are exposed as ``module``.
    """

    def __init__(self, kind: str = "fourier", *, d: int = 8, n_modes: int = 40,
                 normalize_frequency: bool = True, rng: np.random.Generator | None = None):
        if kind not in TOKENIZERS:
            raise ValueError(f"unknown tokenizer {kind!r}; expected one of {TOKENIZERS}")
        self.kind = kind
        self.d = d
        self.n_modes = n_modes
        self.normalize_frequency = normalize_frequency
        self.module = CnnTokenizer(rng or np.random.default_rng(0)) if kind == "cnn" else None

    @property
    def token_dim(self) -> int:
        return {"constant": self.d, "cnn": 8, "fourier": 3}[self.kind]

    @property
    def trainable(self) -> bool:
        return self.module is not None

    def n_tokens(self, length: int) -> int:
        return {"constant": length // self.d, "cnn": length // 4, "fourier": self.n_modes}[self.kind]

    def descriptor(self) -> dict:
        return {"kind": self.kind, "d": self.d, "n_modes": self.n_modes,
                "normalize_frequency": self.normalize_frequency}

    def tokens(self, batch) -> np.ndarray:
        """Token array for the non-trainable tokenizers."""
        if self.kind == "constant":
            return tokenize_constant(batch, self.d).tokens
        if self.kind == "fourier":
            return tokenize_fourier(batch, self.n_modes, self.normalize_frequency).tokens
        raise ValueError("the CNN tokenizer is part of the model graph; call the tokenizer instead")

    def __call__(self, batch) -> Tensor:
        if self.module is not None:
            return self.module(batch)
        return Tensor(self.tokens(batch))
