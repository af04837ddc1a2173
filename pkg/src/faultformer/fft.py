"""Discrete Fourier transform along the last axis.

Power-of-two lengths use an iterative radix-2 decimation-in-time transform
over bit-reversed input. Every other length (the native 1600-point window is
2**6 * 25) goes through Bluestein's chirp-z identity, which turns the DFT into
a circular convolution of power-of-two length.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@lru_cache(maxsize=32)
def _bit_reverse_perm(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=32)
def _twiddles(n: int) -> tuple[np.ndarray, ...]:
    out = []
    half = 1
    while half < n:
        out.append(np.exp(-1j * np.pi * np.arange(half) / half))
        half *= 2
    return tuple(out)


def _radix2(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    a = x[..., _bit_reverse_perm(n)].astype(np.complex128)
    lead = a.shape[:-1]
    half = 1
    for w in _twiddles(n):
        blocks = a.reshape(lead + (n // (2 * half), 2, half))
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * w
        a = np.stack((even + odd, even - odd), axis=-2).reshape(lead + (n,))
        half *= 2
    return a


@lru_cache(maxsize=32)
def _bluestein_plan(n: int) -> tuple[np.ndarray, np.ndarray, int]:
    m = 1 << (2 * n - 1).bit_length()
    k = np.arange(n)
    # k*k mod 2n keeps the chirp phase exact for large n
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:])[::-1]
    return chirp, _radix2(b), m


def _bluestein(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    chirp, b_hat, m = _bluestein_plan(n)
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * chirp
    conv = _inverse_pow2(_radix2(a) * b_hat)
    return conv[..., :n] * chirp


def _inverse_pow2(x: np.ndarray) -> np.ndarray:
    return np.conj(_radix2(np.conj(x))) / x.shape[-1]


def fft(x) -> np.ndarray:
    """X[k] = sum_t x[t] exp(-2 pi i k t / n), computed along the last axis."""
    x = np.asarray(x)
    n = x.shape[-1] if x.ndim else 0
    if n == 0:
        raise ValueError("fft of an empty signal")
    if n == 1:
        return x.astype(np.complex128)
    return _radix2(x) if _is_pow2(n) else _bluestein(x)


def ifft(x) -> np.ndarray:
    x = np.asarray(x)
    return np.conj(fft(np.conj(x))) / x.shape[-1]

