"""Parameter containers built on :mod:`faultformer.tensor`."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds parameters (``Tensor`` attributes with ``requires_grad``) and child modules.

    Names follow attribute paths, e.g. ``layers.0.attn.wq.weight``; ordering is
    attribute-definition order so it is stable across runs.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, value in state.items():
            if name not in params:
                continue
            if params[name].shape != tuple(np.shape(value)):
                raise ValueError(f"{name}: shape {np.shape(value)} != {params[name].shape}")
            params[name].data = np.array(value, dtype=T.DTYPE, copy=True)


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    """y = x W + b with W stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = xavier_uniform(rng, (n_in, n_out), n_in, n_out)
        self.bias = zeros((n_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = zeros((dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv1d(Module):
    """Zero-padded 1-D convolution; padding defaults to ``kernel - stride`` split
    left-heavy, so the output length is ``floor(L / stride)``.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng: np.random.Generator,
                 pad_left: int | None = None, pad_right: int | None = None):
        self.weight = xavier_uniform(rng, (c_out, c_in, kernel), c_in * kernel, c_out * kernel)
        self.bias = zeros((c_out,))
        self.stride = stride
        total = max(kernel - stride, 0)
        self.pad_left = total - total // 2 if pad_left is None else pad_left
        self.pad_right = (total - self.pad_left if pad_right is None else pad_right)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, self.stride, self.pad_left, self.pad_right)
