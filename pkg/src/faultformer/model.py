"""Transformer encoder with rotary positions, plus the CNN and MLP baselines."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .nn import Conv1d, LayerNorm, Linear, Module
from .tensor import Tensor
from .tokenize import Tokenizer


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    input_dim: int = 3
    n_classes: int = 10
    model_dim: int = 256
    n_heads: int = 32
    n_layers: int = 4
    dropout: float = 0.3
    ff_hidden_dim: int | None = None
    ff_variant: str = "plain"
    embedder: str = "linear"
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.ff_hidden_dim is None:
            self.ff_hidden_dim = 4 * self.model_dim
        if self.model_dim % self.n_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"rotary embedding needs an even head_dim, got {self.head_dim}")
        if self.ff_variant not in ("plain", "glu"):
            raise ConfigError(f"ff_variant must be 'plain' or 'glu', got {self.ff_variant!r}")
        if self.embedder not in ("linear", "mlp"):
            raise ConfigError(f"embedder must be 'linear' or 'mlp', got {self.embedder!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder fields {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> EncoderConfig:
    """Scaled-down encoder used for desk-scale runs."""
    base = dict(model_dim=64, n_heads=4, n_layers=2, dropout=0.1)
    base.update(overrides)
    return EncoderConfig(**base)


class MultiHeadAttention(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.model_dim
        self.wq = Linear(d, d, rng, bias=False)
        self.wk = Linear(d, d, rng, bias=False)
        self.wv = Linear(d, d, rng, bias=False)
        self.wo = Linear(d, d, rng)
        self.n_heads = cfg.n_heads
        self.dropout = cfg.dropout
        self.last_attention: np.ndarray | None = None

    def _heads(self, x: Tensor, batch: int, n: int) -> Tensor:
        return T.swapaxes(T.reshape(x, (batch, n, self.n_heads, -1)), 1, 2)

    def __call__(self, x: Tensor, rng=None, training: bool = False, positions=None) -> Tensor:
        batch, n, d = x.shape
        hd = d // self.n_heads
        positions = np.arange(n) if positions is None else positions
        q = T.rope(self._heads(self.wq(x), batch, n), positions)
        k = T.rope(self._heads(self.wk(x), batch, n), positions)
        v = self._heads(self.wv(x), batch, n)
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(hd))
        probs = T.softmax(scores, axis=-1)
        self.last_attention = probs.data
        probs = T.dropout(probs, self.dropout, rng, training)
        out = T.reshape(T.swapaxes(T.matmul(probs, v), 1, 2), (batch, n, d))
        return self.wo(out)


class FeedForward(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d, h = cfg.model_dim, cfg.ff_hidden_dim
        self.glu = cfg.ff_variant == "glu"
        self.w1 = Linear(d, h, rng, bias=not self.glu)
        self.w3 = Linear(d, h, rng, bias=False) if self.glu else None
        self.w2 = Linear(h, d, rng, bias=not self.glu)
        self.dropout = cfg.dropout

    def __call__(self, x: Tensor, rng=None, training: bool = False) -> Tensor:
        h = T.gelu(self.w1(x))
        if self.glu:
            h = h * self.w3(x)
        return self.w2(T.dropout(h, self.dropout, rng, training))


class EncoderLayer(Module):
    """Post-norm block: LN(attn(X) + X), then LN(FF(X_a) + X_a)."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.attn = MultiHeadAttention(cfg, rng)
        self.norm1 = LayerNorm(cfg.model_dim, cfg.layer_norm_eps)
        self.ff = FeedForward(cfg, rng)
        self.norm2 = LayerNorm(cfg.model_dim, cfg.layer_norm_eps)
        self.residual = True  # test hook

    def __call__(self, x: Tensor, rng=None, training: bool = False) -> Tensor:
        a = self.attn(x, rng, training)
        xa = self.norm1(a + x if self.residual else a)
        f = self.ff(xa, rng, training)
        return self.norm2(f + xa if self.residual else f)


class MlpHead(Module):
    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator):
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Encoder(Module):
    """Token embedder, optional class token, stacked layers and both heads."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.model_dim
        if cfg.embedder == "linear":
            self.embedder = Linear(cfg.input_dim, d, rng)
        else:
            self.embedder = MlpHead(cfg.input_dim, d, d, rng)
        self.class_token = Tensor(rng.normal(0.0, 0.02, size=d), requires_grad=True)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.cls_head = Linear(d, cfg.n_classes, rng)
        self.recon_head: MlpHead | None = MlpHead(d, d, cfg.input_dim, rng)

    def reset_head(self, rng: np.random.Generator, n_classes: int | None = None) -> None:
        """Fresh class token and classification head."""
        if n_classes is not None:
            self.cfg.n_classes = n_classes
        self.class_token = Tensor(rng.normal(0.0, 0.02, size=self.cfg.model_dim), requires_grad=True)
        self.cls_head = Linear(self.cfg.model_dim, self.cfg.n_classes, rng)

    def body_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items()
                if k.startswith(("embedder.", "layers."))}

    def mode_parameters(self, mode: str) -> dict[str, Tensor]:
        """Parameters that receive gradient in ``mode``."""
        params = self.named_parameters()
        skip = ("recon_head.",) if mode == "classify" else ("cls_head.", "class_token")
        return {k: v for k, v in params.items() if not k.startswith(skip)}

    def hidden(self, tokens: Tensor, rng=None, training: bool = False, with_class_token: bool = True) -> Tensor:
        if tokens.ndim == 2:
            tokens = T.reshape(tokens, (1,) + tokens.shape)
        batch, n, dim = tokens.shape
        if n == 0:
            raise ValueError("cannot encode an empty token sequence")
        if dim != self.cfg.input_dim:
            raise ConfigError(f"token width {dim} does not match encoder input_dim {self.cfg.input_dim}")
        h = self.embedder(tokens)
        if with_class_token:
            cls = T.broadcast_to(T.reshape(self.class_token, (1, 1, -1)), (batch, 1, self.cfg.model_dim))
            h = T.concat([cls, h], axis=1)
        for layer in self.layers:
            h = layer(h, rng, training)
        return h

    def encode(self, tokens, mode: str = "classify", rng=None, training: bool = False) -> Tensor:
        """classify -> logits (B, n_classes); reconstruct -> (B, n_tokens, input_dim).

        A 2-D ``tokens`` input is treated as a single sample and the batch axis
        is dropped from the result.
        """
        tokens = T.as_tensor(tokens)
        single = tokens.ndim == 2
        if mode == "classify":
            h = self.hidden(tokens, rng, training, with_class_token=True)
            out = self.cls_head(h[:, 0, :])
        elif mode == "reconstruct":
            if self.recon_head is None:
                raise ConfigError("this encoder has no reconstruction head")
            out = self.recon_head(self.hidden(tokens, rng, training, with_class_token=False))
        else:
            raise ValueError(f"mode must be 'classify' or 'reconstruct', got {mode!r}")
        return T.reshape(out, out.shape[1:]) if single else out

    def attention_scores(self, tokens, layer: int, include_class_position: bool = True) -> np.ndarray:
        """Class-token attention row per head at ``layer``: (n_heads, n_tokens + 1),
        or (n_heads, n_tokens) with ``include_class_position=False``. Batched
        input gives a leading batch axis.
        """
        if not 0 <= layer < len(self.layers):
            raise ValueError(f"layer {layer} out of range [0, {len(self.layers)})")
        tokens = T.as_tensor(tokens)
        with T.no_grad():
            self.encode(tokens, "classify", training=False)
        rows = self.layers[layer].attn.last_attention[:, :, 0, :]
        if not include_class_position:
            rows = rows[:, :, 1:]
        return rows[0] if tokens.ndim == 2 else rows


def count_parameters_by_block(encoder: Encoder) -> dict[str, int]:
    counts: dict[str, int] = {}
    for name, p in encoder.named_parameters().items():
        block = ".".join(name.split(".")[:2]) if name.startswith("layers.") else name.split(".")[0]
        counts[block] = counts.get(block, 0) + p.size
    return counts


# baselines


def _channels_first(tokens: Tensor) -> Tensor:
    return T.swapaxes(tokens, -1, -2)


class CnnBaseline(Module):
    """Five 1-D convs then pool to 8 positions and a three-layer head."""

    def __init__(self, rng: np.random.Generator, in_channels: int = 8, n_classes: int = 10,
                 dropout: float = 0.3, channels=(32, 256, 512, 256, 256), hidden=(512, 526)):
        specs = [(10, 2), (5, 1), (3, 1), (3, 1), (3, 2)]
        self.in_channels = in_channels
        self.convs = []
        c_prev = in_channels
        for c, (k, s) in zip(channels, specs):
            self.convs.append(Conv1d(c_prev, c, k, s, rng))
            c_prev = c
        self.pool_size = 8
        self.fc1 = Linear(c_prev * self.pool_size, hidden[0], rng)
        self.fc2 = Linear(hidden[0], hidden[1], rng)
        self.fc3 = Linear(hidden[1], n_classes, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng=None, training: bool = False) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"CNN baseline expects {self.in_channels} input channels, got {x.shape[1]}")
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = T.gelu(h)
        h = T.adaptive_avg_pool1d(h, self.pool_size)
        h = T.reshape(h, (h.shape[0], -1))
        h = T.dropout(h, self.dropout, rng, training)
        h = T.dropout(T.gelu(self.fc1(h)), self.dropout, rng, training)
        h = T.gelu(self.fc2(h))
        return self.fc3(h)


class MlpBaseline(Module):
    """Pool time to 256 positions, flatten with channels, then five linear layers."""

    def __init__(self, rng: np.random.Generator, in_channels: int = 8, n_classes: int = 10,
                 dropout: float = 0.3, pool_size: int = 256, hidden=(1024, 1024, 512, 256)):
        self.in_channels = in_channels
        self.pool_size = pool_size
        dims = [in_channels * pool_size, *hidden, n_classes]
        self.fcs = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.dropout = dropout

    def __call__(self, x: Tensor, rng=None, training: bool = False) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"MLP baseline expects {self.in_channels} input channels, got {x.shape[1]}")
        h = T.adaptive_avg_pool1d(x, self.pool_size)
        h = T.reshape(T.swapaxes(h, 1, 2), (h.shape[0], -1))
        h = T.dropout(h, self.dropout, rng, training)
        for i, fc in enumerate(self.fcs[:-1]):
            h = T.gelu(fc(h))
            if i == 0:
                h = T.dropout(h, self.dropout, rng, training)
        return self.fcs[-1](h)


def cnn_baseline(x_tokens: Tensor, params: CnnBaseline) -> Tensor:
    return params(x_tokens)


def mlp_baseline(x_tokens: Tensor, params: MlpBaseline) -> Tensor:
    return params(x_tokens)


MODELS = ("transformer", "transformer_pretrained", "cnn", "mlp")


class Classifier(Module):
    """Signals in, logits out: tokenizer followed by an encoder or a baseline net."""

    def __init__(self, kind: str, tokenizer: Tokenizer, net: Module):
        self.kind = kind
        self.tokenizer = tokenizer
        if tokenizer.module is not None:
            self.tokenizer_module = tokenizer.module
        self.net = net

    @property
    def is_transformer(self) -> bool:
        return isinstance(self.net, Encoder)

    @property
    def n_classes(self) -> int:
        if self.is_transformer:
            return self.net.cfg.n_classes
        last = self.net.fc3 if isinstance(self.net, CnnBaseline) else self.net.fcs[-1]
        return last.weight.shape[1]

    def tokens(self, signals) -> Tensor:
        return self.tokenizer(np.asarray(signals, dtype=np.float64))

    def logits(self, signals, rng=None, training: bool = False) -> Tensor:
        tok = self.tokens(signals)
        if self.is_transformer:
            return self.net.encode(tok, "classify", rng, training)
        return self.net(_channels_first(tok), rng, training)

    def trainable(self) -> dict[str, Tensor]:
        params = self.named_parameters()
        if self.is_transformer:
            return {k: v for k, v in params.items() if not k.startswith("net.recon_head.")}
        return params

    def drop_reconstruction_head(self) -> None:
        if self.is_transformer:
            self.net.recon_head = None


def build_classifier(kind: str, tokenizer: Tokenizer, n_classes: int, rng: np.random.Generator,
                     encoder_cfg: EncoderConfig | None = None, dropout: float = 0.3,
                     baseline_overrides: dict | None = None) -> Classifier:
    if kind in ("transformer", "transformer_pretrained"):
        cfg = encoder_cfg or EncoderConfig()
        cfg.input_dim = tokenizer.token_dim
        cfg.n_classes = n_classes
        return Classifier(kind, tokenizer, Encoder(cfg, rng))
    extra = baseline_overrides or {}
    if kind == "cnn":
        return Classifier(kind, tokenizer, CnnBaseline(rng, tokenizer.token_dim, n_classes, dropout, **extra))
    if kind == "mlp":
        return Classifier(kind, tokenizer, MlpBaseline(rng, tokenizer.token_dim, n_classes, dropout, **extra))
    raise ConfigError(f"unknown model {kind!r}; expected one of {MODELS}")
