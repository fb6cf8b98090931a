"""Small pre-norm encoder-decoder transformer on top of :mod:`genmc.tensor`.

The token embedding is shared by encoder and decoder and tied with the
decoder's output projection.  Positions use learned embeddings.  All
sequence tensors are ``[batch, length, d_model]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class LengthError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 64
    vocab_size: int = 64
    max_source_len: int = 64
    max_target_len: int = 32
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.max_source_len < 1 or self.max_target_len < 1:
            raise ConfigError("max lengths must be >= 1")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must leave room for PAD, BOS, EOS, UNK")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k in names:
                kwargs[k] = float(v) if k == "dropout_rate" else int(v)
        return cls(**kwargs)


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    training = False
    rng: np.random.Generator | None = None

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for m in val:
                    yield from m.modules()

    def train(self, mode: bool = True, rng: np.random.Generator | None = None):
        for m in self.modules():
            m.training = mode
            m.rng = rng if mode else None
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _normal(rng, shape, std):
    return T.parameter(rng.normal(0.0, std, shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = _normal(rng, (d_in, d_out), 1.0 / math.sqrt(d_in))
        self.bias = T.parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = T.parameter(np.ones(d))
        self.bias = T.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng):
        self.up = Linear(d, d_ff, rng)
        self.down = Linear(d_ff, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.relu(self.up(x)))


def key_mask(pad_mask: np.ndarray) -> np.ndarray:
    """Additive ``[B, 1, 1, Lk]`` mask from a boolean ``[B, Lk]`` (True = real token)."""
    return np.where(pad_mask, 0.0, T.NEG_INF)[:, None, None, :]


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), T.NEG_INF), k=1)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``n_heads`` heads and an output projection."""

    def __init__(self, d: int, n_heads: int, rng):
        if d % n_heads:
            raise ConfigError(f"d_model={d} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.last_weights: np.ndarray | None = None

    def split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return T.permute(T.reshape(x, (b, n, self.n_heads, d // self.n_heads)), (0, 2, 1, 3))

    def project_kv(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return self.split(self.k(x)), self.split(self.v(x))

    def attend(self, x_q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
        b, n, d = x_q.shape
        q = self.split(self.q(x_q))
        scores = T.matmul(q, T.transpose(k)) * (1.0 / math.sqrt(d // self.n_heads))
        if mask is not None:
            scores = T.add_constant(scores, mask)
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        ctx = T.matmul(weights, v)
        return self.o(T.reshape(T.permute(ctx, (0, 2, 1, 3)), (b, n, d)))

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        k, v = self.project_kv(x_kv)
        return self.attend(x_q, k, v, mask)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.ln_attn = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln_ff = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, rng)
        self.dropout_rate = cfg.dropout_rate

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        h = self.ln_attn(x)
        x = x + T.dropout(self.attn(h, h, mask), self.dropout_rate, self.rng)
        return x + T.dropout(self.ff(self.ln_ff(x)), self.dropout_rate, self.rng)


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.ln_self = LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln_cross = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln_ff = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, rng)
        self.dropout_rate = cfg.dropout_rate

    def _tail(self, y: Tensor, mem: Tensor, mem_mask: np.ndarray | None) -> Tensor:
        y = y + T.dropout(self.cross_attn(self.ln_cross(y), mem, mem_mask),
                          self.dropout_rate, self.rng)
        return y + T.dropout(self.ff(self.ln_ff(y)), self.dropout_rate, self.rng)

    def __call__(self, y: Tensor, mem: Tensor, mem_mask) -> Tensor:
        h = self.ln_self(y)
        y = y + T.dropout(self.self_attn(h, h, causal_mask(y.shape[1])),
                          self.dropout_rate, self.rng)
        return self._tail(y, mem, mem_mask)

    def step(self, y: Tensor, cache: dict, mem: Tensor, mem_mask) -> Tensor:
        """One new position ``y[B, 1, d]``; keys/values of earlier positions come from ``cache``."""
        h = self.ln_self(y)
        k, v = self.self_attn.project_kv(h)
        if "k" in cache:
            k = T.concat([cache["k"], k], axis=2)
            v = T.concat([cache["v"], v], axis=2)
        cache["k"], cache["v"] = k, v
        y = y + T.dropout(self.self_attn.attend(h, k, v, None), self.dropout_rate, self.rng)
        return self._tail(y, mem, mem_mask)


class DecodeCache:
    """Per-layer self-attention keys/values for incremental decoding."""

    def __init__(self, n_layers: int):
        self.layers: list[dict] = [{} for _ in range(n_layers)]
        self.length = 0


class EncoderDecoder(Module):
    """Shared-embedding encoder-decoder backbone."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        self.embed = _normal(rng, (cfg.vocab_size, d), 1.0 / math.sqrt(d))
        self.enc_pos = _normal(rng, (cfg.max_source_len, d), 1.0 / math.sqrt(d))
        self.enc_layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_enc_layers)]
        self.enc_norm = LayerNorm(d)
        self.dec_pos = _normal(rng, (cfg.max_target_len, d), 1.0 / math.sqrt(d))
        self.dec_layers = [DecoderLayer(cfg, rng) for _ in range(cfg.n_dec_layers)]
        self.dec_norm = LayerNorm(d)
        self.lm_bias = T.parameter(np.zeros(cfg.vocab_size))

    # names of parameters used only by the decoder side
    DECODER_PREFIXES = ("dec_pos", "dec_layers.", "dec_norm.", "lm_bias")

    def decoder_parameter_names(self, prefix: str = "") -> list[str]:
        return [prefix + n for n, _ in self.named_parameters()
                if n.startswith(self.DECODER_PREFIXES)]

    # -- encoder ------------------------------------------------------------------
    def encode(self, ids: np.ndarray, pad_mask: np.ndarray | None = None) -> Tensor:
        """``ids[B, L]`` -> last-layer states ``[B, L, d]``."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError(f"encode expects [batch, length] ids, got shape {ids.shape}")
        b, n = ids.shape
        if n > self.cfg.max_source_len:
            raise LengthError(f"source length {n} exceeds max_source_len={self.cfg.max_source_len}")
        if pad_mask is None:
            pad_mask = ids != PAD
        x = T.embedding_lookup(self.embed, ids) + T.index(self.enc_pos, slice(0, n))
        mask = key_mask(pad_mask)
        for layer in self.enc_layers:
            x = layer(x, mask)
        return self.enc_norm(x)

    # -- decoder ------------------------------------------------------------------
    def logits(self, h: Tensor) -> Tensor:
        return T.matmul(h, T.transpose(self.embed)) + self.lm_bias

    def decode_full(self, in_ids: np.ndarray, mem: Tensor, mem_mask: np.ndarray) -> Tensor:
        """Causal decoder over ``in_ids[B, M]``; returns last-layer states ``[B, M, d]``."""
        in_ids = np.asarray(in_ids, dtype=np.int64)
        m = in_ids.shape[1]
        if m > self.cfg.max_target_len:
            raise LengthError(f"target length {m} exceeds max_target_len={self.cfg.max_target_len}")
        y = T.embedding_lookup(self.embed, in_ids) + T.index(self.dec_pos, slice(0, m))
        mmask = key_mask(mem_mask)
        for layer in self.dec_layers:
            y = layer(y, mem, mmask)
        return self.dec_norm(y)

    def teacher_forced_logits(self, mem: Tensor, mem_mask: np.ndarray,
                              targets: np.ndarray) -> Tensor:
        """Logits for every target position given the gold prefix.

        ``targets[B, M]`` are a_1..a_M; the decoder reads BOS, a_1..a_{M-1}.
        Returns ``[B, M, V]``.
        """
        targets = np.asarray(targets, dtype=np.int64)
        if targets.ndim != 2 or targets.shape[1] == 0:
            raise ValueError("teacher forcing needs a non-empty target")
        in_ids = np.concatenate([np.full((targets.shape[0], 1), BOS), targets[:, :-1]], axis=1)
        return self.logits(self.decode_full(in_ids, mem, mem_mask))

    def new_cache(self) -> DecodeCache:
        return DecodeCache(len(self.dec_layers))

    def decoder_step(self, prev_tokens: np.ndarray, cache: DecodeCache, mem: Tensor,
                     mem_mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """Advance one position: returns ``(probabilities[B, V], hidden[B, d])``."""
        j = cache.length
        if j >= self.cfg.max_target_len:
            raise LengthError(f"decoder cache already holds max_target_len={j} positions")
        prev = np.asarray(prev_tokens, dtype=np.int64).reshape(-1, 1)
        y = T.embedding_lookup(self.embed, prev) + T.index(self.dec_pos, slice(j, j + 1))
        mmask = key_mask(mem_mask)
        for layer, lc in zip(self.dec_layers, cache.layers):
            y = layer.step(y, lc, mem, mmask)
        h = self.dec_norm(y)
        cache.length += 1
        b = h.shape[0]
        h = T.reshape(h, (b, h.shape[-1]))
        return T.softmax(self.logits(h), axis=-1), h

    def greedy_decode(self, mem: Tensor, mem_mask: np.ndarray, max_len: int | None = None
                      ) -> tuple[list[list[int]], np.ndarray, np.ndarray]:
        """Greedy clue decoding from BOS, stopping at EOS or ``max_len``.

        Returns per-example token lists (EOS excluded), hidden states
        ``[B, Lc, d]`` of the emitted tokens, and a boolean mask ``[B, Lc]``.
        Runs without recording a graph: the states are constants downstream.
        """
        max_len = self.cfg.max_target_len if max_len is None else max_len
        if max_len > self.cfg.max_target_len:
            raise LengthError(f"max_len {max_len} exceeds max_target_len={self.cfg.max_target_len}")
        b, d = mem.shape[0], self.cfg.d_model
        tokens: list[list[int]] = [[] for _ in range(b)]
        states = np.zeros((b, max_len, d))
        done = np.zeros(b, dtype=bool)
        prev = np.full(b, BOS, dtype=np.int64)
        with T.no_grad():
            mem = T.detach(mem)
            cache = self.new_cache()
            for j in range(max_len):
                probs, h = self.decoder_step(prev, cache, mem, mem_mask)
                nxt = probs.data.argmax(axis=-1)
                for i in range(b):
                    if done[i]:
                        continue
                    if nxt[i] == EOS:
                        done[i] = True
                    else:
                        tokens[i].append(int(nxt[i]))
                        states[i, j] = h.data[i]
                if done.all():
                    break
                prev = nxt
        lc = max((len(t) for t in tokens), default=0)
        mask = np.zeros((b, lc), dtype=bool)
        for i, t in enumerate(tokens):
            mask[i, :len(t)] = True
        return tokens, states[:, :lc].copy(), mask


def attention_params(d: int) -> int:
    return 4 * (d * d + d)


def ffn_params(d: int, d_ff: int) -> int:
    return 2 * d * d_ff + d_ff + d


def encoder_layer_params(cfg: ModelConfig) -> int:
    d = cfg.d_model
    return attention_params(d) + ffn_params(d, cfg.d_ff) + 2 * (2 * d)


def decoder_layer_params(cfg: ModelConfig) -> int:
    d = cfg.d_model
    return 2 * attention_params(d) + ffn_params(d, cfg.d_ff) + 3 * (2 * d)


def backbone_params(cfg: ModelConfig) -> int:
    """Closed form for :class:`EncoderDecoder`.

    ``V*d + (Ls + Lt)*d + Ne*enc_layer + Nd*dec_layer + 2*(2d) + V`` with
    ``enc_layer = 4(d^2+d) + (2*d*f + f + d) + 4d`` and
    ``dec_layer = 8(d^2+d) + (2*d*f + f + d) + 6d``.
    """
    d, v = cfg.d_model, cfg.vocab_size
    return (v * d + (cfg.max_source_len + cfg.max_target_len) * d
            + cfg.n_enc_layers * encoder_layer_params(cfg)
            + cfg.n_dec_layers * decoder_layer_params(cfg)
            + 2 * (2 * d) + v)
