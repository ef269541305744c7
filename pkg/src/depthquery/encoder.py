"""A small from-scratch transformer encoder that exposes every layer's state.

Pre-norm blocks (self-attention then feed-forward, both residual) over token
embeddings with fixed sinusoidal positions. ``encode`` returns the post-block
state of all layers, shallow to deep, so the substrate builder can consume an
arbitrary depth budget without re-running the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, InputError
from .serialize import load_stack as _load_stack_arrays
from .serialize import save_stack as _save_stack_arrays


@dataclass
class EncoderConfig:
    vocab_size: int = 2048
    d: int = 64
    layers: int = 8
    heads: int = 4
    ffn_mult: int = 4
    max_len: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"model width {self.d} not divisible by heads {self.heads}")
        if self.layers < 1 or self.max_len < 1:
            raise ConfigError("layers and max_len must be positive")


@dataclass
class FwdContext:
    """Per-call forward-pass state: dropout stream, mode, optional taps."""

    training: bool = False
    rng: np.random.Generator | None = None
    module_dropout: float = 0.1
    classifier_dropout: float = 0.2
    attn_sink: list | None = None  # collects attention weight arrays when set

    def drop(self, x, rate):
        if not self.training or rate == 0.0:
            return x
        return ad.dropout(x, rate, self.rng, True)


EVAL_CTX = FwdContext(training=False)


@dataclass
class HiddenStack:
    """All layer states of one encoder pass, each (batch, n, d), shallow first."""

    states: list[ad.Tensor]
    n: int


@dataclass
class MhaParams:
    wq: ad.Tensor
    bq: ad.Tensor
    wk: ad.Tensor
    bk: ad.Tensor
    wv: ad.Tensor
    bv: ad.Tensor
    wo: ad.Tensor
    bo: ad.Tensor


@dataclass
class BlockParams:
    ln1_gain: ad.Tensor
    ln1_bias: ad.Tensor
    attn: MhaParams
    ln2_gain: ad.Tensor
    ln2_bias: ad.Tensor
    ffn_w1: ad.Tensor
    ffn_b1: ad.Tensor
    ffn_w2: ad.Tensor
    ffn_b2: ad.Tensor


@dataclass
class EncoderParams:
    embedding: ad.Tensor
    positions: np.ndarray
    blocks: list[BlockParams] = field(default_factory=list)


def sinusoidal_positions(max_len: int, d: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def init_mha(reg: ad.ParamRegistry, prefix: str, rng, d: int) -> MhaParams:
    def proj(tag):
        return reg.create(f"{prefix}.{tag}", ad.glorot_uniform(rng, (d, d), d, d))

    def bias(tag):
        return reg.create(f"{prefix}.{tag}", np.zeros(d))

    return MhaParams(proj("wq"), bias("bq"), proj("wk"), bias("bk"),
                     proj("wv"), bias("bv"), proj("wo"), bias("bo"))


def init_encoder(reg: ad.ParamRegistry, cfg: EncoderConfig,
                 rng: np.random.Generator) -> EncoderParams:
    # keep token identity comparable in scale to the unit-amplitude positions
    emb = reg.create("encoder.embedding",
                     rng.normal(0.0, 0.5, size=(cfg.vocab_size, cfg.d)))
    blocks = []
    hidden = cfg.d * cfg.ffn_mult
    for i in range(cfg.layers):
        pre = f"encoder.block{i}"
        blocks.append(BlockParams(
            ln1_gain=reg.create(f"{pre}.ln1.gain", np.ones(cfg.d)),
            ln1_bias=reg.create(f"{pre}.ln1.bias", np.zeros(cfg.d)),
            attn=init_mha(reg, f"{pre}.attn", rng, cfg.d),
            ln2_gain=reg.create(f"{pre}.ln2.gain", np.ones(cfg.d)),
            ln2_bias=reg.create(f"{pre}.ln2.bias", np.zeros(cfg.d)),
            ffn_w1=reg.create(f"{pre}.ffn.w1", ad.glorot_uniform(rng, (cfg.d, hidden), cfg.d, hidden)),
            ffn_b1=reg.create(f"{pre}.ffn.b1", np.zeros(hidden)),
            ffn_w2=reg.create(f"{pre}.ffn.w2", ad.glorot_uniform(rng, (hidden, cfg.d), hidden, cfg.d)),
            ffn_b2=reg.create(f"{pre}.ffn.b2", np.zeros(cfg.d)),
        ))
    return EncoderParams(embedding=emb,
                         positions=sinusoidal_positions(cfg.max_len, cfg.d, reg.dtype),
                         blocks=blocks)


def multi_head_attention(x: ad.Tensor, p: MhaParams, heads: int,
                         ctx: FwdContext) -> ad.Tensor:
    """Scaled dot-product attention over (batch, n, d) with output projection."""
    b, n, d = x.shape
    dh = d // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(ad.linear(x, p.wq, p.bq))
    k = split(ad.linear(x, p.wk, p.bk))
    v = split(ad.linear(x, p.wv, p.bv))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = ad.softmax(scores)
    if ctx.attn_sink is not None:
        ctx.attn_sink.append(probs.data)
    mixed = ad.matmul(probs, v)
    merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, n, d))
    return ad.linear(merged, p.wo, p.bo)


def encode(p: EncoderParams, cfg: EncoderConfig, tokens,
           ctx: FwdContext = EVAL_CTX) -> HiddenStack:
    """Run the encoder and return every block's output state.

    ``tokens`` is an int array of shape (n,) or (batch, n); all sentences in
    a batch must share the same length (no padding is ever introduced).
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    b, n = tokens.shape
    if n == 0:
        raise InputError("cannot encode an empty token sequence")
    if n > cfg.max_len:
        raise InputError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise InputError(
            f"token id out of range [0, {cfg.vocab_size}): "
            f"min {tokens.min()}, max {tokens.max()}")

    emb = ad.reshape(ad.take_rows(p.embedding, tokens.reshape(-1)), (b, n, cfg.d))
    x = ad.add(emb, ad.Tensor(p.positions[:n]))
    x = ctx.drop(x, cfg.dropout)

    states = []
    for blk in p.blocks:
        normed = ad.layer_norm(x, blk.ln1_gain, blk.ln1_bias)
        attn_out = multi_head_attention(normed, blk.attn, cfg.heads, ctx)
        x = ad.add(x, ctx.drop(attn_out, cfg.dropout))
        normed = ad.layer_norm(x, blk.ln2_gain, blk.ln2_bias)
        ffn_out = ad.linear(ad.gelu(ad.linear(normed, blk.ffn_w1, blk.ffn_b1)),
                            blk.ffn_w2, blk.ffn_b2)
        x = ad.add(x, ctx.drop(ffn_out, cfg.dropout))
        states.append(x)
    return HiddenStack(states=states, n=n)


def save_stack(stack: HiddenStack, path: str) -> None:
    """Persist a single-sentence stack (batch extent must be 1)."""
    arrays = []
    for s in stack.states:
        a = s.data
        if a.ndim == 3:
            if a.shape[0] != 1:
                raise InputError("stack files hold one sentence; got a batch")
            a = a[0]
        arrays.append(a)
    _save_stack_arrays(path, arrays)


def load_stack(path: str) -> HiddenStack:
    arrays = _load_stack_arrays(path)
    states = [ad.Tensor(a[None, :, :]) for a in arrays]
    return HiddenStack(states=states, n=arrays[0].shape[0])
