"""Per-aspect readout over a shared depth substrate.

Each aspect query resolves two axes against representations that were built
once per sentence: where to read (independent sigmoid token gates over the
reorganized context) and how deep to read (a softmax distribution over the
substrate levels). Token evidence, depth summary, and the aspect vector are
then mixed by a gated fusion and classified.

All functions are pure given (substrate, context, parameters); readouts for
different aspects share no state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import EVAL_CTX, FwdContext, MhaParams, multi_head_attention
from .errors import ConfigError, InputError
from .substrate import DepthSubstrate

LABELS = ("positive", "neutral", "negative")
LABEL_TO_INDEX = {label: i for i, label in enumerate(LABELS)}


@dataclass
class ReadoutConfig:
    tau_alpha: float = 1.0
    tau_g: float = 1.0
    eps: float = 1e-6
    heads: int = 4
    use_token_sel: bool = True
    use_layer_sel: bool = True
    use_gated_fusion: bool = True

    def __post_init__(self):
        if self.tau_alpha <= 0 or self.tau_g <= 0:
            raise ConfigError("selection temperatures must be positive")
        if self.eps <= 0:
            raise ConfigError("gate normalizer eps must be positive")


@dataclass
class AspectQuery:
    """A token interval (1-based, inclusive) plus optional gold label."""

    span: tuple[int, int]
    label: str | None = None
    term: str = ""

    def __post_init__(self):
        i, j = self.span
        if not (1 <= i <= j):
            raise InputError(f"invalid aspect span {self.span}")
        if self.label is not None and self.label not in LABEL_TO_INDEX:
            raise InputError(f"unknown label '{self.label}', expected one of {LABELS}")


@dataclass
class SelectionTrace:
    """Everything one aspect read from the substrate, for export and analysis."""

    sentence_id: str
    span: tuple[int, int]
    w: np.ndarray
    alpha: np.ndarray
    g: np.ndarray
    logits: np.ndarray
    prediction: str
    gold: str | None = None

    def to_record(self) -> dict:
        return {
            "sentence_id": self.sentence_id,
            "span": list(self.span),
            "w": [round(float(v), 6) for v in self.w],
            "alpha": [round(float(v), 6) for v in self.alpha],
            "g": [round(float(v), 6) for v in self.g],
            "logits": [round(float(v), 6) for v in self.logits],
            "prediction": self.prediction,
            "gold": self.gold,
        }


@dataclass
class ReadoutParams:
    ctx_attn: MhaParams
    token_mlp: ad.MlpParams
    depth_mlp: ad.MlpParams
    fusion_mlp: ad.MlpParams
    ln_c_gain: ad.Tensor
    ln_c_bias: ad.Tensor
    ln_d_gain: ad.Tensor
    ln_d_bias: ad.Tensor
    ln_a_gain: ad.Tensor
    ln_a_bias: ad.Tensor
    cls_w: ad.Tensor
    cls_b: ad.Tensor


@dataclass
class ReadBatch:
    """Batched readout results for a flat list of aspect queries."""

    logits: ad.Tensor          # (A, 3)
    w: ad.Tensor               # (A, n)
    alpha: ad.Tensor           # (A, K)
    g: ad.Tensor               # (A, 3)
    span_mask: np.ndarray      # (A, n) binary, 1 inside the aspect span
    token_sel_active: bool
    fusion_active: bool

    def predictions(self) -> list[str]:
        return [LABELS[i] for i in self.logits.data.argmax(axis=-1)]


def init_readout(reg: ad.ParamRegistry, cfg: ReadoutConfig, d: int, k: int,
                 rng: np.random.Generator) -> ReadoutParams:
    from .encoder import init_mha

    def mlp(prefix, d_in, d_hidden, d_out):
        return ad.MlpParams(
            w1=reg.create(f"{prefix}.w1", ad.glorot_uniform(rng, (d_in, d_hidden), d_in, d_hidden)),
            b1=reg.create(f"{prefix}.b1", np.zeros(d_hidden)),
            w2=reg.create(f"{prefix}.w2", ad.glorot_uniform(rng, (d_hidden, d_out), d_hidden, d_out)),
            b2=reg.create(f"{prefix}.b2", np.zeros(d_out)),
        )

    def ln(prefix):
        return (reg.create(f"{prefix}.gain", np.ones(d)),
                reg.create(f"{prefix}.bias", np.zeros(d)))

    ln_c = ln("readout.ln_c")
    ln_d = ln("readout.ln_d")
    ln_a = ln("readout.ln_a")
    return ReadoutParams(
        ctx_attn=init_mha(reg, "readout.ctx_attn", rng, d),
        token_mlp=mlp("readout.token_mlp", 2 * d, d, 1),
        depth_mlp=mlp("readout.depth_mlp", 2 * d, d, k),
        fusion_mlp=mlp("readout.fusion_mlp", 3 * d, d, 3),
        ln_c_gain=ln_c[0], ln_c_bias=ln_c[1],
        ln_d_gain=ln_d[0], ln_d_bias=ln_d[1],
        ln_a_gain=ln_a[0], ln_a_bias=ln_a[1],
        cls_w=reg.create("readout.cls.w", ad.glorot_uniform(rng, (d, 3), d, 3)),
        cls_b=reg.create("readout.cls.b", np.zeros(3)),
    )


def reorganize_context(p: ReadoutParams, cfg: ReadoutConfig, enhanced: ad.Tensor,
                       ctx: FwdContext = EVAL_CTX) -> ad.Tensor:
    """Self-attention over the refined states, computed once per sentence."""
    return multi_head_attention(enhanced, p.ctx_attn, cfg.heads, ctx)


def span_matrix(queries: list[AspectQuery], n: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized span indicators (A, n) and the binary mask (A, n)."""
    weights = np.zeros((len(queries), n), dtype=dtype)
    mask = np.zeros((len(queries), n), dtype=dtype)
    for row, q in enumerate(queries):
        i, j = q.span
        if j > n:
            raise InputError(f"aspect span {q.span} exceeds sentence length {n}")
        mask[row, i - 1:j] = 1.0
        weights[row, i - 1:j] = 1.0 / (j - i + 1)
    return weights, mask


def aspect_vector(enhanced: ad.Tensor, span: tuple[int, int]) -> ad.Tensor:
    """Mean of the refined rows inside one span; enhanced is (n, d) or (1, n, d)."""
    e = enhanced if enhanced.ndim == 2 else ad.reshape(enhanced, enhanced.shape[1:])
    n = e.shape[0]
    weights, _ = span_matrix([AspectQuery(span)], n, e.data.dtype)
    return ad.reshape(ad.matmul(ad.Tensor(weights), e), (-1,))


def mask_distribution(alpha: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Zero the distribution outside ``allowed`` and renormalize each row.

    Rows whose surviving mass is zero fall back to uniform over the allowed
    indices. ``allowed`` is a binary (K,) vector.
    """
    masked = alpha * allowed
    totals = masked.sum(axis=-1, keepdims=True)
    uniform = allowed / allowed.sum()
    out = np.where(totals > 0, masked / np.where(totals > 0, totals, 1.0), uniform)
    return out.astype(alpha.dtype, copy=False)


def _broadcast_rows(vec: ad.Tensor, n: int) -> ad.Tensor:
    """(A, d) -> (A, n, d) by explicit tiling inside the graph."""
    a, d = vec.shape
    ones = ad.Tensor(np.ones((1, n, 1), dtype=vec.data.dtype))
    return ad.mul(ad.reshape(vec, (a, 1, d)), ones)


def _mlp(x, p: ad.MlpParams, ctx: FwdContext):
    hidden = ctx.drop(ad.gelu(ad.linear(x, p.w1, p.b1)), ctx.module_dropout)
    return ad.linear(hidden, p.w2, p.b2)


def read_aspects(p: ReadoutParams, cfg: ReadoutConfig, sub: DepthSubstrate,
                 context: ad.Tensor, queries: list[AspectQuery],
                 sent_index: np.ndarray, ctx: FwdContext = EVAL_CTX,
                 depth_mask: np.ndarray | None = None) -> ReadBatch:
    """Read every query against shared per-sentence representations.

    ``sent_index`` maps each query to its row in the (batch, n, d) inputs.
    ``depth_mask`` optionally restricts the depth distribution at inference.
    """
    batch, n, d = context.shape
    num_aspects = len(queries)
    if num_aspects == 0:
        raise InputError("read_aspects requires at least one query")
    sent_index = np.asarray(sent_index)
    dtype = context.data.dtype
    weights, mask = span_matrix(queries, n, dtype)

    e_sel = ad.take_rows(sub.enhanced, sent_index)
    c_sel = ad.take_rows(context, sent_index)
    a_vec = ad.tsum(ad.mul(ad.Tensor(weights[:, :, None]), e_sel), axis=1)

    # axis 1: which tokens to read
    if cfg.use_token_sel:
        pair = ad.concat([c_sel, _broadcast_rows(a_vec, n)], axis=-1)
        w = ad.sigmoid(_mlp(pair, p.token_mlp, ctx))          # (A, n, 1)
        c_num = ad.tsum(ad.mul(w, c_sel), axis=1)
        c_den = ad.add(ad.tsum(w, axis=1), cfg.eps)
        c_vec = ad.div(c_num, c_den)
        w_flat = ad.reshape(w, (num_aspects, n))
    else:
        w_flat = ad.Tensor(np.ones((num_aspects, n), dtype=dtype))
        c_vec = ad.tmean(c_sel, axis=1)

    # axis 2: how deep to read
    k = sub.k
    pool = ad.take_rows(ad.tmean(context, axis=1), sent_index)  # (A, d)
    if cfg.use_layer_sel:
        alpha = ad.softmax(_mlp(ad.concat([a_vec, pool], axis=-1), p.depth_mlp, ctx),
                           temperature=cfg.tau_alpha)
    else:
        alpha = ad.Tensor(np.full((num_aspects, k), 1.0 / k, dtype=dtype))
    if depth_mask is not None:
        alpha = ad.Tensor(mask_distribution(alpha.data, np.asarray(depth_mask, dtype=dtype)))
    level_means = ad.concat([ad.reshape(ad.tmean(lv, axis=1), (batch, 1, d))
                             for lv in sub.levels], axis=1)     # (B, K, d)
    lv_sel = ad.take_rows(level_means, sent_index)              # (A, K, d)
    depth_vec = ad.tsum(ad.mul(ad.reshape(alpha, (num_aspects, k, 1)), lv_sel), axis=1)

    # gated fusion of the three branches
    c_hat = ad.layer_norm(c_vec, p.ln_c_gain, p.ln_c_bias)
    d_hat = ad.layer_norm(depth_vec, p.ln_d_gain, p.ln_d_bias)
    a_hat = ad.layer_norm(a_vec, p.ln_a_gain, p.ln_a_bias)
    if cfg.use_gated_fusion:
        g = ad.softmax(_mlp(ad.concat([c_hat, d_hat, a_hat], axis=-1), p.fusion_mlp, ctx),
                       temperature=cfg.tau_g)
    else:
        g = ad.Tensor(np.full((num_aspects, 3), 1.0 / 3.0, dtype=dtype))
    branches = ad.concat([ad.reshape(t, (num_aspects, 1, d))
                          for t in (c_hat, d_hat, a_hat)], axis=1)
    fused = ad.tsum(ad.mul(ad.reshape(g, (num_aspects, 3, 1)), branches), axis=1)

    fused = ctx.drop(fused, ctx.classifier_dropout)
    logits = ad.linear(fused, p.cls_w, p.cls_b)
    return ReadBatch(logits=logits, w=w_flat, alpha=alpha, g=g, span_mask=mask,
                     token_sel_active=cfg.use_token_sel,
                     fusion_active=cfg.use_gated_fusion)


def classify(p: ReadoutParams, fused: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    """Affine map to the three polarity logits plus their softmax."""
    logits = ad.linear(fused if fused.ndim > 1 else ad.reshape(fused, (1, -1)),
                       p.cls_w, p.cls_b)
    return logits, ad.softmax(logits)


def traces_from_batch(read: ReadBatch, queries: list[AspectQuery],
                      sentence_ids: list[str]) -> list[SelectionTrace]:
    preds = read.predictions()
    return [
        SelectionTrace(
            sentence_id=sentence_ids[row],
            span=q.span,
            w=read.w.data[row].copy(),
            alpha=read.alpha.data[row].copy(),
            g=read.g.data[row].copy(),
            logits=read.logits.data[row].copy(),
            prediction=preds[row],
            gold=q.label,
        )
        for row, q in enumerate(queries)
    ]
