"""Full model wiring: encoder, substrate builder, readout, and variants.

Variants mirror the component study configurations:

* ``full``: refined substrate, depth recurrence, attention context, all
  selectors.
* ``encoder_only``: classify the layer-normalized span mean of the final
  encoder state; no substrate, no selectors.
* ``substrate_only``: the substrate is built, but the readout is fully
  uniform (token mean, uniform depth, uniform fusion) and the context is the
  refined state itself.
* ``readout_only``: selectors run over the raw last-K encoder layers
  (layer-normalized) with no local refinement and no depth recurrence.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import readout as ro
from . import substrate as sb
from .encoder import (EVAL_CTX, EncoderConfig, EncoderParams, FwdContext,
                      HiddenStack, encode, init_encoder)
from .errors import ConfigError
from .serialize import load_checkpoint, save_checkpoint

VARIANTS = ("full", "encoder_only", "substrate_only", "readout_only")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    substrate: sb.SubstrateConfig = field(default_factory=sb.SubstrateConfig)
    readout: ro.ReadoutConfig = field(default_factory=ro.ReadoutConfig)
    variant: str = "full"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got '{self.variant}'")
        if self.substrate.k > self.encoder.layers:
            raise ConfigError(
                f"depth budget {self.substrate.k} exceeds encoder layers {self.encoder.layers}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")


@dataclass
class EncoderHeadParams:
    ln_gain: ad.Tensor
    ln_bias: ad.Tensor
    w: ad.Tensor
    b: ad.Tensor


class SentimentModel:
    """Owns the parameters and the forward paths of one configuration."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        dtype = np.float32 if cfg.dtype == "float32" else np.float64
        self.registry = ad.ParamRegistry(dtype=dtype)
        rng = np.random.default_rng(cfg.seed)

        self.sub_cfg = cfg.substrate
        self.read_cfg = cfg.readout
        self.use_context_attn = True
        if cfg.variant == "readout_only":
            self.sub_cfg = replace(cfg.substrate, use_local_conv=False, use_depth_gru=False)
        elif cfg.variant == "substrate_only":
            self.read_cfg = replace(cfg.readout, use_token_sel=False,
                                    use_layer_sel=False, use_gated_fusion=False)
            self.use_context_attn = False

        d = cfg.encoder.d
        self.enc_params: EncoderParams = init_encoder(self.registry, cfg.encoder, rng)
        self.sub_params = None
        self.read_params = None
        self.head_params = None
        if cfg.variant == "encoder_only":
            self.head_params = EncoderHeadParams(
                ln_gain=self.registry.create("head.ln.gain", np.ones(d)),
                ln_bias=self.registry.create("head.ln.bias", np.zeros(d)),
                w=self.registry.create("head.w", ad.glorot_uniform(rng, (d, 3), d, 3)),
                b=self.registry.create("head.b", np.zeros(3)),
            )
        else:
            self.sub_params = sb.init_substrate(self.registry, self.sub_cfg, d, rng)
            self.read_params = ro.init_readout(self.registry, self.read_cfg, d,
                                               self.sub_cfg.k, rng)

    # ----- staged forward (separable for benchmarking) -----

    def fwd_stack(self, tokens, ctx: FwdContext = EVAL_CTX) -> HiddenStack:
        return encode(self.enc_params, self.cfg.encoder, tokens, ctx)

    def fwd_substrate(self, stack: HiddenStack,
                      ctx: FwdContext = EVAL_CTX) -> sb.DepthSubstrate:
        if self.sub_params is None:
            raise ConfigError("variant 'encoder_only' has no substrate")
        return sb.build_substrate(self.sub_params, self.sub_cfg, stack, ctx)

    def fwd_context(self, sub: sb.DepthSubstrate,
                    ctx: FwdContext = EVAL_CTX) -> ad.Tensor:
        if not self.use_context_attn:
            return sub.enhanced
        return ro.reorganize_context(self.read_params, self.read_cfg, sub.enhanced, ctx)

    def fwd_read(self, sub: sb.DepthSubstrate, context: ad.Tensor,
                 queries: list[ro.AspectQuery], sent_index,
                 ctx: FwdContext = EVAL_CTX,
                 depth_mask: np.ndarray | None = None) -> ro.ReadBatch:
        return ro.read_aspects(self.read_params, self.read_cfg, sub, context,
                               queries, sent_index, ctx, depth_mask)

    # ----- end to end -----

    def forward(self, tokens, queries: list[ro.AspectQuery], sent_index,
                ctx: FwdContext = EVAL_CTX,
                depth_mask: np.ndarray | None = None) -> ro.ReadBatch:
        stack = self.fwd_stack(tokens, ctx)
        if self.cfg.variant == "encoder_only":
            return self._head_read(stack, queries, sent_index, ctx)
        sub = self.fwd_substrate(stack, ctx)
        context = self.fwd_context(sub, ctx)
        return self.fwd_read(sub, context, queries, sent_index, ctx, depth_mask)

    def _head_read(self, stack: HiddenStack, queries, sent_index,
                   ctx: FwdContext) -> ro.ReadBatch:
        h_last = stack.states[-1]
        _, n, d = h_last.shape
        sent_index = np.asarray(sent_index)
        dtype = h_last.data.dtype
        weights, mask = ro.span_matrix(queries, n, dtype)
        h_sel = ad.take_rows(h_last, sent_index)
        a_vec = ad.tsum(ad.mul(ad.Tensor(weights[:, :, None]), h_sel), axis=1)
        a_hat = ad.layer_norm(a_vec, self.head_params.ln_gain, self.head_params.ln_bias)
        a_hat = ctx.drop(a_hat, ctx.classifier_dropout)
        logits = ad.linear(a_hat, self.head_params.w, self.head_params.b)
        num = len(queries)
        return ro.ReadBatch(
            logits=logits,
            w=ad.Tensor(np.ones((num, n), dtype=dtype)),
            alpha=ad.Tensor(np.full((num, self.cfg.substrate.k),
                                    1.0 / self.cfg.substrate.k, dtype=dtype)),
            g=ad.Tensor(np.full((num, 3), 1.0 / 3.0, dtype=dtype)),
            span_mask=mask,
            token_sel_active=False,
            fusion_active=False,
        )

    def infer_sentence(self, token_ids, queries: list[ro.AspectQuery],
                       sentence_id: str = "",
                       depth_mask: np.ndarray | None = None) -> list[ro.SelectionTrace]:
        """Eval-mode readout of one sentence; pure and reusable across calls."""
        token_ids = np.asarray(token_ids)
        with ad.no_grad():
            read = self.forward(token_ids[None, :], queries,
                                np.zeros(len(queries), dtype=np.int64),
                                EVAL_CTX, depth_mask)
        return ro.traces_from_batch(read, queries, [sentence_id] * len(queries))

    # ----- persistence -----

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.registry.state_dict()

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.registry.load_state(state)

    def save(self, path: str) -> None:
        save_checkpoint(path, self.state_dict())

    def load(self, path: str) -> None:
        self.load_state(load_checkpoint(path))

    def num_params(self) -> int:
        return sum(p.tensor.data.size for p in self.registry.params.values())
