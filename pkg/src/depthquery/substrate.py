"""Build the reusable per-sentence depth substrate.

Two paths reshape the encoder's hidden states into something queryable:

* local refinement of the final layer with multi-kernel depthwise
  convolutions, mixed back through a pointwise projection and a residual
  layer norm (keeps short-range cues such as negation bigrams explicit);
* a gated recurrence that walks the last K layers shallow to deep, one GRU
  step per depth level and per token, emitting K residual-normalized levels.

The result is immutable and can be read by any number of aspects without
rebuilding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import EVAL_CTX, FwdContext, HiddenStack
from .errors import ConfigError
from .serialize import load_substrate as _load_substrate_arrays
from .serialize import save_substrate as _save_substrate_arrays

LAYER_ORDERS = ("normal", "reversed", "shuffled")


@dataclass
class SubstrateConfig:
    k: int = 6
    kernel_sizes: tuple = (1, 3, 5)
    beta_init: float = 1.0
    layer_order: str = "normal"
    shuffle_seed: int = 0
    use_depth_gru: bool = True
    use_local_conv: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"depth budget must be >= 1, got {self.k}")
        if any(ks % 2 == 0 or ks < 1 for ks in self.kernel_sizes):
            raise ConfigError(f"kernel sizes must be odd and positive: {self.kernel_sizes}")
        if self.layer_order not in LAYER_ORDERS:
            raise ConfigError(f"layer_order must be one of {LAYER_ORDERS}")


@dataclass
class SubstrateParams:
    conv_kernels: list[ad.Tensor]
    mix: ad.Tensor
    ln_local_gain: ad.Tensor
    ln_local_bias: ad.Tensor
    gru: ad.GruParams
    beta: ad.Tensor
    ln_depth_gain: ad.Tensor
    ln_depth_bias: ad.Tensor


@dataclass
class DepthSubstrate:
    """Queryable per-sentence resource: refined final state plus K depth levels.

    ``enhanced`` is (batch, n, d); ``levels`` holds K tensors of the same
    shape ordered shallow to deep. Levels index u (1-based) maps to encoder
    layer L - K + u under normal layer order.
    """

    enhanced: ad.Tensor
    levels: list[ad.Tensor] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.levels)


def init_substrate(reg: ad.ParamRegistry, cfg: SubstrateConfig, d: int,
                   rng: np.random.Generator) -> SubstrateParams:
    kernels = [reg.create(f"substrate.conv_k{ks}", ad.glorot_uniform(rng, (ks, d), ks, ks))
               for ks in cfg.kernel_sizes]
    total = len(cfg.kernel_sizes) * d

    def gru_mat(tag):
        return reg.create(f"substrate.gru.{tag}", ad.glorot_uniform(rng, (d, d), d, d))

    def gru_bias(tag):
        return reg.create(f"substrate.gru.{tag}", np.zeros(d))

    return SubstrateParams(
        conv_kernels=kernels,
        mix=reg.create("substrate.mix", ad.glorot_uniform(rng, (total, d), total, d)),
        ln_local_gain=reg.create("substrate.ln_local.gain", np.ones(d)),
        ln_local_bias=reg.create("substrate.ln_local.bias", np.zeros(d)),
        gru=ad.GruParams(
            w_z=gru_mat("w_z"), u_z=gru_mat("u_z"), b_z=gru_bias("b_z"),
            w_r=gru_mat("w_r"), u_r=gru_mat("u_r"), b_r=gru_bias("b_r"),
            w_n=gru_mat("w_n"), u_n=gru_mat("u_n"), b_n=gru_bias("b_n")),
        beta=reg.create("substrate.beta", np.full(1, cfg.beta_init)),
        ln_depth_gain=reg.create("substrate.ln_depth.gain", np.ones(d)),
        ln_depth_bias=reg.create("substrate.ln_depth.bias", np.zeros(d)),
    )


def local_refine(p: SubstrateParams, h_last: ad.Tensor,
                 ctx: FwdContext = EVAL_CTX) -> ad.Tensor:
    """Multi-kernel depthwise conv branch, mixed and residually normalized."""
    branches = [ad.depthwise_conv1d(h_last, kern) for kern in p.conv_kernels]
    mixed = ad.matmul(ad.concat(branches, axis=-1), p.mix)
    mixed = ctx.drop(mixed, ctx.module_dropout)
    return ad.layer_norm(ad.add(mixed, h_last), p.ln_local_gain, p.ln_local_bias)


def layer_permutation(cfg: SubstrateConfig) -> np.ndarray:
    """Order in which the selected layers feed the recurrence.

    The permutation is over the K selected layers (index 0 = shallowest).
    Shuffled order draws one fixed permutation from the configured seed.
    """
    if cfg.layer_order == "normal":
        return np.arange(cfg.k)
    if cfg.layer_order == "reversed":
        return np.arange(cfg.k)[::-1]
    rng = np.random.default_rng(cfg.shuffle_seed)
    return rng.permutation(cfg.k)


def select_layers(stack: HiddenStack, cfg: SubstrateConfig) -> list[ad.Tensor]:
    num_layers = len(stack.states)
    if cfg.k > num_layers:
        raise ConfigError(f"depth budget {cfg.k} exceeds encoder layers {num_layers}")
    window = stack.states[num_layers - cfg.k:]
    return [window[i] for i in layer_permutation(cfg)]


def depth_recurrence(p: SubstrateParams, cfg: SubstrateConfig,
                     selected: list[ad.Tensor]) -> list[ad.Tensor]:
    """Integrate the selected layers in order; emit residual-normalized levels.

    With the recurrence disabled each level is just the layer-normalized
    input layer, which keeps the residual stream but removes cross-depth
    integration (and leaves the GRU parameters out of the graph entirely).
    """
    levels = []
    if not cfg.use_depth_gru:
        for x in selected:
            levels.append(ad.layer_norm(x, p.ln_depth_gain, p.ln_depth_bias))
        return levels
    state = selected[0]
    levels.append(ad.layer_norm(ad.add(ad.mul(p.beta, state), selected[0]),
                                p.ln_depth_gain, p.ln_depth_bias))
    for u in range(1, len(selected)):
        state = ad.gru_cell(selected[u], state, p.gru)
        levels.append(ad.layer_norm(ad.add(state, selected[u]),
                                    p.ln_depth_gain, p.ln_depth_bias))
    return levels


def build_substrate(p: SubstrateParams, cfg: SubstrateConfig, stack: HiddenStack,
                    ctx: FwdContext = EVAL_CTX) -> DepthSubstrate:
    h_last = stack.states[-1]
    enhanced = local_refine(p, h_last, ctx) if cfg.use_local_conv else h_last
    levels = depth_recurrence(p, cfg, select_layers(stack, cfg))
    return DepthSubstrate(enhanced=enhanced, levels=levels)


def save(sub: DepthSubstrate, cfg: SubstrateConfig, path: str) -> None:
    """Persist a single-sentence substrate (batch extent 1)."""
    enhanced = sub.enhanced.data
    levels = [lv.data for lv in sub.levels]
    if enhanced.ndim == 3:
        enhanced = enhanced[0]
        levels = [lv[0] for lv in levels]
    _save_substrate_arrays(path, enhanced, levels, cfg.layer_order)


def load(path: str) -> tuple[DepthSubstrate, str]:
    enhanced, levels, order = _load_substrate_arrays(path)
    sub = DepthSubstrate(enhanced=ad.Tensor(enhanced[None]),
                         levels=[ad.Tensor(lv[None]) for lv in levels])
    return sub, order
