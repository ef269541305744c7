"""Single-pass multi-aspect sentiment with a queryable depth substrate.

A sentence is encoded once into a depth-ordered substrate; each aspect then
performs a lightweight read (token gates, depth distribution, gated fusion)
against the shared representations. The package also ships the training
objective, inference-time depth probes, and an amortization benchmark.
"""

from . import autodiff, bench, data, probes, serialize, training
from .autodiff import Parameter, Tensor, backward, no_grad
from .encoder import EncoderConfig, FwdContext, HiddenStack, encode
from .model import ModelConfig, SentimentModel
from .readout import LABELS, AspectQuery, ReadoutConfig, SelectionTrace
from .substrate import DepthSubstrate, SubstrateConfig
from .training import EvalReport, LossWeights, TrainConfig, evaluate, paired_t_test, train

__version__ = "0.1.0"

__all__ = [
    "AspectQuery", "DepthSubstrate", "EncoderConfig", "EvalReport",
    "FwdContext", "HiddenStack", "LABELS", "LossWeights", "ModelConfig",
    "Parameter", "ReadoutConfig", "SelectionTrace", "SentimentModel",
    "SubstrateConfig", "Tensor", "TrainConfig", "backward", "encode",
    "evaluate", "no_grad", "paired_t_test", "train",
    "autodiff", "bench", "data", "probes", "serialize", "training",
]
