"""Inference-time depth probes, ordering studies, and stress-split builders.

All probes run against frozen models: depth masking renormalizes the depth
distribution at read time and never touches training. The study harnesses
(ablation, component, layer-order, depth-budget) train each configuration
under one shared protocol so rows differ only in the configuration column.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Corpus, Vocab
from .errors import ConfigError, InputError
from .model import ModelConfig, SentimentModel
from .readout import SelectionTrace, mask_distribution
from .training import LossWeights, TrainConfig, evaluate_model, train

NEGATION_CUES = ("no", "not", "never", "n't", "without")


@dataclass(frozen=True)
class DepthMask:
    """Subset of depth indices (1-based) a readout is allowed to use."""

    allowed: frozenset

    def __post_init__(self):
        if not self.allowed:
            raise ConfigError("depth mask must allow at least one level")
        if any(i < 1 for i in self.allowed):
            raise ConfigError("depth indices are 1-based")

    def vector(self, k: int) -> np.ndarray:
        if max(self.allowed) > k:
            raise ConfigError(f"mask {sorted(self.allowed)} exceeds depth budget {k}")
        vec = np.zeros(k)
        for i in self.allowed:
            vec[i - 1] = 1.0
        return vec


def band_mask(start: int, width: int = 2) -> DepthMask:
    return DepthMask(frozenset(range(start, start + width)))


@dataclass
class RegionBands:
    """Shallow/middle/deep bands that partition the K depth levels."""

    shallow: tuple = (1, 2)
    middle: tuple = (3, 4)
    deep: tuple = (5, 6)

    def __post_init__(self):
        sets = [frozenset(range(a, b + 1)) for a, b in
                (self.shallow, self.middle, self.deep)]
        union = frozenset().union(*sets)
        if sum(len(s) for s in sets) != len(union):
            raise ConfigError("region bands must be disjoint")
        if union != frozenset(range(1, max(union) + 1)):
            raise ConfigError("region bands must partition 1..K")
        self.k = max(union)

    def items(self):
        return (("shallow", DepthMask(frozenset(range(self.shallow[0], self.shallow[1] + 1)))),
                ("middle", DepthMask(frozenset(range(self.middle[0], self.middle[1] + 1)))),
                ("deep", DepthMask(frozenset(range(self.deep[0], self.deep[1] + 1)))))


def apply_depth_mask(alpha: np.ndarray, mask: DepthMask) -> np.ndarray:
    """Restrict a depth distribution to the mask and renormalize.

    If no mass survives, falls back to uniform over the allowed indices.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    return mask_distribution(alpha, mask.vector(alpha.shape[-1]))


# ---------------------------------------------------------------------------
# masked evaluation probes


def masked_mf1(model: SentimentModel, corpus: Corpus, vocab: Vocab,
               mask: DepthMask | None) -> float:
    vec = mask.vector(model.sub_cfg.k) if mask is not None else None
    report, _ = evaluate_model(model, corpus, vocab, depth_mask=vec)
    return report.macro_f1


def region_sweep(model: SentimentModel, corpus: Corpus, vocab: Vocab,
                 bands: RegionBands | None = None) -> dict:
    """Per-band MF1 plus the best-worst gap; rows mirror the probe CSV."""
    bands = bands or RegionBands()
    if bands.k != model.sub_cfg.k:
        raise ConfigError(f"bands cover K={bands.k} but model uses K={model.sub_cfg.k}")
    base = masked_mf1(model, corpus, vocab, None)
    rows = [{"band": "base", "mf1": base}]
    scores = {}
    for name, mask in bands.items():
        scores[name] = masked_mf1(model, corpus, vocab, mask)
        rows.append({"band": name, "mf1": scores[name]})
    best = max(scores, key=scores.get)
    worst = min(scores, key=scores.get)
    return {"rows": rows, "base_mf1": base, "scores": scores,
            "delta_best_worst": scores[best] - scores[worst], "best_region": best}


def rand2l_trials(model: SentimentModel, corpus: Corpus, vocab: Vocab,
                  trials: int = 20, seed: int = 0) -> dict:
    """Keep a random contiguous 2-level band per trial; report mean and std."""
    k = model.sub_cfg.k
    if k < 2:
        raise ConfigError("random 2-level bands need a depth budget of at least 2")
    rng = np.random.default_rng(seed)
    scores = []
    starts = []
    for _ in range(trials):
        start = int(rng.integers(1, k))  # band {start, start+1}
        starts.append(start)
        scores.append(masked_mf1(model, corpus, vocab, band_mask(start)))
    scores = np.asarray(scores)
    return {"mean": float(scores.mean()), "std": float(scores.std(ddof=0)),
            "scores": scores.tolist(), "starts": starts}


def single_layer_controls(model: SentimentModel, corpus: Corpus, vocab: Vocab) -> dict:
    """Retain one depth level at a time; report best and worst."""
    k = model.sub_cfg.k
    per_layer = {u: masked_mf1(model, corpus, vocab, DepthMask(frozenset({u})))
                 for u in range(1, k + 1)}
    best = max(per_layer, key=per_layer.get)
    worst = min(per_layer, key=per_layer.get)
    return {"per_layer": per_layer, "best": (best, per_layer[best]),
            "worst": (worst, per_layer[worst])}


# ---------------------------------------------------------------------------
# trace aggregation


def has_negation_cue(tokens: list[str]) -> bool:
    for tok in tokens:
        low = tok.lower()
        if low in NEGATION_CUES or low.endswith("n't"):
            return True
    return False


def negation_shift(traces: list[SelectionTrace], corpus: Corpus,
                   bands: RegionBands | None = None) -> dict:
    """Mean per-region depth mass for negated vs non-negated sentences.

    Averages are over aspect instances; regions are reported in percentage
    points and sum to 100 within each group.
    """
    bands = bands or RegionBands()
    tokens_by_id = {s.id: s.tokens for s in corpus}
    groups: dict[str, list[np.ndarray]] = {"negated": [], "non_negated": []}
    for tr in traces:
        tokens = tokens_by_id.get(tr.sentence_id)
        if tokens is None:
            raise InputError(f"trace references unknown sentence '{tr.sentence_id}'")
        key = "negated" if has_negation_cue(tokens) else "non_negated"
        groups[key].append(tr.alpha)
    result: dict = {"insufficient_data": False, "counts": {}}
    means = {}
    for key, alphas in groups.items():
        result["counts"][key] = len(alphas)
        if not alphas:
            result["insufficient_data"] = True
            continue
        mean_alpha = np.mean(np.stack(alphas), axis=0)
        means[key] = {name: 100.0 * float(mean_alpha[[i - 1 for i in sorted(mask.allowed)]].sum())
                      for name, mask in bands.items()}
        result[key] = means[key]
    if not result["insufficient_data"]:
        result["delta_pp"] = {name: means["negated"][name] - means["non_negated"][name]
                              for name, _ in bands.items()}
    return result


# ---------------------------------------------------------------------------
# stress-test splits


@dataclass
class StressSplit:
    kind: str
    params: dict
    sentences: Corpus = field(default_factory=list)


def length_percentile_threshold(lengths: list[int], pct: float = 90.0) -> int:
    """Nearest-rank percentile, rounding the rank up."""
    return int(np.percentile(np.asarray(lengths), pct, method="higher"))


def build_stress_splits(corpus: Corpus, length_threshold: int = 40,
                        length_pct: float = 90.0) -> dict[str, StressSplit]:
    """Three overlapping stress subsets built from explicit filter rules.

    long: token length at or above the corpus length percentile;
    conflict: at least one positive and one negative aspect in the sentence;
    negation: a negation cue present and token length above the threshold.
    """
    lengths = [len(s.tokens) for s in corpus]
    p_thresh = length_percentile_threshold(lengths, length_pct)
    long_split = StressSplit("long", {"percentile": length_pct, "threshold": p_thresh},
                             [s for s in corpus if len(s.tokens) >= p_thresh])
    conflict_split = StressSplit("conflict", {}, [
        s for s in corpus
        if any(q.label == "positive" for q in s.aspects)
        and any(q.label == "negative" for q in s.aspects)])
    negation_split = StressSplit(
        "negation",
        {"lexicon": list(NEGATION_CUES), "min_length": length_threshold},
        [s for s in corpus
         if has_negation_cue(s.tokens) and len(s.tokens) > length_threshold])
    return {"long": long_split, "conflict": conflict_split, "negation": negation_split}


# ---------------------------------------------------------------------------
# trained-configuration studies (shared protocol)

ABLATION_LABELS = {
    "token_sel": "- Token Sel.",
    "layer_sel": "- Layer Sel.",
    "gated_fusion": "- Gated Fusion",
    "depth_gru": "- DepthGRU",
    "lcp": "- LCP (Pooling)",
    "sparsity": "- Sparsity",
    "span_mask": "- Span Masking",
    "gate_entropy": "- Gate Entropy",
}

VARIANT_LABELS = {
    "full": "full",
    "encoder_only": "encoder_only",
    "substrate_only": "substrate_only",
    "readout_only": "readout_only",
}


def apply_ablation(cfg: ModelConfig, weights: LossWeights,
                   key: str) -> tuple[ModelConfig, LossWeights]:
    if key == "token_sel":
        return replace(cfg, readout=replace(cfg.readout, use_token_sel=False)), weights
    if key == "layer_sel":
        return replace(cfg, readout=replace(cfg.readout, use_layer_sel=False)), weights
    if key == "gated_fusion":
        return replace(cfg, readout=replace(cfg.readout, use_gated_fusion=False)), weights
    if key == "depth_gru":
        return replace(cfg, substrate=replace(cfg.substrate, use_depth_gru=False)), weights
    if key == "lcp":
        return replace(cfg, substrate=replace(cfg.substrate, use_local_conv=False)), weights
    if key == "sparsity":
        return cfg, replace(weights, sparsity=0.0)
    if key == "span_mask":
        return cfg, replace(weights, span_mask=0.0)
    if key == "gate_entropy":
        return cfg, replace(weights, gate_entropy=0.0)
    raise ConfigError(f"unknown ablation '{key}'; choose from {sorted(ABLATION_LABELS)}")


def train_configuration(cfg: ModelConfig, train_corpus: Corpus, test_corpus: Corpus,
                        vocab: Vocab, tcfg: TrainConfig,
                        weights: LossWeights) -> tuple[SentimentModel, float]:
    """One training run; returns the model restored to its best epoch."""
    model = SentimentModel(cfg)
    result = train(model, train_corpus, test_corpus, vocab, tcfg, weights)
    model.load_state(result.best_state)
    return model, result.best_report.macro_f1


def seed_sweep(cfg: ModelConfig, train_corpus, test_corpus, vocab, tcfg,
               weights, seeds: list[int],
               eval_corpus: Corpus | None = None) -> list[float]:
    """Train one configuration per seed; model init and shuffling both reseed."""
    scores = []
    for seed in seeds:
        run_cfg = replace(cfg, seed=seed)
        run_tcfg = replace(tcfg, seed=seed)
        model, mf1 = train_configuration(run_cfg, train_corpus, test_corpus,
                                         vocab, run_tcfg, weights)
        if eval_corpus is not None:
            report, _ = evaluate_model(model, eval_corpus, vocab)
            mf1 = report.macro_f1
        scores.append(mf1)
    return scores


def ablation_study(cfg: ModelConfig, train_corpus, test_corpus, vocab, tcfg,
                   weights, seeds: list[int],
                   keys: list[str] | None = None) -> list[dict]:
    keys = keys or list(ABLATION_LABELS)
    full_scores = seed_sweep(cfg, train_corpus, test_corpus, vocab, tcfg,
                             weights, seeds)
    rows = [{"config": "full", "per_seed": full_scores,
             "mf1_mean": float(np.mean(full_scores)), "delta": 0.0}]
    for key in keys:
        ab_cfg, ab_weights = apply_ablation(cfg, weights, key)
        scores = seed_sweep(ab_cfg, train_corpus, test_corpus, vocab, tcfg,
                            ab_weights, seeds)
        rows.append({"config": ABLATION_LABELS[key], "per_seed": scores,
                     "mf1_mean": float(np.mean(scores)),
                     "delta": float(np.mean(scores) - np.mean(full_scores))})
    return rows


def component_study(cfg: ModelConfig, train_corpus, test_corpus, vocab, tcfg,
                    weights, seeds: list[int]) -> list[dict]:
    rows = []
    for variant in VARIANT_LABELS:
        scores = seed_sweep(replace(cfg, variant=variant), train_corpus,
                            test_corpus, vocab, tcfg, weights, seeds)
        rows.append({"config": VARIANT_LABELS[variant], "per_seed": scores,
                     "mf1_mean": float(np.mean(scores))})
    return rows


def layer_order_study(cfg: ModelConfig, train_corpus, test_corpus, vocab, tcfg,
                      weights, seeds: list[int],
                      eval_corpus: Corpus | None = None,
                      orders=("normal", "reversed", "shuffled")) -> list[dict]:
    """Same data, protocol, and seeds for every recurrence input order.

    The shuffled order draws its fixed permutation from the training seed.
    """
    rows = []
    for order in orders:
        scores = []
        for seed in seeds:
            sub = replace(cfg.substrate, layer_order=order, shuffle_seed=seed)
            run_cfg = replace(cfg, substrate=sub, seed=seed)
            run_tcfg = replace(tcfg, seed=seed)
            model, mf1 = train_configuration(run_cfg, train_corpus, test_corpus,
                                             vocab, run_tcfg, weights)
            if eval_corpus is not None:
                report, _ = evaluate_model(model, eval_corpus, vocab)
                mf1 = report.macro_f1
            scores.append(mf1)
        rows.append({"config": order, "per_seed": scores,
                     "mf1_mean": float(np.mean(scores))})
    return rows


def k_sweep(cfg: ModelConfig, train_corpus, test_corpus, vocab, tcfg, weights,
            k_values: list[int], seeds: list[int],
            latency_sample: int = 32) -> list[dict]:
    """Depth-budget sensitivity: per-K accuracy, MF1, and median read latency."""
    rows = []
    for k in k_values:
        if k > cfg.encoder.layers:
            raise ConfigError(f"K={k} exceeds encoder layers {cfg.encoder.layers}")
        accs, mf1s = [], []
        lat = None
        for seed in seeds:
            run_cfg = replace(cfg, substrate=replace(cfg.substrate, k=k), seed=seed)
            run_tcfg = replace(tcfg, seed=seed)
            model, _ = train_configuration(run_cfg, train_corpus, test_corpus,
                                           vocab, run_tcfg, weights)
            report, _ = evaluate_model(model, test_corpus, vocab)
            accs.append(report.accuracy)
            mf1s.append(report.macro_f1)
            if lat is None:
                lat = _median_sentence_latency(model, test_corpus, vocab, latency_sample)
        rows.append({"k": k, "acc_mean": float(np.mean(accs)),
                     "mf1_mean": float(np.mean(mf1s)), "p50_latency_s": lat})
    return rows


def _median_sentence_latency(model, corpus, vocab, sample: int) -> float:
    times = []
    for s in corpus[:sample]:
        ids = vocab.encode(s.tokens)
        t0 = time.perf_counter()
        model.infer_sentence(ids, s.aspects, s.id)
        times.append(time.perf_counter() - t0)
    return float(np.median(times)) if times else 0.0
