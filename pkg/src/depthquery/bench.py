"""Amortization cost model, FLOPs accounting, and the latency bench harness.

The cost model splits a sentence with M aspect queries into a fixed block
paid once (encode, substrate construction, context reorganization) and a
lightweight per-aspect read. The non-reuse comparator re-pays the sentence
encoding for every aspect:

    C_nonreuse = M * (c_enc + c_ctx + c_read)
    C_reuse    = (c_enc + c_dora + c_ctx) + M * c_read

Two measurement modes exist. The real mode executes actual forward passes
per arrival; its baseline recomputes the full pipeline per aspect so both
modes produce bit-identical predictions, and its cost-model prediction folds
substrate construction into the re-paid block to match what actually runs.
The simulated mode drives a single-server FIFO queue straight from a
CostProfile and reproduces the closed-form speedup exactly when there is no
queueing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DomainError, InputError
from .model import SentimentModel
from .readout import AspectQuery


@dataclass
class CostProfile:
    c_enc: float
    c_dora: float
    c_ctx: float
    c_read: float
    unit: str = "seconds"

    def __post_init__(self):
        if min(self.c_enc, self.c_dora, self.c_ctx, self.c_read) < 0:
            raise ConfigError("cost components must be nonnegative")

    def merged_fixed(self) -> "CostProfile":
        """Fold substrate construction into the encoder component.

        This is the profile matching a baseline that rebuilds the substrate
        per aspect (required for identical predictions in the real bench).
        """
        return CostProfile(self.c_enc + self.c_dora, 0.0, self.c_ctx,
                           self.c_read, self.unit)


def model_speedup(profile: CostProfile, m: int) -> tuple[float, float]:
    """Closed-form amortization: (speedup, flops_reduction) at M aspects."""
    if m < 1:
        raise DomainError(f"aspect count must be >= 1, got {m}")
    nonreuse = m * (profile.c_enc + profile.c_ctx + profile.c_read)
    reuse = (profile.c_enc + profile.c_dora + profile.c_ctx) + m * profile.c_read
    if reuse == 0:
        raise DomainError("reuse cost is zero; profile has no work in it")
    return nonreuse / reuse, 1.0 - reuse / nonreuse


# ---------------------------------------------------------------------------
# analytic FLOPs (matmul and convolution terms, 2 FLOPs per multiply-add)


def encoder_flops(d: int, layers: int, ffn_mult: int, n: int) -> int:
    per_block = 8 * n * d * d + 4 * ffn_mult * n * d * d + 4 * n * n * d
    return layers * per_block


def substrate_flops(kernel_sizes, k: int, use_local_conv: bool,
                    use_depth_gru: bool, d: int, n: int) -> int:
    total = 0
    if use_local_conv:
        total += sum(2 * n * d * ks for ks in kernel_sizes)
        total += 2 * n * (len(kernel_sizes) * d) * d
    if use_depth_gru:
        total += 12 * n * d * d * (k - 1)
    return total


def context_flops(d: int, n: int, enabled: bool = True) -> int:
    return (8 * n * d * d + 4 * n * n * d) if enabled else 0


def read_flops(d: int, n: int, k: int, use_token_sel: bool = True,
               use_layer_sel: bool = True, use_gated_fusion: bool = True) -> int:
    total = 2 * d * 3  # classifier
    if use_token_sel:
        total += 2 * n * (2 * d) * d + 2 * n * d * 1
    if use_layer_sel:
        total += 2 * (2 * d) * d + 2 * d * k
    if use_gated_fusion:
        total += 2 * (3 * d) * d + 2 * d * 3
    return total


def flops_profile(model: SentimentModel, n: int) -> CostProfile:
    """Closed-form per-component FLOPs of one sentence of length n."""
    enc = model.cfg.encoder
    sub = model.sub_cfg
    read = model.read_cfg
    return CostProfile(
        c_enc=encoder_flops(enc.d, enc.layers, enc.ffn_mult, n),
        c_dora=substrate_flops(sub.kernel_sizes, sub.k, sub.use_local_conv,
                               sub.use_depth_gru, enc.d, n),
        c_ctx=context_flops(enc.d, n, model.use_context_attn),
        c_read=read_flops(enc.d, n, sub.k, read.use_token_sel,
                          read.use_layer_sel, read.use_gated_fusion),
        unit="flops",
    )


def measured_flops_profile(model: SentimentModel, n: int) -> CostProfile:
    """Instrumented per-component FLOPs from the op-level counters."""
    tokens = np.zeros(n, dtype=np.int64)[None, :]
    query = [AspectQuery(span=(1, 1))]
    sent = np.zeros(1, dtype=np.int64)
    with ad.no_grad():
        with ad.count_flops() as c_enc:
            stack = model.fwd_stack(tokens)
        with ad.count_flops() as c_dora:
            sub = model.fwd_substrate(stack)
        with ad.count_flops() as c_ctx:
            context = model.fwd_context(sub)
        with ad.count_flops() as c_read:
            model.fwd_read(sub, context, query, sent)
    return CostProfile(c_enc.total, c_dora.total, c_ctx.total, c_read.total,
                       unit="flops")


# ---------------------------------------------------------------------------
# wall-clock profiling


def _median_time(fn, warmup: int, iters: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    med = float(np.median(samples))
    if med >= 1e-6:
        return med
    # below timer resolution: widen the inner loop and report the scaled cost
    inner = 200
    samples = []
    for _ in range(max(iters // 4, 5)):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) / inner)
    return float(np.median(samples))


def measure_profile(model: SentimentModel, sample_tokens: list[np.ndarray],
                    warmup: int = 20, iters: int = 100) -> CostProfile:
    """Wall-clock medians of each pipeline component over sample sentences."""
    if not sample_tokens:
        raise InputError("measure_profile needs at least one sample sentence")
    toks = [np.asarray(t)[None, :] for t in sample_tokens]
    idx = {"v": 0}

    def cycle():
        idx["v"] = (idx["v"] + 1) % len(toks)
        return idx["v"]

    with ad.no_grad():
        stacks = [model.fwd_stack(t) for t in toks]
        subs = [model.fwd_substrate(s) for s in stacks]
        ctxs = [model.fwd_context(s) for s in subs]
        query = [AspectQuery(span=(1, 1))]
        sent = np.zeros(1, dtype=np.int64)
        c_enc = _median_time(lambda: model.fwd_stack(toks[cycle()]), warmup, iters)
        c_dora = _median_time(lambda: model.fwd_substrate(stacks[cycle()]), warmup, iters)
        c_ctx = _median_time(lambda: model.fwd_context(subs[cycle()]), warmup, iters)
        c_read = _median_time(
            lambda: model.fwd_read(subs[idx["v"]], ctxs[cycle()], query, sent),
            warmup, iters)
    return CostProfile(c_enc, c_dora, c_ctx, c_read, unit="seconds")


# ---------------------------------------------------------------------------
# workload and queue


@dataclass
class WorkloadSpec:
    m_dist: dict = field(default_factory=lambda: {1: 0.5, 2: 0.3, 4: 0.2})
    length_dist: dict = field(default_factory=lambda: {12: 0.5, 20: 0.3, 28: 0.2})
    rate: float = 50.0            # requests per second
    duration: float = 2.0         # seconds
    arrival: str = "deterministic"  # or "poisson"
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.m_dist.values()) - 1.0) > 1e-9:
            raise ConfigError("aspect-count probabilities must sum to 1")
        if abs(sum(self.length_dist.values()) - 1.0) > 1e-9:
            raise ConfigError("length probabilities must sum to 1")
        if self.rate <= 0 or self.duration <= 0:
            raise ConfigError("rate and duration must be positive")
        if self.arrival not in ("deterministic", "poisson"):
            raise ConfigError("arrival process must be deterministic or poisson")

    def expected_m(self) -> float:
        return sum(m * p for m, p in self.m_dist.items())


@dataclass
class Request:
    arrival: float
    m: int
    length: int


def sample_requests(spec: WorkloadSpec) -> list[Request]:
    rng = np.random.default_rng(spec.seed)
    count = max(1, int(round(spec.rate * spec.duration)))
    if spec.arrival == "deterministic":
        arrivals = np.arange(count) / spec.rate
    else:
        arrivals = np.cumsum(rng.exponential(1.0 / spec.rate, size=count))
    ms = sorted(spec.m_dist)
    mps = [spec.m_dist[m] for m in ms]
    ns = sorted(spec.length_dist)
    nps = [spec.length_dist[n] for n in ns]
    return [Request(arrival=float(a),
                    m=int(ms[rng.choice(len(ms), p=mps)]),
                    length=int(ns[rng.choice(len(ns), p=nps)]))
            for a in arrivals]


def nearest_rank(sorted_vals: np.ndarray, pct: float) -> float:
    if len(sorted_vals) == 0:
        return 0.0
    rank = int(np.ceil(pct / 100.0 * len(sorted_vals)))
    return float(sorted_vals[max(rank - 1, 0)])


@dataclass
class LatencyStats:
    p50: float
    p95: float
    p99: float
    throughput: float
    arrivals: int
    completions: int
    in_flight: int
    saturated: bool
    backlog_seconds: float
    total_service: float


def fifo_queue(arrivals: list[float], services: list[float],
               duration: float) -> LatencyStats:
    """Single-server FIFO: latency percentiles and conservation accounting."""
    finish = 0.0
    latencies = []
    in_flight = 0
    for a, s in zip(arrivals, services):
        start = max(a, finish)
        finish = start + s
        if finish <= duration:
            latencies.append(finish - a)
        else:
            in_flight += 1
    lat = np.sort(np.asarray(latencies))
    total_service = float(np.sum(services))
    backlog = max(0.0, finish - duration)
    horizon = max(duration, finish)
    return LatencyStats(
        p50=nearest_rank(lat, 50), p95=nearest_rank(lat, 95),
        p99=nearest_rank(lat, 99),
        throughput=len(lat) / horizon if horizon > 0 else 0.0,
        arrivals=len(arrivals), completions=len(lat), in_flight=in_flight,
        saturated=total_service > duration and in_flight > 0,
        backlog_seconds=backlog, total_service=total_service)


def simulated_services(profile: CostProfile, requests: list[Request],
                       mode: str) -> list[float]:
    """Service times straight from the cost model (no length dependence)."""
    fixed = profile.c_enc + profile.c_dora + profile.c_ctx
    per_aspect_nonreuse = profile.c_enc + profile.c_ctx + profile.c_read
    if mode == "reuse":
        return [fixed + r.m * profile.c_read for r in requests]
    if mode == "nonreuse":
        return [r.m * per_aspect_nonreuse for r in requests]
    raise ConfigError(f"mode must be reuse or nonreuse, got '{mode}'")


def _random_queries(rng, m: int, n: int) -> list[AspectQuery]:
    positions = rng.choice(n, size=min(m, n), replace=False) + 1
    queries = [AspectQuery(span=(int(p), int(p))) for p in positions]
    while len(queries) < m:
        queries.append(queries[-1])
    return queries


def real_services(model: SentimentModel, requests: list[Request],
                  mode: str, seed: int) -> tuple[list[float], list[list[str]]]:
    """Execute forward passes per request; return service times and predictions.

    reuse: one encode + substrate + context per sentence, then one read per
    aspect. nonreuse: the entire pipeline is recomputed for every aspect, so
    predictions are bit-identical across modes.
    """
    rng = np.random.default_rng(seed)
    vocab_size = model.cfg.encoder.vocab_size
    services = []
    predictions = []
    sent0 = np.zeros(1, dtype=np.int64)
    with ad.no_grad():
        for req in requests:
            tokens = rng.integers(0, vocab_size, size=req.length)[None, :]
            queries = _random_queries(rng, req.m, req.length)
            t0 = time.perf_counter()
            preds = []
            if mode == "reuse":
                stack = model.fwd_stack(tokens)
                sub = model.fwd_substrate(stack)
                context = model.fwd_context(sub)
                for q in queries:
                    read = model.fwd_read(sub, context, [q], sent0)
                    preds.append(read.predictions()[0])
            elif mode == "nonreuse":
                for q in queries:
                    stack = model.fwd_stack(tokens)
                    sub = model.fwd_substrate(stack)
                    context = model.fwd_context(sub)
                    read = model.fwd_read(sub, context, [q], sent0)
                    preds.append(read.predictions()[0])
            else:
                raise ConfigError(f"mode must be reuse or nonreuse, got '{mode}'")
            services.append(time.perf_counter() - t0)
            predictions.append(preds)
    return services, predictions


# ---------------------------------------------------------------------------
# reports


@dataclass
class BenchReport:
    mode: str
    measurement: str                 # real | simulated
    latency: LatencyStats
    simulated_check: LatencyStats | None
    flops_reuse: float
    flops_nonreuse: float
    flops_reduction: float
    speedup_model: float
    speedup_measured: float | None = None
    agreement_ratio: float | None = None

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "measurement": self.measurement,
            "p50": self.latency.p50, "p95": self.latency.p95, "p99": self.latency.p99,
            "throughput": self.latency.throughput,
            "arrivals": self.latency.arrivals,
            "completions": self.latency.completions,
            "in_flight": self.latency.in_flight,
            "saturated": self.latency.saturated,
            "backlog_seconds": self.latency.backlog_seconds,
            "flops_reuse": self.flops_reuse,
            "flops_nonreuse": self.flops_nonreuse,
            "flops_reduction": self.flops_reduction,
            "speedup_model": self.speedup_model,
            "speedup_measured": self.speedup_measured,
            "agreement_ratio": self.agreement_ratio,
        }
        if self.simulated_check is not None:
            out["simulated_p50"] = self.simulated_check.p50
            out["simulated_p95"] = self.simulated_check.p95
        return out


def _expected_flops(model: SentimentModel, workload: WorkloadSpec) -> tuple[float, float]:
    reuse = 0.0
    nonreuse = 0.0
    for n, pn in workload.length_dist.items():
        fp = flops_profile(model, n)
        fixed = fp.c_enc + fp.c_dora + fp.c_ctx
        for m, pm in workload.m_dist.items():
            reuse += pn * pm * (fixed + m * fp.c_read)
            nonreuse += pn * pm * (m * (fp.c_enc + fp.c_ctx + fp.c_read))
    return reuse, nonreuse


def run_bench(model: SentimentModel | None, workload: WorkloadSpec, mode: str,
              profile: CostProfile | None = None,
              measurement: str = "real") -> BenchReport:
    """Drive one mode through the FIFO harness and cross-check via simulation."""
    requests = sample_requests(workload)
    arrivals = [r.arrival for r in requests]
    em = workload.expected_m()
    if measurement == "real":
        if model is None:
            raise InputError("real measurement requires a model")
        if profile is None:
            lengths = sorted(workload.length_dist)
            samples = [np.zeros(n, dtype=np.int64) for n in lengths]
            profile = measure_profile(model, samples, warmup=5, iters=20)
        services, _ = real_services(model, requests, mode, workload.seed)
        pred_profile = profile.merged_fixed()
    elif measurement == "simulated":
        if profile is None:
            raise InputError("simulated measurement requires a cost profile")
        services = simulated_services(profile, requests, mode)
        pred_profile = profile
    else:
        raise ConfigError("measurement must be 'real' or 'simulated'")
    stats = fifo_queue(arrivals, services, workload.duration)
    sim_check = fifo_queue(arrivals, simulated_services(profile, requests, mode),
                           workload.duration)
    if model is not None:
        flops_reuse, flops_nonreuse = _expected_flops(model, workload)
    else:
        fixed = profile.c_enc + profile.c_dora + profile.c_ctx
        flops_reuse = fixed + em * profile.c_read
        flops_nonreuse = em * (profile.c_enc + profile.c_ctx + profile.c_read)
    m_ref = max(1, int(round(em)))
    speedup_model, _ = model_speedup(pred_profile, m_ref)
    return BenchReport(
        mode=mode, measurement=measurement, latency=stats, simulated_check=sim_check,
        flops_reuse=flops_reuse, flops_nonreuse=flops_nonreuse,
        flops_reduction=1.0 - flops_reuse / flops_nonreuse if flops_nonreuse else 0.0,
        speedup_model=speedup_model)


def compare_modes(model: SentimentModel | None, workload: WorkloadSpec,
                  profile: CostProfile | None = None,
                  measurement: str = "real") -> dict:
    """Run reuse and nonreuse on one request sequence; measured vs predicted."""
    requests = sample_requests(workload)
    arrivals = [r.arrival for r in requests]
    if measurement == "real":
        if profile is None:
            lengths = sorted(workload.length_dist)
            samples = [np.zeros(n, dtype=np.int64) for n in lengths]
            profile = measure_profile(model, samples, warmup=5, iters=20)
        reuse_services, reuse_preds = real_services(model, requests, "reuse", workload.seed)
        non_services, non_preds = real_services(model, requests, "nonreuse", workload.seed)
        pred_profile = profile.merged_fixed()
        predictions_match = reuse_preds == non_preds
    else:
        if profile is None:
            raise InputError("simulated comparison requires a cost profile")
        reuse_services = simulated_services(profile, requests, "reuse")
        non_services = simulated_services(profile, requests, "nonreuse")
        pred_profile = profile
        predictions_match = True
    measured = float(np.sum(non_services) / np.sum(reuse_services))
    em = workload.expected_m()
    m_ref = max(1, int(round(em)))
    predicted, reduction = model_speedup(pred_profile, m_ref)
    return {
        "measured_speedup": measured,
        "predicted_speedup": predicted,
        "agreement_ratio": measured / predicted,
        "flops_reduction_model": reduction,
        "predictions_match": predictions_match,
        "reuse_stats": fifo_queue(arrivals, reuse_services, workload.duration),
        "nonreuse_stats": fifo_queue(arrivals, non_services, workload.duration),
        "profile": profile,
    }


SWEEP_COLUMNS = ["m", "p50_reuse", "p50_nonreuse", "p95_reuse", "p95_nonreuse",
                 "speedup_measured", "speedup_model", "flops_reduction",
                 "throughput_ratio"]


def sweep_m(model: SentimentModel | None, m_values: list[int],
            workload: WorkloadSpec, profile: CostProfile | None = None,
            measurement: str = "real") -> list[dict]:
    """Amortization curve: one row per aspect count M."""
    if not m_values:
        raise InputError("sweep requires at least one M value")
    if measurement == "real" and profile is None:
        lengths = sorted(workload.length_dist)
        samples = [np.zeros(n, dtype=np.int64) for n in lengths]
        profile = measure_profile(model, samples, warmup=5, iters=20)
    rows = []
    for m in m_values:
        wl = replace(workload, m_dist={m: 1.0})
        cmp = compare_modes(model, wl, profile=profile, measurement=measurement)
        if model is not None:
            flops_reuse, flops_nonreuse = _expected_flops(model, wl)
            flops_reduction = 1.0 - flops_reuse / flops_nonreuse
        else:
            _, flops_reduction = model_speedup(profile, m)
        rows.append({
            "m": m,
            "p50_reuse": cmp["reuse_stats"].p50,
            "p50_nonreuse": cmp["nonreuse_stats"].p50,
            "p95_reuse": cmp["reuse_stats"].p95,
            "p95_nonreuse": cmp["nonreuse_stats"].p95,
            "speedup_measured": cmp["measured_speedup"],
            "speedup_model": cmp["predicted_speedup"],
            "flops_reduction": flops_reduction,
            "throughput_ratio": cmp["measured_speedup"],
        })
    return rows
