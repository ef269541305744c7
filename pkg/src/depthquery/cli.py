"""Command-line entry point wiring the modules into reproducible recipes.

Subcommands: generate, train, eval, probe, bench, stats, trace. Every run
writes a resolved copy of its effective configuration next to its outputs.
Errors are emitted to stderr as single-line JSON; exit codes are 0 success,
1 usage/config error, 2 input/format error, 3 runtime error.

Heavy imports are deferred until after --threads is applied so BLAS thread
pools can be pinned for fair timing.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message}),
              file=sys.stderr)
        raise SystemExit(1)


def _load_json(path: str) -> dict:
    from .errors import InputError
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise InputError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed JSON in {path}: {exc.msg}") from exc


def _build(cls, data: dict, where: str):
    from .errors import ConfigError
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in section '{where}'")
    return cls(**data)


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _write_csv(path: str, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _model_config(section: dict, vocab_size: int | None = None,
                  max_len: int | None = None):
    from .encoder import EncoderConfig
    from .model import ModelConfig
    from .readout import ReadoutConfig
    from .substrate import SubstrateConfig
    enc_data = dict(section.get("encoder", {}))
    if vocab_size is not None:
        enc_data["vocab_size"] = max(enc_data.get("vocab_size", 0), vocab_size)
    if max_len is not None:
        enc_data["max_len"] = max(enc_data.get("max_len", 0), max_len)
    sub_data = dict(section.get("substrate", {}))
    if "kernel_sizes" in sub_data:
        sub_data["kernel_sizes"] = tuple(sub_data["kernel_sizes"])
    return ModelConfig(
        encoder=_build(EncoderConfig, enc_data, "model.encoder"),
        substrate=_build(SubstrateConfig, sub_data, "model.substrate"),
        readout=_build(ReadoutConfig, section.get("readout", {}), "model.readout"),
        variant=section.get("variant", "full"),
        seed=int(section.get("seed", 0)),
        dtype=section.get("dtype", "float32"),
    )


def _resolved_model_section(cfg) -> dict:
    out = dataclasses.asdict(cfg)
    out["substrate"]["kernel_sizes"] = list(cfg.substrate.kernel_sizes)
    return out


def _load_corpus(path: str):
    from .data import ingest_jsonl
    corpus, warnings = ingest_jsonl(path)
    return corpus, warnings


def _load_run(run_dir: str):
    """Rebuild a trained model plus vocab from a training output directory."""
    from .data import Vocab
    from .model import SentimentModel
    resolved = _load_json(os.path.join(run_dir, "resolved_config.json"))
    vocab = Vocab.load(os.path.join(run_dir, "vocab.json"))
    cfg = _model_config(resolved["model"])
    model = SentimentModel(cfg)
    model.load(os.path.join(run_dir, "checkpoint.dabs"))
    return model, vocab, resolved


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    from .data import GenSpec, Lexicons, export_jsonl, generate, manifest_for
    section = _load_json(args.config) if args.config else {}
    data = dict(section)
    if "m_dist" in data:
        data["m_dist"] = {int(k): v for k, v in data["m_dist"].items()}
    if "class_probs" in data:
        data["class_probs"] = tuple(data["class_probs"])
    if "lexicons" in data:
        data["lexicons"] = _build(Lexicons, data["lexicons"], "lexicons")
    if args.seed is not None:
        data["seed"] = args.seed
    if args.n is not None:
        data["n_sentences"] = args.n
    spec = _build(GenSpec, data, "generate")
    corpus = generate(spec)
    out = _out_dir(args)
    export_jsonl(corpus, os.path.join(out, "corpus.jsonl"))
    _write_json(os.path.join(out, "manifest.json"), manifest_for(spec))
    _write_json(os.path.join(out, "resolved_config.json"), manifest_for(spec))
    print(json.dumps({"sentences": len(corpus),
                      "path": os.path.join(out, "corpus.jsonl")}))
    return 0


def cmd_stats(args) -> int:
    from .data import stats
    corpus, _ = _load_corpus(args.data)
    report = stats(corpus).to_dict()
    out = _out_dir(args)
    _write_json(os.path.join(out, "stats.json"), report)
    print(json.dumps(report))
    return 0


def cmd_train(args) -> int:
    from .data import Vocab
    from .model import SentimentModel
    from .training import (LossWeights, TrainConfig, train, write_metrics_csv)
    section = _load_json(args.config) if args.config else {}
    train_corpus, warn_train = _load_corpus(args.train)
    test_corpus, warn_test = _load_corpus(args.test)
    vocab = Vocab.from_corpus(train_corpus)
    max_len = max(len(s.tokens) for s in train_corpus + test_corpus)
    cfg = _model_config(section.get("model", {}), vocab_size=vocab.size,
                        max_len=max_len)
    tcfg = _build(TrainConfig, section.get("train", {}), "train")
    weights = _build(LossWeights, section.get("weights", {}), "weights")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
        tcfg = dataclasses.replace(tcfg, seed=args.seed)

    model = SentimentModel(cfg)
    result = train(model, train_corpus, test_corpus, vocab, tcfg, weights)
    out = _out_dir(args)
    model.load_state(result.best_state)
    model.save(os.path.join(out, "checkpoint.dabs"))
    vocab.save(os.path.join(out, "vocab.json"))
    write_metrics_csv(os.path.join(out, "metrics.csv"), result.rows)
    resolved = {
        "model": _resolved_model_section(cfg),
        "train": dataclasses.asdict(tcfg),
        "weights": dataclasses.asdict(weights),
        "data": {"train": args.train, "test": args.test,
                 "ingest_warnings": len(warn_train) + len(warn_test)},
    }
    _write_json(os.path.join(out, "resolved_config.json"), resolved)
    best = result.best_report
    summary = {
        "best_epoch": result.best_epoch,
        "protocol": "best test-set score within the training budget (no dev split)",
        "acc": best.accuracy, "mf1": best.macro_f1,
        "per_class": best.per_class, "seed": tcfg.seed,
    }
    _write_json(os.path.join(out, "train_summary.json"), summary)
    print(json.dumps({"best_epoch": result.best_epoch, "acc": best.accuracy,
                      "mf1": best.macro_f1}))
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate_model
    model, vocab, _ = _load_run(args.run)
    corpus, _ = _load_corpus(args.data)
    report, loss = evaluate_model(model, corpus, vocab)
    out = _out_dir(args)
    payload = {
        "accuracy": report.accuracy, "macro_f1": report.macro_f1,
        "per_class": report.per_class,
        "confusion": report.confusion.tolist(),
        "n_instances": report.n_instances, "loss": loss,
    }
    _write_json(os.path.join(out, "eval_report.json"), payload)
    _write_json(os.path.join(out, "resolved_config.json"),
                {"run": args.run, "data": args.data})
    print(json.dumps({"acc": report.accuracy, "mf1": report.macro_f1}))
    return 0


def cmd_trace(args) -> int:
    from .training import evaluate_model
    model, vocab, _ = _load_run(args.run)
    corpus, _ = _load_corpus(args.data)
    report, _, traces = evaluate_model(model, corpus, vocab, collect_traces=True)
    out = _out_dir(args)
    path = os.path.join(out, "traces.jsonl")
    with open(path, "w") as fh:
        for tr in traces:
            fh.write(json.dumps(tr.to_record()) + "\n")
    _write_json(os.path.join(out, "resolved_config.json"),
                {"run": args.run, "data": args.data})
    print(json.dumps({"traces": len(traces), "path": path, "mf1": report.macro_f1}))
    return 0


def _seeds(args) -> list[int]:
    return [int(s) for s in args.seeds.split(",")]


def cmd_probe(args) -> int:
    import numpy as np

    from .probes import (ABLATION_LABELS, RegionBands, ablation_study,
                         component_study, k_sweep, layer_order_study,
                         negation_shift, rand2l_trials, region_sweep,
                         single_layer_controls)
    from .training import LossWeights, TrainConfig, evaluate_model
    out = _out_dir(args)
    section = _load_json(args.config) if args.config else {}
    resolved = {"kind": args.kind, "config": section, "seeds": args.seeds}
    _write_json(os.path.join(out, "resolved_config.json"), resolved)

    if args.kind in ("regions", "rand2l", "negation_shift"):
        model, vocab, _ = _load_run(args.run)
        corpus, _ = _load_corpus(args.data)
        if args.kind == "regions":
            res = region_sweep(model, corpus, vocab)
            rows = [{"config": model.cfg.variant, "base_mf1": res["base_mf1"],
                     **res["scores"], "delta_best_worst": res["delta_best_worst"],
                     "best_region": res["best_region"]}]
            _write_csv(os.path.join(out, "regions.csv"), rows,
                       ["config", "base_mf1", "shallow", "middle", "deep",
                        "delta_best_worst", "best_region"])
            print(json.dumps(rows[0]))
        elif args.kind == "rand2l":
            res = rand2l_trials(model, corpus, vocab, trials=args.trials,
                                seed=args.seed or 0)
            single = single_layer_controls(model, corpus, vocab)
            base, _ = evaluate_model(model, corpus, vocab)
            row = {"config": model.cfg.variant, "base_mf1": base.macro_f1,
                   "rand2l_mean": res["mean"], "rand2l_std": res["std"],
                   "best_1l": single["best"][0], "best_1l_mf1": single["best"][1],
                   "best_1l_delta": single["best"][1] - base.macro_f1,
                   "worst_1l": single["worst"][0], "worst_1l_mf1": single["worst"][1],
                   "worst_1l_delta": single["worst"][1] - base.macro_f1}
            _write_csv(os.path.join(out, "rand2l.csv"), [row], list(row))
            print(json.dumps(row))
        else:
            _, _, traces = evaluate_model(model, corpus, vocab, collect_traces=True)
            res = negation_shift(traces, corpus)
            _write_json(os.path.join(out, "negation_shift.json"), res)
            print(json.dumps(res))
        return 0

    # training studies
    train_corpus, _ = _load_corpus(args.train)
    test_corpus, _ = _load_corpus(args.test)
    from .data import Vocab
    vocab = Vocab.from_corpus(train_corpus)
    max_len = max(len(s.tokens) for s in train_corpus + test_corpus)
    cfg = _model_config(section.get("model", {}), vocab_size=vocab.size,
                        max_len=max_len)
    tcfg = _build(TrainConfig, section.get("train", {}), "train")
    weights = _build(LossWeights, section.get("weights", {}), "weights")
    seeds = _seeds(args)

    if args.kind == "ablation":
        keys = args.ablate.split(",") if args.ablate else None
        rows = ablation_study(cfg, train_corpus, test_corpus, vocab, tcfg,
                              weights, seeds, keys)
        for row in rows:
            row["per_seed"] = " ".join(f"{v:.4f}" for v in row["per_seed"])
        _write_csv(os.path.join(out, "ablation.csv"), rows,
                   ["config", "mf1_mean", "delta", "per_seed"])
    elif args.kind == "components":
        rows = component_study(cfg, train_corpus, test_corpus, vocab, tcfg,
                               weights, seeds)
        for row in rows:
            row["per_seed"] = " ".join(f"{v:.4f}" for v in row["per_seed"])
        _write_csv(os.path.join(out, "components.csv"), rows,
                   ["config", "mf1_mean", "per_seed"])
    elif args.kind == "layer_order":
        eval_corpus = None
        if args.data:
            eval_corpus, _ = _load_corpus(args.data)
        rows = layer_order_study(cfg, train_corpus, test_corpus, vocab, tcfg,
                                 weights, seeds, eval_corpus)
        for row in rows:
            row["per_seed"] = " ".join(f"{v:.4f}" for v in row["per_seed"])
        _write_csv(os.path.join(out, "layer_order.csv"), rows,
                   ["config", "mf1_mean", "per_seed"])
    elif args.kind == "k_sweep":
        ks = [int(k) for k in args.k_values.split(",")]
        rows = k_sweep(cfg, train_corpus, test_corpus, vocab, tcfg, weights,
                       ks, seeds)
        _write_csv(os.path.join(out, "k_sweep.csv"), rows,
                   ["k", "acc_mean", "mf1_mean", "p50_latency_s"])
    else:
        from .errors import ConfigError
        raise ConfigError(f"unknown probe kind '{args.kind}'")
    print(json.dumps({"kind": args.kind, "rows": len(rows), "out": out}))
    return 0


def cmd_bench(args) -> int:
    from .bench import (CostProfile, SWEEP_COLUMNS, WorkloadSpec, compare_modes,
                        flops_profile, measure_profile, run_bench, sweep_m)
    from .errors import ConfigError
    section = _load_json(args.config) if args.config else {}
    out = _out_dir(args)
    wl_data = dict(section.get("workload", {}))
    for key in ("m_dist", "length_dist"):
        if key in wl_data:
            wl_data[key] = {int(k): v for k, v in wl_data[key].items()}
    if args.seed is not None:
        wl_data["seed"] = args.seed
    workload = _build(WorkloadSpec, wl_data, "workload")

    model = None
    profile = None
    if args.run:
        model, _, _ = _load_run(args.run)
    elif args.measurement == "real" or "model" in section:
        cfg = _model_config(section.get("model", {}))
        from .model import SentimentModel
        model = SentimentModel(cfg)
    if "profile" in section:
        profile = _build(CostProfile, section["profile"], "profile")

    resolved = {"workload": dataclasses.asdict(workload),
                "measurement": args.measurement, "kind": args.kind}
    _write_json(os.path.join(out, "resolved_config.json"), resolved)

    if args.kind == "sweep":
        ms = [int(m) for m in args.m_values.split(",")]
        rows = sweep_m(model, ms, workload, profile=profile,
                       measurement=args.measurement)
        _write_csv(os.path.join(out, "bench_sweep.csv"), rows, SWEEP_COLUMNS)
        print(json.dumps({"rows": len(rows), "out": out}))
    elif args.kind == "load":
        report = run_bench(model, workload, args.mode, profile=profile,
                           measurement=args.measurement)
        cmp = compare_modes(model, workload, profile=profile,
                            measurement=args.measurement)
        payload = report.to_dict()
        payload["speedup_measured"] = cmp["measured_speedup"]
        payload["agreement_ratio"] = cmp["measured_speedup"] / cmp["predicted_speedup"]
        _write_json(os.path.join(out, "bench_report.json"), payload)
        print(json.dumps({"p95": report.latency.p95,
                          "saturated": report.latency.saturated}))
    else:
        raise ConfigError(f"unknown bench kind '{args.kind}'")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="depthquery",
                     description="single-pass multi-aspect sentiment toolkit")
    parser.add_argument("--threads", type=int, default=None,
                        help="pin BLAS/OpenMP worker threads")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("generate", help="emit a synthetic corpus as JSONL")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("stats", help="aspect multiplicity and class statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("train", help="train a model; writes checkpoint and metrics")
    p.add_argument("--config")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on a dataset")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("trace", help="export per-aspect selection traces")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("probe", help="depth controls and configuration studies")
    p.add_argument("--kind", required=True,
                   choices=["ablation", "components", "layer_order", "k_sweep",
                            "regions", "rand2l", "negation_shift"])
    p.add_argument("--config")
    p.add_argument("--train")
    p.add_argument("--test")
    p.add_argument("--data")
    p.add_argument("--run")
    p.add_argument("--ablate")
    p.add_argument("--seeds", default="42,123,456")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--k-values", default="2,4,6,8")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("bench", help="amortization curves and offered-load latency")
    p.add_argument("--kind", default="sweep", choices=["sweep", "load"])
    p.add_argument("--mode", default="reuse", choices=["reuse", "nonreuse"])
    p.add_argument("--measurement", default="simulated",
                   choices=["real", "simulated"])
    p.add_argument("--config")
    p.add_argument("--run")
    p.add_argument("--m-values", default="1,2,4,8")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)
    return parser


def _pin_threads(argv) -> None:
    threads = os.environ.get("DEPTHQUERY_THREADS")
    if "--threads" in argv:
        threads = argv[argv.index("--threads") + 1]
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(threads)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _pin_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import (ConfigError, DepthQueryError, FormatError, InputError)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except (InputError, FormatError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2
    except DepthQueryError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
