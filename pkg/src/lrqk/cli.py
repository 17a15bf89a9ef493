"""Command-line front end: factorization, simulation, and diagnostics.

All subcommands consume either a binary trace file (--trace) or a
synthetic workload described by flags, never both. Heads fan out across a
thread pool capped by the LRQK_THREADS environment variable; outputs are
written sequentially in head order, so identical arguments and seeds give
byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from lrqk.cache import write_stats_csv
from lrqk.decode import DecodeConfig
from lrqk.errors import CorruptTraceError, UnsupportedVersionError
from lrqk.prefill import (
    InitStrategy,
    PrefillConfig,
    factor_residuals,
    prefill_run,
)
from lrqk.session import SessionConfig, run_simulation, summarize, write_report_csv
from lrqk.workload import (
    SyntheticSpec,
    as_heads,
    gen_recency_biased,
    load_trace,
    neighbor_attention_profile,
    save_trace,
    singular_spectrum,
    write_profile_csv,
    write_spectrum_csv,
)

_PREFILL_DEFAULTS = PrefillConfig()
_DECODE_DEFAULTS = DecodeConfig()
_SESSION_DEFAULTS = SessionConfig()

_SYNTH_DEFAULTS = {
    "length": 256,
    "dim": 64,
    "rank_true": 16,
    "decay": 0.9,
    "recency": 0.0,
    "scale": 1.0,
    "seed": 0,
    "heads": 1,
}


def _add_synth_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--length", type=int, help="tokens per head (synthetic)")
    p.add_argument("--dim", type=int, help="head dimension (synthetic)")
    p.add_argument("--rank-true", type=int, help="exact rank of generated Q/K")
    p.add_argument("--decay", type=float, help="singular value ratio in (0, 1]")
    p.add_argument("--recency", type=float, help="recency bias strength (>= 0)")
    p.add_argument("--scale", type=float, help="largest singular value (> 0)")
    p.add_argument("--seed", type=int, help="workload seed (head h uses seed+h)")
    p.add_argument("--heads", type=int, help="number of heads to generate")


def _add_source_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trace", type=Path, help="read heads from a trace file")
    _add_synth_args(p)


def _add_prefill_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rank", type=int, default=_PREFILL_DEFAULTS.rank)
    p.add_argument("--lambda-pq", type=float, default=_PREFILL_DEFAULTS.lambda_q)
    p.add_argument("--lambda-pk", type=float, default=_PREFILL_DEFAULTS.lambda_k)
    p.add_argument("--max-iter", type=int, default=_PREFILL_DEFAULTS.max_iter)
    p.add_argument("--tol", type=float, default=_PREFILL_DEFAULTS.tol)
    p.add_argument(
        "--init",
        choices=["randn", "top", "topcol"],
        default=_PREFILL_DEFAULTS.init.kind,
    )
    p.add_argument("--init-seed", type=int, default=_PREFILL_DEFAULTS.init.seed)


def _synth_spec(args, head: int) -> SyntheticSpec:
    vals = {
        name: getattr(args, name) if getattr(args, name) is not None else default
        for name, default in _SYNTH_DEFAULTS.items()
    }
    return SyntheticSpec(
        l=vals["length"],
        d=vals["dim"],
        r_true=vals["rank_true"],
        decay=vals["decay"],
        recency_strength=vals["recency"],
        seed=vals["seed"] + head,
        scale=vals["scale"],
    )


def _head_count(args) -> int:
    return args.heads if args.heads is not None else _SYNTH_DEFAULTS["heads"]


def _load_heads(args, parser: argparse.ArgumentParser):
    """Resolve the input source into a list of (Q, K, V) heads."""
    if args.trace is not None:
        synth_given = [
            name for name in _SYNTH_DEFAULTS if getattr(args, name) is not None
        ]
        if synth_given:
            parser.error(
                "--trace and synthetic workload flags are mutually exclusive "
                f"(got {', '.join('--' + n.replace('_', '-') for n in synth_given)})"
            )
        return as_heads(load_trace(args.trace))
    return [gen_recency_biased(_synth_spec(args, h)) for h in range(_head_count(args))]


def _pool_size(n_heads: int) -> int:
    cap = os.environ.get("LRQK_THREADS")
    workers = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(workers, n_heads))


def _fan_out(fn, heads):
    """Run fn over the heads, preserving head order in the result list."""
    if len(heads) == 1:
        return [fn(0, heads[0])]
    with ThreadPoolExecutor(max_workers=_pool_size(len(heads))) as pool:
        return list(pool.map(lambda ih: fn(*ih), enumerate(heads)))


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prefill_config(args) -> PrefillConfig:
    return PrefillConfig(
        rank=args.rank,
        lambda_q=args.lambda_pq,
        lambda_k=args.lambda_pk,
        max_iter=args.max_iter,
        tol=args.tol,
        init=InitStrategy(kind=args.init, seed=args.init_seed),
    )


def cmd_synth(args, parser) -> int:
    heads = [gen_recency_biased(_synth_spec(args, h)) for h in range(_head_count(args))]
    tensors = []
    for Q, K, V in heads:
        tensors += [("q", Q), ("k", K), ("v", V)]
    save_trace(args.out, tensors)
    print(f"wrote {len(heads)} head(s) to {args.out}")
    return 0


def cmd_factorize(args, parser) -> int:
    heads = _load_heads(args, parser)
    cfg = _prefill_config(args)
    runs = _fan_out(lambda h, qkv: prefill_run(qkv[0], qkv[1], cfg), heads)
    out = _out_dir(args)
    with open(out / "lagrangian.csv", "w", newline="") as fh:
        fh.write("head,sweep,lagrangian\n")
        for h, run in enumerate(runs):
            for sweep, value in enumerate(run.objective):
                fh.write(f"{h},{sweep},{value!r}\n")
    with open(out / "residuals.csv", "w", newline="") as fh:
        fh.write("head,rel_err_q,rel_err_k,rel_err_qk\n")
        for h, (run, (Q, K, _)) in enumerate(zip(runs, heads)):
            rq, rk, rqk = factor_residuals(Q, K, run.factors)
            fh.write(f"{h},{rq!r},{rk!r},{rqk!r}\n")
    for h, run in enumerate(runs):
        tag = "converged" if run.converged else "max-iter"
        print(f"head {h}: {run.sweeps} sweep(s), {tag}, objective {run.objective[-1]:.6g}")
    return 0


def cmd_simulate(args, parser) -> int:
    heads = _load_heads(args, parser)
    cfg = SessionConfig(
        prefill=_prefill_config(args),
        decode=DecodeConfig(
            lambda_1=args.lambda_d1,
            lambda_2=args.lambda_d2,
            max_iter=args.max_iter,
            tol=args.tol,
        ),
        k_budget=args.topk,
        lite_budget=args.lite,
    )
    total = heads[0][0].shape[0]
    prompt_len = args.prompt_len if args.prompt_len is not None else total // 2
    metrics = not args.no_metrics

    def one(h, qkv):
        Q, K, V = qkv
        return run_simulation(
            Q, K, V, prompt_len, cfg, steps=args.steps, compute_metrics=metrics
        )

    results = _fan_out(one, heads)
    out = _out_dir(args)
    per_head = []
    step_rates = []
    for h, res in enumerate(results):
        write_report_csv(out / f"report_h{h:03d}.csv", res.reports)
        write_stats_csv(out / f"cache_h{h:03d}.csv", res.stats)
        per_head.append(summarize(res, cfg))
        step_rates += [m / s for _, m, s in res.stats.per_step if s]

    counts, edges = np.histogram(step_rates, bins=20, range=(0.0, 1.0))
    with open(out / "miss_hist.csv", "w", newline="") as fh:
        fh.write("bin_lo,bin_hi,count\n")
        for i, c in enumerate(counts):
            fh.write(f"{edges[i]!r},{edges[i + 1]!r},{int(c)}\n")

    c_miss = sum(r.stats.c_miss for r in results)
    c_total = sum(r.stats.c_total for r in results)
    errs = [rep.output_err for res in results for rep in res.reports]
    recalls = [rep.recall_vs_exact for res in results for rep in res.reports]
    have_metrics = metrics and bool(errs) and not any(math.isnan(e) for e in errs)
    summary = {
        "heads": len(results),
        "prompt_len": prompt_len,
        "steps_per_head": len(results[0].reports),
        "mean_miss_rate": c_miss / c_total if c_total else None,
        "mean_recall": float(np.mean(recalls)) if have_metrics else None,
        "p50_output_err": float(np.percentile(errs, 50)) if have_metrics else None,
        "p95_output_err": float(np.percentile(errs, 95)) if have_metrics else None,
        "config": asdict(cfg),
        "per_head": per_head,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    rate = summary["mean_miss_rate"]
    print(
        f"{len(results)} head(s), {summary['steps_per_head']} step(s), "
        f"miss rate {rate if rate is None else format(rate, '.4f')}"
    )
    return 0


def cmd_spectrum(args, parser) -> int:
    heads = _load_heads(args, parser)
    which = 0 if args.role == "q" else 1
    spectra = _fan_out(lambda h, qkv: singular_spectrum(qkv[which]), heads)
    shapes = {s.shape for s in spectra}
    if len(shapes) != 1:
        raise ValueError(f"heads disagree on spectrum length: {shapes}")
    out = _out_dir(args)
    write_spectrum_csv(out / "spectrum.csv", np.mean(spectra, axis=0))
    with open(out / "spectrum_per_head.csv", "w", newline="") as fh:
        fh.write("head,index,sigma\n")
        for h, sig in enumerate(spectra):
            for i, s in enumerate(sig):
                fh.write(f"{h},{i},{float(s)!r}\n")
    print(f"wrote spectra for {len(spectra)} head(s) to {out}")
    return 0


def cmd_recency(args, parser) -> int:
    heads = _load_heads(args, parser)
    profiles = _fan_out(
        lambda h, qkv: neighbor_attention_profile(qkv[0], qkv[1], args.window), heads
    )
    out = _out_dir(args)
    write_profile_csv(out / "profile.csv", np.mean(profiles, axis=0))
    print(f"wrote window-{args.window} profile for {len(profiles)} head(s) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lrqk",
        description="Low-rank query/key attention simulator and diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic workload to a trace file")
    _add_synth_args(p)
    p.add_argument("--out", type=Path, required=True, help="trace file to write")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("factorize", help="factor the prompt and report residuals")
    _add_source_args(p)
    _add_prefill_args(p)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_factorize)

    p = sub.add_parser("simulate", help="full prefill + decode cache simulation")
    _add_source_args(p)
    _add_prefill_args(p)
    p.add_argument("--topk", type=int, default=_SESSION_DEFAULTS.k_budget)
    p.add_argument("--lite", type=int, default=_SESSION_DEFAULTS.lite_budget)
    p.add_argument("--lambda-d1", type=float, default=_DECODE_DEFAULTS.lambda_1)
    p.add_argument("--lambda-d2", type=float, default=_DECODE_DEFAULTS.lambda_2)
    p.add_argument("--prompt-len", type=int, help="prompt rows (default: half)")
    p.add_argument("--steps", type=int, help="decode steps (default: the rest)")
    p.add_argument(
        "--no-metrics",
        action="store_true",
        help="skip per-step oracle metrics (faster for long runs)",
    )
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("spectrum", help="singular value spectrum CSV")
    _add_source_args(p)
    p.add_argument("--role", choices=["q", "k"], default="k")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("recency", help="neighbor attention profile CSV")
    _add_source_args(p)
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_recency)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (CorruptTraceError, UnsupportedVersionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
