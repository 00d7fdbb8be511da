"""Command-line front end: ``navgraph {generate,build,query,bench,analyze}``.

Exit status is 0 on success, 2 on a usage error and 1 when the work itself
fails.  ``--threads`` defaults to ``$NAVGRAPH_THREADS`` and caps BLAS
parallelism for ground truth; timed query loops always run on one thread.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

from navgraph import bench, hubness
from navgraph.flat_index import build_flat, from_base_layer
from navgraph.graph import load_index, save_index
from navgraph.hier_index import BuildParams, HierIndex
from navgraph.synth import SynthSpec, generate
from navgraph.vecstore import Metric, load_vectors, save_ivecs, save_vectors


class UsageError(Exception):
    """Bad arguments detected after parsing (missing files, inconsistent flags)."""


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _default_threads():
    env = os.environ.get("NAVGRAPH_THREADS")
    if env is None:
        return None
    try:
        return max(1, int(env))
    except ValueError:
        return None


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--json-config", action="store_true",
                   help="print the resolved configuration as JSON before running")
    p.add_argument("--threads", type=_positive, default=_default_threads(),
                   help="cap on build/ground-truth threads (default: $NAVGRAPH_THREADS)")


def _add_build_params(p: argparse.ArgumentParser) -> None:
    p.add_argument("--metric", choices=["l2", "angular"], default="l2")
    p.add_argument("--m", type=_positive, default=32, help="upper-layer degree bound")
    p.add_argument("--ef-construction", type=_positive, default=100)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="navgraph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a seeded synthetic dataset")
    p.add_argument("--law", choices=["uniform", "normal"], default="normal")
    p.add_argument("--n", type=_positive, required=True)
    p.add_argument("--d", type=_positive, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help=".fvecs or .f32 output path")
    _add_common(p)

    p = sub.add_parser("build", help="build an index and write it to disk")
    p.add_argument("--data", required=True)
    _add_build_params(p)
    p.add_argument("--index-type", choices=["hier", "flat", "both"], default="hier")
    p.add_argument("--flat-source", choices=["base_layer", "direct"], default="base_layer",
                   help="flat index from the hierarchical base layer or built directly")
    p.add_argument("--out", required=True,
                   help="index path; with --index-type both, a prefix for .hier/.flat files")
    _add_common(p)

    p = sub.add_parser("query", help="search an index, or compute exact neighbours")
    p.add_argument("--index", help="index file (omit with --brute-force)")
    p.add_argument("--data", help="dataset for --brute-force")
    p.add_argument("--queries", required=True)
    p.add_argument("--metric", choices=["l2", "angular"], default="l2")
    p.add_argument("--brute-force", action="store_true",
                   help="exact search over --data (writes ground truth)")
    p.add_argument("--k", type=_positive, default=100)
    p.add_argument("--ef", type=_positive, default=200)
    p.add_argument("--gt", help="ivecs ground truth; prints mean recall")
    p.add_argument("--trace", help="write per-query visit traces (CSV)")
    p.add_argument("--out", required=True, help="ivecs output of neighbour ids")
    _add_common(p)

    p = sub.add_parser("bench", help="recall/latency sweep of hierarchical vs flat")
    p.add_argument("--data", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gt", help="ivecs ground truth (default: brute force)")
    _add_build_params(p)
    p.add_argument("--ef", type=_int_list, default=[100, 200, 400])
    p.add_argument("--k", type=_positive, default=100)
    p.add_argument("--index-type", choices=["hier", "flat", "both"], default="both")
    p.add_argument("--flat-source", choices=["base_layer", "direct"], default="base_layer")
    p.add_argument("--repetitions", type=_positive, default=1)
    p.add_argument("--name", help="dataset label in the output (default: data file stem)")
    p.add_argument("--out", required=True, help="CSV output; JSON goes next to it")
    _add_common(p)

    p = sub.add_parser("analyze", help="hubness analyses")
    asub = p.add_subparsers(dest="mode", required=True)

    a = asub.add_parser("hubness", help="access skewness, hub tests and bin curve")
    a.add_argument("--index", required=True)
    a.add_argument("--queries", required=True)
    a.add_argument("--k", type=_positive, default=100)
    a.add_argument("--ef", type=_positive, default=200)
    a.add_argument("--percentile", type=float, default=99.0)
    a.add_argument("--bin-size", type=_positive, default=30)
    a.add_argument("--sample-size", type=_positive, default=1000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--trace", help="also write per-query visit traces (CSV)")
    a.add_argument("--out", required=True, help="JSON report path")
    _add_common(a)

    a = asub.add_parser("koccurrence", help="k-occurrence counts and skewness")
    a.add_argument("--data", required=True)
    a.add_argument("--metric", choices=["l2", "angular"], default="l2")
    a.add_argument("--k", type=_positive, default=10)
    a.add_argument("--out", required=True, help="JSON report path")
    _add_common(a)

    a = asub.add_parser("traversal", help="hub share per bin of the visit order")
    a.add_argument("--index", required=True)
    a.add_argument("--queries", required=True)
    a.add_argument("--k", type=_positive, default=100)
    a.add_argument("--ef", type=_positive, default=200)
    a.add_argument("--percentile", type=float, default=95.0)
    a.add_argument("--bin-size", type=_positive, default=30)
    a.add_argument("--trace", help="also write per-query visit traces (CSV)")
    a.add_argument("--out", required=True, help="CSV with bin_index,mean_hub_fraction,queries_covered")
    _add_common(a)
    return parser


# ---------------------------------------------------------------------------


def _need_file(path, flag: str) -> None:
    if path is None:
        raise UsageError(f"{flag} is required")
    if not os.path.isfile(path):
        raise UsageError(f"{flag}: no such file: {path}")


def _need_outdir(path) -> None:
    d = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(d):
        raise UsageError(f"output directory does not exist: {d}")


def _validate(args) -> None:
    for flag in ("data", "queries", "gt", "index"):
        path = getattr(args, flag, None)
        if path is not None:
            _need_file(path, "--" + flag)
    if getattr(args, "out", None):
        _need_outdir(args.out)
    if getattr(args, "trace", None):
        _need_outdir(args.trace)
    if args.command == "query":
        if args.brute_force:
            _need_file(args.data, "--data")
        else:
            _need_file(args.index, "--index")
            if args.k > args.ef:
                raise UsageError(f"--k ({args.k}) must not exceed --ef ({args.ef})")
    if args.command in ("build", "bench") and args.ef_construction < args.m:
        raise UsageError("--ef-construction must be at least --m")
    if args.command == "bench" and args.k > min(args.ef):
        raise UsageError(f"--k ({args.k}) must not exceed the smallest --ef")
    if args.command == "analyze" and args.mode != "koccurrence":
        if not 0 < args.percentile < 100:
            raise UsageError("--percentile must lie in (0, 100)")
        if args.k > args.ef:
            raise UsageError(f"--k ({args.k}) must not exceed --ef ({args.ef})")


def _config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "json_config"}


def _say(msg: str) -> None:
    print(msg, flush=True)


def _params(args, metric: Metric) -> BuildParams:
    return BuildParams(M=args.m, ef_construction=args.ef_construction, seed=args.seed,
                       metric=metric)


def _write_traces(traces, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query_id", "dist_computations", "visit_order"])
        for t in traces:
            w.writerow([t.query_id, t.dist_computations, " ".join(map(str, t.visit_order))])


def _cmd_generate(args) -> None:
    vs = generate(SynthSpec(args.n, args.d, args.law, args.seed))
    fmt = "fvecs" if args.out.endswith(".fvecs") else "raw_f32"
    save_vectors(vs, args.out, fmt)
    _say(f"generate: wrote {vs.count}x{vs.dim} {args.law} vectors to {args.out}")


def _build(args, data, kind: str):
    params = _params(args, data.metric)
    t0 = time.perf_counter()
    if kind == "hier":
        idx = HierIndex.build(data, params)
    elif args.flat_source == "direct":
        idx = build_flat(data, params)
    else:
        idx = from_base_layer(HierIndex.build(data, params))
    return idx, time.perf_counter() - t0


def _cmd_build(args) -> None:
    data = load_vectors(args.data, metric=args.metric)
    kinds = ["hier", "flat"] if args.index_type == "both" else [args.index_type]
    hier = None
    for kind in kinds:
        if kind == "flat" and hier is not None and args.flat_source == "base_layer":
            t0 = time.perf_counter()
            idx, secs = from_base_layer(hier), time.perf_counter() - t0
        else:
            idx, secs = _build(args, data, kind)
        if kind == "hier":
            hier = idx
        out = args.out if len(kinds) == 1 else f"{args.out}.{kind}.nvgi"
        save_index(idx, out)
        _say(f"build: {kind} index over {len(idx)} points in {secs:.2f}s -> {out}")


def _cmd_query(args) -> None:
    if args.brute_force:
        data = load_vectors(args.data, metric=args.metric)
        queries = load_vectors(args.queries, metric=args.metric)
        t0 = time.perf_counter()
        gt = bench.brute_force_knn(data, queries, args.k, threads=args.threads)
        save_ivecs(gt.ids, args.out)
        _say(f"query: exact top-{args.k} for {len(gt)} queries in "
             f"{time.perf_counter() - t0:.2f}s -> {args.out}")
        return
    idx = load_index(args.index)
    queries = load_vectors(args.queries, metric=idx.metric)
    if args.trace:
        ids, _, comps, traces = idx.search_batch_traced(queries.data, args.k, args.ef)
        _write_traces(traces, args.trace)
    else:
        ids, _, comps = idx.search_batch(queries.data, args.k, args.ef)
    save_ivecs(ids, args.out)
    msg = (f"query: {queries.count} queries, k={args.k}, ef={args.ef}, "
           f"mean dist comps {comps.mean():.1f} -> {args.out}")
    if args.gt:
        gt = load_vectors(args.gt, "ivecs")
        if gt.shape[1] < args.k:
            raise ValueError(f"ground truth has k={gt.shape[1]} < {args.k}")
        msg += f", recall@{args.k} {bench.mean_recall(ids, gt[:, :args.k], args.k):.4f}"
    _say(msg)


def _cmd_bench(args) -> None:
    types = ("hier", "flat") if args.index_type == "both" else (args.index_type,)
    name = args.name or os.path.splitext(os.path.basename(args.data))[0]
    cfg = bench.SweepConfig(
        datasets=[bench.DatasetConfig(name, args.data, args.queries, args.gt, args.metric)],
        ef_grid=tuple(args.ef), k=args.k, M=args.m, ef_construction=args.ef_construction,
        seed=args.seed, index_types=types, flat_source=args.flat_source,
        repetitions=args.repetitions, threads=args.threads,
    )
    json_path = os.path.splitext(args.out)[0] + ".json"
    rows = bench.run_sweep(cfg, csv_path=args.out, json_path=json_path)
    for r in rows:
        _say(f"bench: {r.index_type} ef={r.ef_search} recall={r.recall:.4f} "
             f"p50={r.p50_us:.1f}us p99={r.p99_us:.1f}us comps={r.mean_dist_comps:.1f}")
    _say(f"bench: {len(rows)} rows -> {args.out}, {json_path}")


def _cmd_analyze(args) -> None:
    if args.mode == "koccurrence":
        data = load_vectors(args.data, metric=args.metric)
        ko = hubness.k_occurrence(data, args.k, threads=args.threads)
        report = {"n": data.count, "d": data.dim, "metric": args.metric, "k": args.k,
                  "skewness": hubness._safe_skew(ko.counts),
                  "max_count": int(ko.counts.max()), "counts": ko.counts.tolist()}
        hubness.write_report(report, args.out)
        _say(f"analyze koccurrence: skewness {report['skewness']:.4f} -> {args.out}")
        return
    idx = load_index(args.index)
    queries = load_vectors(args.queries, metric=idx.metric)
    if args.mode == "hubness":
        report = hubness.hubness_report(idx, queries, args.ef, args.k, args.percentile,
                                        args.bin_size, args.sample_size, args.seed)
        hubness.write_report(report, args.out)
        if args.trace:
            _write_traces(idx.search_batch_traced(queries.data, args.k, args.ef)[3], args.trace)
        mw = report["tests"]["mann_whitney"]
        _say(f"analyze hubness: log-skewness {report['access']['skewness_log']:.4f}, "
             f"Mann-Whitney p {mw['p_value']:.3g}, effect size "
             f"{report['tests']['effect_size']:.3f} -> {args.out}")
        return
    acc = hubness.access_counts(idx, queries, args.ef, args.k)
    lab = hubness.select_hubs(acc, args.percentile)
    bins = hubness.traversal_bin_fractions(acc.traces, lab, args.bin_size)
    hubness.write_bins_csv(bins, args.out)
    if args.trace:
        _write_traces(acc.traces, args.trace)
    _say(f"analyze traversal: {len(bins.fractions)} bins, first {bins.first_bin_mean:.3f}, "
         f"final full {bins.final_full_bin_mean:.3f} -> {args.out}")


_COMMANDS = {
    "generate": _cmd_generate,
    "build": _cmd_build,
    "query": _cmd_query,
    "bench": _cmd_bench,
    "analyze": _cmd_analyze,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    try:
        _validate(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"navgraph: error: {exc}", file=sys.stderr)
        return 2
    if args.json_config:
        print(json.dumps(_config(args), indent=2, default=str), flush=True)
    try:
        _COMMANDS[args.command](args)
    except (OSError, ValueError) as exc:
        print(f"navgraph: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
