"""Batch command-line front end.

Subcommands: ``gaps`` (spectral-gap table), ``stability`` (per-k structured
distances), ``cluster`` (spectral clustering labels), ``gen`` (graph
generators writing Matrix Market files).  Every run writes a JSON sidecar
echoing the full configuration, seeds and library versions next to its main
output.  Exit codes: 0 success, 2 usage or input error, 3 partial numerical
failure (report still written).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .clustering import spectral_clustering
from .flow_full import FlowConfig
from .graphs import (GENERATOR_ID, GraphStructureError, WeightMatrix,
                     build_knn_similarity, compress_halve, generate_sbm,
                     load_matrix_market, save_matrix_market)
from .outer import CSV_HEADER, OuterConfig, config_echo, select_k
from .spectra import EigensolveError, spectral_gap

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PARTIAL = 3


def _sidecar(out_path: Path, command: str, settings: dict):
    payload = {
        "command": command,
        "settings": settings,
        "generator": GENERATOR_ID,
        "versions": {
            "specstab": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = out_path.with_suffix(out_path.suffix + ".meta.json")
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _load(path: str) -> WeightMatrix:
    return load_matrix_market(path)


def _outer_config(args) -> OuterConfig:
    return OuterConfig(
        toler=args.outer_tol,
        method=args.method,
        inner=FlowConfig(tol=args.inner_tol),
        log_trajectory_dir=args.log_trajectory,
    )


def cmd_gaps(args) -> int:
    W = _load(args.input)
    rows = [(k, spectral_gap(W, k)) for k in range(args.kmin, args.kmax + 1)]
    print(f"{'k':>4s} {'g_k':>14s}")
    for k, g in rows:
        print(f"{k:4d} {g:14.4f}")
    out = Path(args.out or "gaps.csv")
    with open(out, "w") as f:
        f.write("k,g_k\n")
        for k, g in rows:
            f.write(f"{k},{g:.10g}\n")
    _sidecar(out, "gaps", {"input": args.input, "kmin": args.kmin,
                           "kmax": args.kmax, "out": str(out)})
    return EXIT_OK


def cmd_stability(args) -> int:
    W = _load(args.input)
    config = _outer_config(args)
    k_opt, report = select_k(W, args.kmin, args.kmax, config, jobs=args.jobs,
                             meta={"input": args.input, "seed": args.seed})
    low = {r.k: r for r in report.rows if r.method == "lowrank"}
    ful = {r.k: r for r in report.rows if r.method.startswith("full")}
    print(f"{'k':>4s} {'g_k':>12s} {'d_k_LOW':>12s} {'d_k_FULL':>12s} {'|diff|':>10s}")
    for r in report.rows:
        dl = f"{low[r.k].d_k:12.4f}" if r.k in low else " " * 12
        df = f"{ful[r.k].d_k:12.4f}" if r.k in ful else " " * 12
        diff = (f"{abs(low[r.k].d_k - ful[r.k].d_k):10.4f}"
                if r.k in low and r.k in ful else " " * 10)
        print(f"{r.k:4d} {r.g_k:12.4f} {dl} {df} {diff}")
    print(f"selected k: {k_opt}")

    out = Path(args.out or "stability.csv")
    out.write_text(report.to_csv_text())
    out.with_suffix(".json").write_text(report.to_json_text() + "\n")
    _sidecar(out, "stability", {
        "input": args.input, "kmin": args.kmin, "kmax": args.kmax,
        "method": args.method, "inner_tol": args.inner_tol,
        "outer_tol": args.outer_tol, "seed": args.seed, "jobs": args.jobs,
        "out": str(out), "config": config_echo(config), "k_opt": k_opt,
    })
    if any(r.failed for r in report.rows):
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_cluster(args) -> int:
    W = _load(args.input)
    assign = spectral_clustering(W, args.k, seed=args.seed)
    out = Path(args.out or "labels.csv")
    with open(out, "w") as f:
        f.write("vertex,label\n")
        for v, lab in enumerate(assign.labels, start=1):
            f.write(f"{v},{lab}\n")
    print(f"clustered {W.n} vertices into {args.k} groups "
          f"(inertia {assign.inertia:.6g}) -> {out}")
    _sidecar(out, "cluster", {"input": args.input, "k": args.k,
                              "seed": args.seed, "out": str(out)})
    return EXIT_OK


def cmd_gen(args) -> int:
    if args.kind == "sbm":
        W = generate_sbm(args.p, args.q, args.seed)
        settings = {"kind": "sbm", "p": args.p, "q": args.q, "seed": args.seed}
    elif args.kind == "compress":
        if not args.input:
            raise GraphStructureError("gen compress requires --input")
        W = compress_halve(_load(args.input))
        settings = {"kind": "compress", "input": args.input}
    else:  # knn
        if not args.input:
            raise GraphStructureError("gen knn requires --input (points CSV)")
        points = np.loadtxt(args.input, delimiter=",", ndmin=2)
        W = build_knn_similarity(points, args.knn, sigma_rule=args.sigma_rule)
        settings = {"kind": "knn", "input": args.input, "knn": args.knn,
                    "sigma_rule": args.sigma_rule}
    out = Path(args.out or f"{args.kind}.mtx")
    save_matrix_market(W, out)
    print(f"wrote {W.n}-vertex graph with {W.nnz_stored} stored nonzeros -> {out}")
    _sidecar(out, "gen", {**settings, "seed": args.seed, "out": str(out)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specstab",
        description="Robustness analysis of spectral clustering via "
                    "structured eigenvalue-coalescence distances.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_input=True):
        if needs_input:
            p.add_argument("--input", required=True, help="Matrix Market graph file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output path")

    p = sub.add_parser("gaps", help="table of spectral gaps g_k")
    common(p)
    p.add_argument("--kmin", type=int, default=2)
    p.add_argument("--kmax", type=int, default=8)
    p.set_defaults(func=cmd_gaps)

    p = sub.add_parser("stability", help="structured distances over a k range")
    common(p)
    p.add_argument("--kmin", type=int, default=2)
    p.add_argument("--kmax", type=int, default=8)
    p.add_argument("--method", choices=("lowrank", "full", "auto"), default="auto")
    p.add_argument("--inner-tol", type=float, default=1e-9)
    p.add_argument("--outer-tol", type=float, default=1e-2)
    p.add_argument("--log-trajectory", default=None,
                   help="directory for per-k flow trajectory CSVs")
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel workers over k (default: available cores)")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("cluster", help="spectral clustering labels")
    common(p)
    p.add_argument("--k", type=int, required=True, help="number of clusters")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("gen", help="write a generated graph as .mtx")
    p.add_argument("kind", choices=("sbm", "compress", "knn"))
    p.add_argument("--input", default=None, help="source file (compress/knn)")
    p.add_argument("--p", type=int, default=8, help="sbm: number of blocks")
    p.add_argument("--q", type=int, default=20, help="sbm: block size")
    p.add_argument("--knn", type=int, default=10, help="knn: neighbor count")
    p.add_argument("--sigma-rule", choices=("self_kth", "kth", "closest"),
                   default="self_kth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (GraphStructureError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EigensolveError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
