"""Command-line surface: training, benchmarks, data packing, graph export.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from typing import List, Optional

import numpy as np

from . import fuzz, planner, symbol
from .errors import MinigraphError
from .optim import SGDConfig
from .recordio import Example, pack
from .train import mlp, param_names, train_distributed, train_local

USAGE_EXIT = 1
RUNTIME_EXIT = 2

STRATEGIES = ("none", "inplace", "coshare", "both")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _load_graph(path: str) -> symbol.SymbolGraph:
    with open(path) as f:
        return symbol.load(f.read())


def _sgd_config(args) -> SGDConfig:
    return SGDConfig(eta=args.lr, momentum=args.momentum,
                     weight_decay=args.wd)


def _emit_report(report, path: Optional[str]) -> None:
    if path:
        report.save(path)
    else:
        sys.stdout.write(report.to_csv())


# ------------------------------------------------------------------ commands

def _cmd_train(args) -> int:
    g = _load_graph(args.graph)
    report, _params = train_local(
        g, args.data, _sgd_config(args), epochs=args.epochs,
        batch=args.batch, strategy=args.strategy,
        param_seed=args.seed, shuffle_seed=args.seed)
    _emit_report(report, args.report)
    return 0


def _cmd_train_dist(args) -> int:
    g = _load_graph(args.graph)
    report, _params = train_distributed(
        g, args.data, _sgd_config(args), epochs=args.epochs,
        batch=args.batch, machines=args.machines, workers=args.workers,
        mode=args.mode, strategy=args.strategy,
        param_seed=args.seed, shuffle_seed=args.seed, tcp=args.tcp)
    _emit_report(report, args.report)
    return 0


def _cmd_bench_memory(args) -> int:
    g = _load_graph(args.graph)
    given = {"data": (args.batch, args.dim)}
    if "label" in g.list_arguments():
        given["label"] = (args.batch,)
    if args.forward_only:
        comb, phases = g, None
    else:
        wrt = [n for n in g.list_arguments() if n not in given]
        ends, _heads = symbol.build_gradient(g, wrt)
        comb = symbol.SymbolGraph(list(g.outputs) + ends)
        fwd_ids = {id(n) for n in g.topo_nodes()}
        phases = [0 if (n.is_variable or id(n) in fwd_ids) else 1
                  for n in comb.topo_nodes()]
    rows = []
    for strat in STRATEGIES:
        plan = planner.plan_memory(comb, given, strategy=strat, phases=phases)
        rows.append((strat, plan.total_internal_bytes))
    base = rows[0][1]
    print(f"{'strategy':<10}{'internal_bytes':>16}{'ratio_vs_none':>16}")
    for strat, nbytes in rows:
        print(f"{strat:<10}{nbytes:>16}{nbytes / base:>16.4f}")
    return 0


def _cmd_bench_engine(args) -> int:
    rate, ok = fuzz.bench(args.ops, args.threads)
    print(f"ops: {args.ops}  threads: {args.threads}  "
          f"throughput: {rate:.0f} ops/s")
    print(f"serializability: {'ok' if ok else 'FAILED'}")
    return 0 if ok else RUNTIME_EXIT


def _cmd_pack_data(args) -> int:
    examples: List[Example] = []
    with open(args.csv) as f:
        for lineno, row in enumerate(csv.reader(f), 1):
            row = [c for c in row if c.strip()]
            if not row:
                continue
            try:
                label = int(row[0])
                feats = np.array([float(c) for c in row[1:]], dtype=np.float32)
            except ValueError as exc:
                raise MinigraphError(f"{args.csv}:{lineno}: {exc}") from exc
            examples.append(Example(label, feats))
    if not examples:
        raise MinigraphError(f"{args.csv}: no examples")
    pack(examples, args.out)
    print(f"packed {len(examples)} examples -> {args.out}")
    return 0


def _cmd_export_graph(args) -> int:
    g = _load_graph(args.graph)
    with open(args.dot, "w") as f:
        f.write(symbol.to_dot(g))
    print(f"wrote {args.dot}")
    return 0


def _cmd_make_mlp(args) -> int:
    g = mlp(args.hidden, args.classes)
    with open(args.out, "w") as f:
        f.write(symbol.save(g))
    print(f"wrote {args.out} ({len(param_names(g))} parameters)")
    return 0


# -------------------------------------------------------------------- parser

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--graph", required=True, help="graph file (text format)")
    p.add_argument("--data", required=True, help="packed record file")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--batch", type=int, required=True)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--wd", type=float, default=1e-4)
    p.add_argument("--strategy", choices=STRATEGIES, default="both")
    p.add_argument("--report", help="write the CSV report here "
                   "(default: stdout)")
    p.add_argument("--seed", type=int, default=0,
                   help="parameter and shuffle seed")


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="minigraph",
                  description="tensor library trainer and tooling")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[], help="single-process training")
    _add_train_flags(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("train-dist", help="data-parallel training")
    _add_train_flags(p)
    p.add_argument("--machines", type=int, default=1)
    p.add_argument("--workers", type=int, default=1,
                   help="workers per machine")
    p.add_argument("--mode", choices=("sequential", "eventual"),
                   default="sequential")
    p.add_argument("--tcp", metavar="HOST:PORT",
                   help="run server links over loopback TCP")
    p.set_defaults(fn=_cmd_train_dist)

    p = sub.add_parser("bench-memory",
                       help="compare planner strategies on a graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--batch", type=int, required=True)
    p.add_argument("--dim", type=int, default=64,
                   help="feature dimension of the data argument")
    p.add_argument("--forward-only", action="store_true")
    p.set_defaults(fn=_cmd_bench_memory)

    p = sub.add_parser("bench-engine",
                       help="engine throughput and serializability check")
    p.add_argument("--ops", type=int, required=True)
    p.add_argument("--threads", type=int, required=True)
    p.set_defaults(fn=_cmd_bench_engine)

    p = sub.add_parser("pack-data",
                       help="pack a label,feature...  CSV into a record file")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_pack_data)

    p = sub.add_parser("export-graph", help="write a graphviz dot rendering")
    p.add_argument("--graph", required=True)
    p.add_argument("--dot", required=True)
    p.set_defaults(fn=_cmd_export_graph)

    p = sub.add_parser("make-mlp",
                       help="write a relu MLP graph file for the trainer")
    p.add_argument("--hidden", type=int, nargs="+", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_make_mlp)

    return top


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (MinigraphError, OSError) as exc:
        print(f"minigraph: error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
