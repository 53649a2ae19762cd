"""``cgt`` command line.

Exit codes: 0 ok, 2 validation error, 3 missing artifact, 4 numerical failure.

``--config FILE`` reads ``key = value`` lines (``#`` comments, keys use the long
option names with ``-`` or ``_``); values from the file override flags given on
the command line.  One file can serve every stage: keys that the chosen
subcommand does not take are skipped, keys no subcommand takes are an error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from .graph import GraphFormatError, PprConvergenceError, add_noisy_edges, load_graph, make_sbm_graph, save_graph
from .model import TrainingDivergedError
from .pipeline import (SCENARIOS, MissingArtifactError, RunDir, RunLockedError, StaleArtifactError, SynthConfig,
                       default_gnn_configs, stage_bench, stage_generate, stage_quantize, stage_report,
                       stage_sample, stage_stats, stage_train)
from .quantizer import InfeasibleClusteringError

EXIT_OK, EXIT_VALIDATION, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

logger = logging.getLogger("cgt")


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _float_or_inf(text: str) -> float:
    return math.inf if str(text).lower() in ("inf", "infinity") else float(text)


def _opt_float(text: str):
    return None if str(text).lower() in ("none", "") else float(text)


def _opt_int(text: str):
    return None if str(text).lower() in ("none", "") else int(text)


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def read_config_file(path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        pairs.append((key.replace("_", "-"), value))
    return pairs


def _common(p: argparse.ArgumentParser, run=True):
    if run:
        p.add_argument("--run", default="runs/default", help="run directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="key = value file overriding flags")
    p.add_argument("--verbose", type=_bool, default=False)


def _synth_args(p):
    g = p.add_argument_group("synthesis")
    g.add_argument("--s", type=int, default=5, help="neighbours sampled per node")
    g.add_argument("--L", type=int, default=2, help="computation-graph depth")
    g.add_argument("--k", type=int, default=30, help="minimum cluster size")
    g.add_argument("--m", type=_opt_int, default=None, help="cluster count (default n // k)")
    g.add_argument("--privacy", choices=("k_anonymous", "dp", "none"), default="k_anonymous")
    g.add_argument("--eps", type=_float_or_inf, default=math.inf)
    g.add_argument("--delta", type=float, default=0.01)
    g.add_argument("--clip", type=float, default=1.0)
    g.add_argument("--n-fit", type=_opt_int, default=None)
    g.add_argument("--kmeans-iters", type=int, default=20)
    _model_args(p)


def _model_args(p):
    g = p.add_argument_group("transformer")
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--layers", type=int, default=3)
    g.add_argument("--variant", choices=("full_sequence", "cost_efficient"), default="full_sequence")
    g.add_argument("--steps", type=int, default=1000)
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--dp-sigma", type=_opt_float, default=None, help="enable DP-SGD with this noise multiplier")
    g.add_argument("--dp-clip", type=_float_or_inf, default=1.0)
    g.add_argument("--dp-delta", type=float, default=0.1)
    g.add_argument("--temperature", type=float, default=1.0)


def _bench_args(p):
    g = p.add_argument_group("benchmark")
    g.add_argument("--scenario", choices=SCENARIOS, default="base")
    g.add_argument("--ne", type=_csv, default=["0", "2", "4"], help="noisy edges per node grid")
    g.add_argument("--s-values", type=_csv, default=["2", "5", "10"], help="sampling number grid")
    g.add_argument("--alphas", type=_csv, default=["iid", "0.01", "0.3"], help="PPR alpha grid")
    g.add_argument("--models", type=_csv, default=["mean", "linear", "sum", "attention"])
    g.add_argument("--gnn-hidden", type=int, default=64)
    g.add_argument("--gnn-epochs", type=int, default=100)
    g.add_argument("--gnn-lr", type=float, default=1e-2)
    g.add_argument("--gnn-repeats", type=int, default=3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgt", description="Computation-graph transformer pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    gp = sub.add_parser("graph", help="graph utilities")
    gsub = gp.add_subparsers(dest="graph_command", required=True)
    p = gsub.add_parser("save", help="load, validate and re-save a graph directory")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    _common(p, run=False)
    p = gsub.add_parser("synth", help="write a stochastic-block-model graph")
    p.add_argument("--output", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--p-in", type=float, default=0.02)
    p.add_argument("--p-out", type=float, default=0.002)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--signal", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=1.0)
    _common(p, run=False)
    p = gsub.add_parser("noisy", help="add random edges to every node")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--ne", type=int, required=True)
    _common(p, run=False)

    p = sub.add_parser("sample", help="sample and encode computation graphs")
    p.add_argument("--graph", required=True)
    p.add_argument("--s", type=int, default=5)
    p.add_argument("--L", type=int, default=2)
    _common(p)

    p = sub.add_parser("quantize", help="fit the quantizer and tokenize the sampled trees")
    _synth_args(p)
    _common(p)

    p = sub.add_parser("train", help="train the transformer on tokens.tsv")
    _model_args(p)
    _common(p)

    p = sub.add_parser("generate", help="sample token trees and de-quantize them")
    p.add_argument("--count", type=_opt_int, default=None)
    p.add_argument("--temperature", type=float, default=1.0)
    _common(p)

    p = sub.add_parser("stats", help="zero/duplicate vector statistics")
    p.add_argument("--graph", help="sample this graph first")
    p.add_argument("--s", type=int, default=20)
    p.add_argument("--L", type=int, default=2)
    _common(p)

    p = sub.add_parser("bench", help="GNN accuracies on original vs generated data")
    p.add_argument("--graph", required=True)
    _synth_args(p)
    _bench_args(p)
    _common(p)

    p = sub.add_parser("report", help="summarize bench_report.csv")
    _common(p)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--graph", required=True)
    p.add_argument("--count", type=_opt_int, default=None)
    _synth_args(p)
    _bench_args(p)
    _common(p)
    return parser


def _option_sets(parser: argparse.ArgumentParser, path=()) -> dict[tuple, set[str]]:
    """Long option strings accepted by every leaf subcommand."""
    out = {}
    subs = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    if not subs:
        return {path: {o for a in parser._actions for o in a.option_strings if o.startswith("--")}}
    for name, child in subs[0].choices.items():
        out.update(_option_sets(child, path + (name,)))
    return out


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        options = _option_sets(parser)
        command = (args.command,) + ((args.graph_command,) if args.command == "graph" else ())
        known = options[command]
        every = set().union(*options.values())
        extra = []
        for key, value in read_config_file(args.config):
            flag = f"--{key}"
            if flag not in every:
                raise ValueError(f"{args.config}: unknown key {key!r}")
            if flag in known:
                extra += [flag, value]
        args = parser.parse_args(argv + extra)
    return args


def synth_from_args(a) -> SynthConfig:
    fields = SynthConfig.__dataclass_fields__
    return SynthConfig(**{k: getattr(a, k) for k in fields if hasattr(a, k)})


def _gnn_cfgs(a, L):
    return default_gnn_configs(L, a.models, hidden=a.gnn_hidden, epochs=a.gnn_epochs, lr=a.gnn_lr,
                               repeats=a.gnn_repeats, seed=a.seed)


def _bench_values(a):
    return {"base": [None], "noisy-edges": a.ne, "sampling-number": a.s_values,
            "distribution-shift": a.alphas}[a.scenario]


def run_command(a) -> int:
    if a.command == "graph":
        if a.graph_command == "save":
            save_graph(load_graph(a.input), a.output)
        elif a.graph_command == "synth":
            save_graph(make_sbm_graph(a.n, a.classes, a.p_in, a.p_out, a.d, a.signal, a.noise, seed=a.seed),
                       a.output)
        else:
            save_graph(add_noisy_edges(load_graph(a.input), a.ne, a.seed), a.output)
        return EXIT_OK
    with RunDir(a.run) as run:
        if a.command == "sample":
            stage_sample(run, a.graph, a.s, a.L, a.seed)
        elif a.command == "quantize":
            stage_quantize(run, synth_from_args(a), a.seed)
        elif a.command == "train":
            stage_train(run, synth_from_args(a), a.seed)
        elif a.command == "generate":
            stage_generate(run, a.count, a.temperature, a.seed)
        elif a.command == "stats":
            if a.graph:
                stage_sample(run, a.graph, a.s, a.L, a.seed)
            summary = stage_stats(run)
            print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))
        elif a.command == "bench":
            stage_bench(run, a.graph, a.scenario, _bench_values(a), synth_from_args(a), _gnn_cfgs(a, a.L), a.seed)
        elif a.command == "report":
            print(stage_report(run), end="")
        elif a.command == "pipeline":
            sc = synth_from_args(a)
            stage_sample(run, a.graph, a.s, a.L, a.seed)
            stage_quantize(run, sc, a.seed)
            stage_train(run, sc, a.seed)
            stage_generate(run, a.count, a.temperature, a.seed)
            stage_stats(run)
            stage_bench(run, a.graph, a.scenario, _bench_values(a), sc, _gnn_cfgs(a, a.L), a.seed)
            print(stage_report(run), end="")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK
    except (OSError, ValueError) as exc:
        print(f"cgt: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run_command(args)
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"cgt: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDivergedError, PprConvergenceError, FloatingPointError, OverflowError) as exc:
        print(f"cgt: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (StaleArtifactError, GraphFormatError, InfeasibleClusteringError, RunLockedError, ValueError) as exc:
        print(f"cgt: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
