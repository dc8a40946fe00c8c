"""Command-line entry point: ``conet <command> [options]``.

Commands write into a run directory (``--out``, default
``$CONET_OUTPUT_ROOT/<command>-<graph>``, with ``runs`` as the root when the
variable is unset).  Exit status is 0 on success, 2 for rejected input and 3
for runtime failures such as a diverging trainer.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import yaml

from .controllers import (DELTA_PRESETS, STATIC_FRACTIONS, SearchConfig, compound_scale,
                          conet_search, delta_preset, static_scale_network)
from .errors import ConetError, InputError
from .lowrank import append_metrics_csv, fmt, plateau_epoch, rank_slope
from .netgraph import (assign_unique_channels, baseline_sizes, dump_sizes, edge_params,
                       head_params, layer_groups, load_graph, load_sizes, param_count,
                       uniform_sizes, validate_assignment)
from .snapshot import read_archive
from .trainer import DatasetSpec, LiveTrainer, ReplayTrainer, TrainerConfig, infer_sizes

OUTPUT_ROOT_ENV = "CONET_OUTPUT_ROOT"
EXIT_INPUT, EXIT_RUNTIME = 2, 3

CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.csv"
TRIALS_FILE = "trials.yaml"
CHANNELS_FILE = "channels.csv"
FINAL_SIZES_FILE = "final_sizes.yaml"
TRAINING_LOG_FILE = "training_log.csv"

ACTION_NAMES = {1: "expand", 0: "hold", -1: "shrink"}


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def run_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        out = root / f"{args.command}-{Path(str(args.graph)).stem}"
    out.mkdir(parents=True, exist_ok=True)
    for name in (METRICS_FILE, TRAINING_LOG_FILE):
        (out / name).unlink(missing_ok=True)
    return out


def echo_config(args, out: Path) -> None:
    """Write every resolved option (output location excluded) for later replay."""
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "config", "func")}
    (out / CONFIG_FILE).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _sizes_arg(args, graph, assignment):
    if getattr(args, "sizes", None):
        sizes = load_sizes(args.sizes)
    elif getattr(args, "uniform", None):
        sizes = uniform_sizes(assignment, args.uniform)
    else:
        sizes = baseline_sizes(graph, assignment)
    unknown = sorted(set(sizes) - set(assignment.variables))
    if unknown:
        raise InputError(f"sizes name unknown channel variables {unknown}")
    return sizes


def _require_valid(graph, assignment, sizes):
    bad = validate_assignment(graph, assignment, sizes)
    if bad:
        raise InputError("sizes violate the channel constraints: "
                         + "; ".join(f"{v.element}: {v.message}" for v in bad))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_probe(args):
    graph = load_graph(args.graph)
    assignment = assign_unique_channels(graph)
    archive = read_archive(args.archive)
    infer_sizes(archive, graph, assignment)
    histories = archive.histories([e.id for e in graph.conv_edges])
    out = run_dir(args)
    echo_config(args, out)
    append_metrics_csv(out / METRICS_FILE, 0, histories)
    with (out / SUMMARY_FILE).open("w", newline="") as fh:
        w = _writer(fh)
        w.writerow(("layer_name", "max_rank_out", "rank_slope", "plateau_epoch"))
        for name, h in histories.items():
            t2 = plateau_epoch(h, args.window, args.epsilon)
            w.writerow((name, fmt(h.max_rank_out), fmt(rank_slope(h, 0, t2)), t2))
    print(f"probed {len(histories)} layers over {len(archive)} epochs -> {out}")


def cmd_assign(args):
    graph = load_graph(args.graph)
    assignment = assign_unique_channels(graph)
    print(f"variables: {len(assignment.variables)}")
    print(" ".join(assignment.variables))
    print("\nnode depths:")
    width = max(len(n.id) for n in graph.nodes)
    for n in graph.nodes:
        print(f"  {n.id:<{width}}  {assignment.node_depth[n.id]}")
    print("\nlayer groups:")
    for v, edges in layer_groups(graph, assignment).items():
        print(f"  {v}: {' '.join(edges)}")


def _trainer_config(args) -> TrainerConfig:
    return TrainerConfig(
        learning_rate=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
        batch_size=args.batch_size, seed=args.seed,
        dataset=DatasetSpec(image_size=args.image_size, n_samples=args.n_samples,
                            separation=args.separation, noise=args.noise),
        dtype="float32" if args.float32 else "float64")


def _search_config(args) -> SearchConfig:
    delta = args.delta if args.delta is not None else delta_preset(args.delta_preset)
    return SearchConfig(delta=delta, mu=args.mu, gamma=args.gamma, phi_init=args.phi_init,
                        epochs_per_trial=args.epochs_per_trial, max_trials=args.trials,
                        min_channels=args.min_channels, max_channels=args.max_channels,
                        initial_channel_size=args.initial_size, max_params=args.max_params)


def _yaml_float(x):
    return float(fmt(x)) if math.isfinite(x) else x


def cmd_search(args):
    graph = load_graph(args.graph)
    assignment = assign_unique_channels(graph)
    config = _search_config(args)
    if args.archive:
        trainer = ReplayTrainer(args.archive, graph, assignment)
    else:
        trainer = LiveTrainer(graph, _trainer_config(args), assignment)
    trainer = _Recording(trainer)
    out = run_dir(args)
    echo_config(args, out)
    trials_doc = []

    with (out / CHANNELS_FILE).open("w", newline="") as ch_fh, \
            (out / TRAINING_LOG_FILE).open("w", newline="") as log_fh:
        ch, log = _writer(ch_fh), _writer(log_fh)
        ch.writerow(("trial", "variable", "size", "slope", "cond_avg", "action", "phi", "frozen",
                     "new_size"))
        log.writerow(("trial", "epoch", "loss", "train_accuracy"))

        def on_trial(rec):
            append_metrics_csv(out / METRICS_FILE, rec.trial, rec.histories)
            archive = trainer.last_run
            if archive is not None:
                for epoch, (loss, acc) in enumerate(zip(archive.loss, archive.accuracy)):
                    log.writerow((rec.trial, epoch, fmt(loss), fmt(acc)))
            variables = {}
            for v in assignment.variables:
                ch.writerow((rec.trial, v, rec.sizes[v], fmt(rec.slopes[v]),
                             fmt(rec.conditions[v]), ACTION_NAMES[rec.actions[v]],
                             fmt(rec.phis[v]), int(rec.frozen[v]), rec.new_sizes[v]))
                variables[v] = {"size": rec.sizes[v], "slope": _yaml_float(rec.slopes[v]),
                                "cond_avg": _yaml_float(rec.conditions[v]),
                                "action": ACTION_NAMES[rec.actions[v]],
                                "phi": _yaml_float(rec.phis[v]), "frozen": rec.frozen[v],
                                "new_size": rec.new_sizes[v]}
            trials_doc.append({"trial": rec.trial,
                               "params": param_count(graph, rec.sizes, assignment),
                               "variables": variables})
            ch_fh.flush()
            log_fh.flush()

        result = conet_search(graph, assignment, trainer, config, on_trial=on_trial)
    (out / TRIALS_FILE).write_text(yaml.safe_dump(trials_doc, sort_keys=False))
    _require_valid(graph, assignment, result.sizes)
    (out / FINAL_SIZES_FILE).write_text(dump_sizes(result.sizes, assignment.variables))
    state = "converged" if result.converged else "trial budget exhausted"
    print(f"{len(result.trials)} trials ({state}); "
          f"params {param_count(graph, result.sizes, assignment)} -> {out}")


class _Recording:
    """Trainer wrapper remembering the last archive so the CLI can log it."""

    def __init__(self, inner):
        self.inner = inner
        self.last_run = None

    def train(self, sizes, n_epochs, trial):
        self.last_run = self.inner.train(sizes, n_epochs, trial)
        return self.last_run


def read_rank_csv(path) -> dict[str, float]:
    try:
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise InputError(f"cannot read rank CSV: {exc}") from None
    if not rows or "layer_name" not in rows[0] or "max_rank_out" not in rows[0]:
        raise InputError("rank CSV needs columns layer_name and max_rank_out")
    try:
        return {r["layer_name"]: float(r["max_rank_out"]) for r in rows}
    except ValueError as exc:
        raise InputError(f"bad rank value in {path}: {exc}") from None


def cmd_scale_static(args):
    graph = load_graph(args.graph)
    assignment = assign_unique_channels(graph)
    base = _sizes_arg(args, graph, assignment)
    ranks = read_rank_csv(args.ranks)
    out = run_dir(args)
    echo_config(args, out)
    fractions = args.fraction or list(STATIC_FRACTIONS)
    print(f"baseline params {param_count(graph, base, assignment)}")
    for f in fractions:
        sizes = static_scale_network(graph, assignment, base, ranks, f)
        _require_valid(graph, assignment, sizes)
        name = f"static_{round(100 * f):03d}.yaml"
        (out / name).write_text(dump_sizes(sizes, assignment.variables))
        print(f"fraction {fmt(f)}: params {param_count(graph, sizes, assignment)} -> {out / name}")


def cmd_scale_compound(args):
    graph = load_graph(args.graph)
    assignment = assign_unique_channels(graph)
    base = _sizes_arg(args, graph, assignment)
    if args.multiplier is None:
        args.multiplier = math.sqrt(2) ** args.sqrt2_power
    sizes = compound_scale(base, args.multiplier)
    _require_valid(graph, assignment, sizes)
    out = run_dir(args)
    echo_config(args, out)
    (out / "compound_sizes.yaml").write_text(dump_sizes(sizes, assignment.variables))
    print(f"multiplier {fmt(args.multiplier)}: params {param_count(graph, base, assignment)} -> "
          f"{param_count(graph, sizes, assignment)}")


def count_breakdown(graph, assignment, sizes) -> list[tuple[str, int]]:
    """Parameters grouped by the output-depth expression of each edge, head last."""
    groups = {}
    per_edge = edge_params(graph, assignment, sizes)
    for e in graph.edges:
        if e.id not in per_edge:
            continue
        expr = assignment.edge_out[e.id] if e.is_conv else assignment.node_depth[e.tail]
        groups[str(expr)] = groups.get(str(expr), 0) + per_edge[e.id]
    rows = list(groups.items())
    rows.append(("classifier", head_params(graph, assignment, sizes)))
    return rows


def cmd_count_params(args):
    graph = load_graph(args.graph)
    assignment = assign_unique_channels(graph)
    sizes = _sizes_arg(args, graph, assignment)
    _require_valid(graph, assignment, sizes)
    total = param_count(graph, sizes, assignment)
    print(total)
    for group, n in count_breakdown(graph, assignment, sizes):
        print(f"  {group}: {n}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--graph", help="graph spec file or bundled graph name (required "
                                        "unless --config supplies it)")
        sp.add_argument("--config", help="replay options from an echoed config.json")
        if out:
            sp.add_argument("--out", help="run directory")

    def sizes_opts(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--sizes", help="YAML map of channel variable -> size")
        g.add_argument("--uniform", type=int, help="bind every variable to this size")

    sp = sub.add_parser("probe", help="rank/condition metrics of a snapshot archive")
    common(sp)
    sp.add_argument("--archive", required=True)
    sp.add_argument("--window", type=int, default=3)
    sp.add_argument("--epsilon", type=float, default=1e-3)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("assign-channels", help="independent channel variables of a graph")
    common(sp, out=False)
    sp.set_defaults(func=cmd_assign)

    sp = sub.add_parser("search", help="dynamic channel search")
    common(sp)
    d = sp.add_mutually_exclusive_group()
    d.add_argument("--delta-preset", default="3", type=str,
                   help=f"preset index 0..{len(DELTA_PRESETS) - 1} (default 3)")
    d.add_argument("--delta", type=float, help="explicit rank-slope threshold")
    sp.add_argument("--mu", type=float, default=50.0)
    sp.add_argument("--gamma", type=float, default=0.05)
    sp.add_argument("--phi-init", type=float, default=0.2)
    sp.add_argument("--epochs-per-trial", type=int, default=20)
    sp.add_argument("--trials", type=int, default=25)
    sp.add_argument("--initial-size", type=int, default=32)
    sp.add_argument("--min-channels", type=int, default=1)
    sp.add_argument("--max-channels", type=int, default=4096)
    sp.add_argument("--max-params", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--archive", help="replay stored epochs instead of training")
    t = TrainerConfig()
    sp.add_argument("--lr", type=float, default=t.learning_rate)
    sp.add_argument("--momentum", type=float, default=t.momentum)
    sp.add_argument("--weight-decay", type=float, default=t.weight_decay)
    sp.add_argument("--batch-size", type=int, default=t.batch_size)
    sp.add_argument("--n-samples", type=int, default=t.dataset.n_samples)
    sp.add_argument("--image-size", type=int, default=t.dataset.image_size)
    sp.add_argument("--separation", type=float, default=t.dataset.separation)
    sp.add_argument("--noise", type=float, default=t.dataset.noise)
    sp.add_argument("--float32", action="store_true")
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("scale-static", help="rank-informed static scaling")
    common(sp)
    sizes_opts(sp)
    sp.add_argument("--ranks", required=True, help="CSV with layer_name,max_rank_out")
    sp.add_argument("--fraction", type=float, action="append",
                    help="scale fraction in [0, 1]; repeatable (default 0.2 .. 1.0)")
    sp.set_defaults(func=cmd_scale_static)

    sp = sub.add_parser("scale-compound", help="multiply every channel size")
    common(sp)
    sizes_opts(sp)
    m = sp.add_mutually_exclusive_group(required=True)
    m.add_argument("--multiplier", type=float)
    m.add_argument("--sqrt2-power", type=int, help="use sqrt(2) ** k as the multiplier")
    sp.set_defaults(func=cmd_scale_compound)

    sp = sub.add_parser("count-params", help="total and grouped parameter counts")
    common(sp, out=False)
    sizes_opts(sp)
    sp.set_defaults(func=cmd_count_params)
    return p


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            echoed = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if echoed.get("command") != args.command:
            parser.error(f"config was written by {echoed.get('command')!r}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k: v for k, v in echoed.items() if k != "command"})
        args = parser.parse_args(argv)
    if not args.graph:
        parser.error("the following arguments are required: --graph")
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        args.func(args)
    except InputError as exc:
        print(f"conet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"conet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConetError as exc:
        print(f"conet {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
