"""Command-line entry point: ``gnnbound <command> [flags]``.

Commands: gen-data, spectral, train, bounds, lowerbound, hessian.  Every
command accepts ``--config FILE`` with ``key=value`` lines; flags override the
file.  Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O.
"""

import argparse
import json
import logging
import math
import sys

import numpy as np

from . import bounds as bd
from .graph import DiffusionKind, FAMILIES, diffusion_matrix, generate, max_degree
from .hessian import per_layer_alphas
from .io import (DatasetFormatError, atomic_write_text, csv_text, read_config,
                 read_dataset, write_dataset)
from .linalg import ConvergenceError, spectral_norm
from .lowerbound import analytic_gap_std, build_instance, simulate_gap
from .model import (DatasetExample, forward, init_model, load_checkpoint, margin,
                    save_checkpoint)
from .trainer import TrainConfig, TrainingDivergence, mean_loss, train

log = logging.getLogger("gnnbound")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# named seed sub-streams
STREAMS = {"data": 1, "init": 2, "noise": 3, "probes": 4, "split": 5}


def stream(seed, name):
    return (int(seed), STREAMS[name])


def stream_int(seed, name):
    """A single integer seed for APIs that need one."""
    return int(np.random.SeedSequence(stream(seed, name)).generate_state(1)[0])


# -- helpers -----------------------------------------------------------------

def _parse_params(text):
    out = {}
    for part in filter(None, (p.strip() for p in (text or "").split(","))):
        if "=" not in part:
            raise ValueError(f"generator parameter {part!r} is not key=value")
        key, value = part.split("=", 1)
        out[key.strip()] = float(value) if "." in value or "e" in value.lower() else int(value)
    return out


def _int_list(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def degree_one_hot(graphs):
    width = max(max_degree(g) for g in graphs) + 1
    feats = []
    for g in graphs:
        X = np.zeros((g.n, width))
        X[np.arange(g.n), g.degrees().astype(int)] = 1.0
        feats.append(X)
    return feats


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        atomic_write_text(path, text)


def _json_path(args):
    if args.json is True:
        return None if args.out in (None, "-") else args.out + ".json"
    return args.json


def _model_family(model):
    if model.kind is DiffusionKind.SYM_NORMALIZED_SELF_LOOPS:
        return bd.Family.GCN
    if model.kind is DiffusionKind.GIN_AVERAGE:
        return bd.Family.GIN
    if model.kind is DiffusionKind.ROW_NORMALIZED:
        return bd.Family.SAGE_MEAN
    return bd.Family.MPNN


def _loss_kind(model):
    return "binary_logistic" if model.num_classes == 2 else "softmax_cross_entropy"


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args):
    params = _parse_params(args.params)
    if args.count < 1:
        raise ValueError("count must be >= 1")
    data_seed = stream_int(args.seed, "data")
    graphs = [generate(args.family, params, seed=data_seed + i) for i in range(args.count)]
    edges = np.array([g.num_edges for g in graphs])
    # label: denser-than-median graph
    threshold = float(np.median(edges))
    labels = [int(e > threshold) for e in edges]
    examples = [DatasetExample(X, g, y)
                for X, g, y in zip(degree_one_hot(graphs), graphs, labels)]
    write_dataset(args.out, examples)
    return EXIT_OK


def cmd_spectral(args):
    data = read_dataset(args.dataset)
    header = ("graph", "n", "max_degree", "norm_A", "norm_sym", "norm_rownorm")
    rows = []
    for i, ex in enumerate(data):
        G = ex.G
        try:
            row_norm = spectral_norm(diffusion_matrix(G, DiffusionKind.ROW_NORMALIZED))
        except ValueError:
            row_norm = None  # isolated node
        rows.append({
            "graph": i, "n": G.n, "max_degree": max_degree(G),
            "norm_A": spectral_norm(G.adjacency()),
            "norm_sym": spectral_norm(diffusion_matrix(G, DiffusionKind.SYM_NORMALIZED_SELF_LOOPS)),
            "norm_rownorm": row_norm,
        })
    agg = {"graph": "max"}
    for key in header[1:]:
        vals = [r[key] for r in rows if r[key] is not None]
        agg[key] = max(vals) if vals else None
    rows.append(agg)
    _write(args.out, csv_text(header, rows, schema="spectral"))
    return EXIT_OK


def _split(data, fraction, seed):
    if not 0 <= fraction < 1:
        raise ValueError("test fraction must lie in [0, 1)")
    order = np.random.default_rng(stream(seed, "split")).permutation(len(data))
    n_test = int(round(fraction * len(data)))
    test = [data[i] for i in order[:n_test]]
    train_set = [data[i] for i in order[n_test:]]
    return train_set, test


def cmd_train(args):
    data = read_dataset(args.dataset)
    if not data:
        raise ValueError("dataset is empty")
    train_set, test_set = _split(data, args.test_fraction, args.seed)
    d0 = data[0].X.shape[1]
    k = max(2, max(ex.y for ex in data) + 1)
    if args.depth < 2:
        raise ValueError("depth must be >= 2")
    hidden = d0 if args.tied else args.width
    widths = (d0,) + (hidden,) * (args.depth - 1) + (k,)
    model = init_model(widths, seed=stream(args.seed, "init"), scale=args.init_scale,
                       use_U=args.arch == "mpnn", heads=args.heads,
                       activations=(args.activation,) * 3, kind=args.diffusion,
                       weight_tying=args.tied)
    config = TrainConfig(
        optimizer=args.optimizer, lr=args.lr, epochs=args.epochs, batch_size=args.batch,
        weight_decay=args.weight_decay, nso_m=args.nso_m, nso_sigma=args.nso_sigma,
        seed=stream_int(args.seed, "noise"),
        loss="binary_logistic" if k == 2 else "softmax_cross_entropy",
        gin=args.heads, trace_monitor_every=args.trace_every or None,
        trace_method=args.trace, trace_probes=args.probes,
    )
    out = args.out
    if out in (None, "-"):
        raise ValueError("train needs --out PREFIX")
    model, history = train(model, train_set, test_set, config)
    save_checkpoint(model, out + ".ckpt.json")
    atomic_write_text(out + ".history.csv", history.to_csv())
    return EXIT_OK


def _alphas(model, data, args, kind, gin=False):
    return per_layer_alphas(model, data, args.trace, args.probes,
                            stream_int(args.seed, "probes"), kind, gin)


def cmd_bounds(args):
    model = load_checkpoint(args.checkpoint)
    data = read_dataset(args.dataset)
    kind = _loss_kind(model)
    l, widths = model.layers, model.widths
    wanted = {"ours", "hessian", "liao", "garg", "gin"} if args.bound == "all" else {args.bound}
    stats = bd.dataset_stats(data, model.kind, widths, model=model, loss_kind=kind,
                             B_floor=args.b_floor)
    norms = bd.measure_norms(model)
    gamma = args.gamma
    if gamma is None:
        gamma = float(np.median([margin(forward(model, ex)[0], ex.y) for ex in data]))
    if not gamma > 0:
        raise ValueError(f"median training margin is {gamma:.4g} <= 0; pass --gamma")
    emp = mean_loss(model, data, kind)
    report = bd.BoundReport(_model_family(model).value, l, stats, args.delta, args.epsilon, gamma)
    refusals = {}

    def attempt(name, fn):
        if name not in wanted:
            return
        try:
            report.add(name, fn())
        except bd.BoundRefusal as exc:
            refusals[name] = str(exc)

    smooth = model.is_smooth()

    def kappas():
        return bd.combined_kappas(model, kind)

    attempt("ours", lambda: bd.theorem1_bound(emp, norms, stats, l, widths, args.delta,
                                              args.epsilon, kappas() if smooth else None,
                                              smooth=smooth))

    def hessian():
        if not smooth:
            raise bd.BoundRefusal("Hessian traces need smooth activations")
        alphas = [a.alpha for a in _alphas(model, data, args, kind)]
        report.sigma = bd.optimal_sigma(norms, alphas, stats.B, stats.N, epsilon=args.epsilon)
        return bd.hessian_pacbayes_bound(emp, norms, alphas, stats.B, stats.N, args.epsilon)

    attempt("hessian", hessian)
    attempt("liao", lambda: bd.liao_bound(norms, stats, l, gamma, tied=model.weight_tying))
    attempt("garg", lambda: bd.garg_bound(norms, stats, l, gamma, tied=model.weight_tying))

    def gin():
        if model.V is None:
            raise bd.BoundRefusal("model has no GIN heads")
        if not smooth:
            raise bd.BoundRefusal("the GIN bound needs smooth activations")
        gin_emp = mean_loss(model, data, kind, gin=True)
        return bd.gin_bound(gin_emp, norms, stats, l, widths, args.epsilon, kappas())

    attempt("gin", gin)

    family = _model_family(model)
    loops = model.kind is DiffusionKind.ADJACENCY_SELF_LOOPS
    deps = [bd.graph_dependence(family, ex.G, l, self_loops=loops) for ex in data]
    for name, attr in (("dependence_ours", "ours"), ("dependence_prior_d", "prior_full"),
                       ("dependence_prior_sqrt_d", "prior_sqrt")):
        report.add(name, max(getattr(d, attr) for d in deps))

    rows = list(report.rows())
    for name, why in sorted(refusals.items()):
        row = dict(rows[0]) if rows else {}
        row.update({"model": report.model, "l": l, "bound": f"{name}:refused", "value": None})
        rows.append(row)
    _write(args.out, csv_text(bd.REPORT_COLUMNS, rows, schema="bounds"))
    if args.json:
        obj = report.to_dict()
        obj["refusals"] = refusals
        _write(_json_path(args), json.dumps(obj, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_lowerbound(args):
    rng = np.random.default_rng(stream(args.seed, "init"))
    if args.depth < 2:
        raise ValueError("depth must be >= 2")
    dims = [args.width] * args.depth + [2]
    weights = [rng.standard_normal((dims[t], dims[t + 1])) / math.sqrt(dims[t])
               for t in range(args.depth)]
    header = ("n", "N", "alpha", "L_plus", "L_minus", "analytic_std", "empirical_std",
              "trials")
    rows = []
    noise_seed = stream_int(args.seed, "noise")
    for n in _int_list(args.n_list):
        inst = build_instance(weights, n)
        for N in _int_list(args.N_list):
            _, emp = simulate_gap(inst, N, args.trials, noise_seed)
            rows.append({"n": n, "N": N, "alpha": inst.alpha, "L_plus": inst.L_plus,
                         "L_minus": inst.L_minus, "analytic_std": analytic_gap_std(inst, N),
                         "empirical_std": emp, "trials": args.trials})
    _write(args.out, csv_text(header, rows, schema="lowerbound"))
    return EXIT_OK


def cmd_hessian(args):
    model = load_checkpoint(args.checkpoint)
    data = read_dataset(args.dataset)
    kind = _loss_kind(model)
    stats = bd.dataset_stats(data, model.kind, model.widths, model=model, loss_kind=kind,
                             B_floor=args.b_floor)
    norms = bd.measure_norms(model)
    alphas = _alphas(model, data, args, kind)
    emp = mean_loss(model, data, kind)
    value = bd.hessian_pacbayes_bound(emp, norms, [a.alpha for a in alphas], stats.B,
                                      stats.N, args.epsilon)
    header = ("layer", "method", "probes", "mean_trace", "alpha", "hessian_bound")
    rows = [{"layer": i, "method": args.trace,
             "probes": args.probes if args.trace == "hutchinson" else None,
             "mean_trace": a.mean, "alpha": a.alpha, "hessian_bound": value}
            for i, a in enumerate(alphas, start=1)]
    _write(args.out, csv_text(header, rows, schema="hessian"))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _common(p, out_help="output path ('-' for stdout)"):
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-", help=out_help)


def _trace_flags(p):
    p.add_argument("--trace", choices=("exact", "hutchinson"), default="exact")
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--epsilon", type=float, default=bd.DEFAULT_EPSILON)
    p.add_argument("--b-floor", type=float, default=bd.DEFAULT_B_FLOOR)


def build_parser():
    parser = argparse.ArgumentParser(prog="gnnbound", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic graph dataset")
    _common(p)
    p.add_argument("--family", choices=FAMILIES, default="ego_collab")
    p.add_argument("--params", default="", help="generator parameters, e.g. n=30,p_in=0.7")
    p.add_argument("--count", type=int, default=100)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("spectral", help="per-graph spectral norms and max degree")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_spectral)

    p = sub.add_parser("train", help="train a model; writes OUT.ckpt.json and OUT.history.csv")
    _common(p, out_help="output prefix")
    p.add_argument("--dataset", required=True)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--arch", choices=("gcn", "mpnn"), default="mpnn")
    p.add_argument("--diffusion", choices=[k.value for k in DiffusionKind], default="sym")
    p.add_argument("--activation", choices=("tanh", "sigmoid", "identity", "relu"),
                   default="tanh")
    p.add_argument("--tied", action="store_true", help="share W, U across layers 1..l-1")
    p.add_argument("--heads", action="store_true", help="GIN heads on every hidden layer")
    p.add_argument("--init-scale", type=float, default=1.0)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--nso-m", type=int, default=10)
    p.add_argument("--nso-sigma", type=float, default=0.0)
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--trace-every", type=int, default=0)
    p.add_argument("--trace", choices=("exact", "hutchinson"), default="exact")
    p.add_argument("--probes", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bounds", help="generalization bounds for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--bound", choices=("ours", "hessian", "liao", "garg", "gin", "all"),
                   default="all")
    _trace_flags(p)
    p.add_argument("--delta", type=float, default=bd.DEFAULT_DELTA)
    p.add_argument("--gamma", type=float, default=None,
                   help="margin (default: median training margin)")
    p.add_argument("--json", nargs="?", const=True, default=None,
                   help="also write a JSON mirror (default path OUT.json)")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("lowerbound", help="gap statistics of the worst-case instance")
    _common(p)
    p.add_argument("--n-list", default="1,2,4,8")
    p.add_argument("--N-list", default="100,1000")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--width", type=int, default=4)
    p.add_argument("--trials", type=int, default=2000)
    p.set_defaults(func=cmd_lowerbound)

    p = sub.add_parser("hessian", help="per-layer Hessian traces and the Hessian bound")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    _trace_flags(p)
    p.set_defaults(func=cmd_hessian)
    return parser


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv=None):
    """Parse flags, folding in ``--config`` values as defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        allowed = {a.dest for a in sub._actions} - {"help", "config", "func"}
        values = read_config(args.config, allowed)
        for action in sub._actions:
            if action.dest in values and isinstance(action, argparse._StoreTrueAction):
                values[action.dest] = values[action.dest].lower() in ("1", "true", "yes", "on")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.verbose:
        logging.getLogger().setLevel(logging.INFO)
    try:
        return args.func(args)
    except (TrainingDivergence, ConvergenceError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DatasetFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
