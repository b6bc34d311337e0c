"""Command-line front end for spiral generation, training, and the scan suite.

Every subcommand accepts ``--config FILE`` pointing at a JSON object whose
keys (with ``-`` or ``_``) override the built-in defaults; explicit flags
win over the file. Scans write machine-readable records (JSON or CSV);
training writes a checkpoint; divergence inside a scan is recorded, not
fatal. Exit code is 0 on success and 1 on a fatal error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .data import (
    Dataset,
    gen_spirals,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
    standardize,
)
from .depth import PRUNE_HEURISTICS, make_prior, predict_marginal
from .experiments import (
    DDN_DEPTH_GRID,
    SpiralConfig,
    emit_results,
    measure_speedup,
    run_depth_scan,
    run_ntrain_scan,
    run_rotation_scan,
    run_width_scan,
    summarize,
)
from .metrics import evaluate_predictions, reliability_csv
from .network import NetworkConfig, forward_all_depths
from .training import TrainConfig, train_ddn, train_ldn
from .autodiff import no_grad


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _add_common(parser):
    parser.add_argument("--config", help="JSON file of default option values")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True, help="output path")


def _add_scan_common(parser):
    _add_common(parser)
    parser.add_argument("--format", choices=["json", "csv"], default="json")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--repeats", type=int, default=4)
    parser.add_argument("--width", type=int, default=20)
    parser.add_argument("--max-depth", type=int, default=20)
    parser.add_argument("--rotation", type=float, default=720.0)
    parser.add_argument("--n-train", type=int, default=200)
    parser.add_argument("--n-test", type=int, default=1800)
    parser.add_argument("--sigma", type=float, default=0.15)
    parser.add_argument("--gamma", type=float, default=0.85)
    _add_train_flags(parser)


def _add_train_flags(parser):
    parser.add_argument("--lr", type=float, default=0.1)
    parser.add_argument("--momentum", type=float, default=0.5)
    parser.add_argument("--batch-size", type=int, default=512)
    parser.add_argument("--patience", type=int, default=500)
    parser.add_argument("--max-iterations", type=int, default=20000)
    parser.add_argument("--eval-every", type=int, default=1)


def _train_config(args):
    return TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        batch_size=args.batch_size,
        early_stop_patience=args.patience,
        max_iterations=args.max_iterations,
        eval_every=args.eval_every,
        seed=args.seed,
    )


def _spiral_config(args):
    return SpiralConfig(
        n_train=args.n_train,
        n_test=args.n_test,
        rotation_deg=args.rotation,
        sigma=args.sigma,
    )


def cmd_gen_data(args):
    train = gen_spirals(args.n_train, args.rotation, args.sigma, args.seed)
    test = gen_spirals(args.n_test, args.rotation, args.sigma, args.seed + 1)
    if args.raw:
        out_train, out_test = train, test
    else:
        out_train, (out_test,), _ = standardize(train, [test])
    save_dataset(out_train, f"{args.out}.train.csv")
    save_dataset(out_test, f"{args.out}.test.csv")
    print(f"wrote {args.out}.train.csv ({train.n} rows) and {args.out}.test.csv ({test.n} rows)")
    return 0


def cmd_train(args):
    dataset = load_dataset(args.data)
    net_config = NetworkConfig(args.max_depth, args.width, dataset.x.shape[1], 2)
    train_config = _train_config(args)

    def progress(iteration, objective, d_argmax):
        print(f"iter={iteration} objective={objective:.6f} d_argmax={d_argmax}", flush=True)

    if args.fixed_depth is not None:
        model = train_ddn(dataset, args.fixed_depth, net_config, train_config, progress=progress)
        gamma = args.gamma
    else:
        prior = make_prior(args.max_depth, args.gamma)
        model = train_ldn(dataset, net_config, prior, train_config, progress=progress)
        gamma = args.gamma
    save_checkpoint(args.out, model.network, model.posterior, gamma)
    alpha = model.posterior.probs
    print(f"best objective {model.history.best_objective:.6f} at iteration {model.history.best_iteration}")
    print("depth posterior: " + " ".join(f"{a:.4f}" for a in alpha))
    for name, fn in PRUNE_HEURISTICS.items():
        print(f"d_opt[{name}] = {fn(alpha).d_opt}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    net, posterior, _prior = ckpt.build()
    dataset = load_dataset(args.data)
    with no_grad():
        trace = forward_all_depths(net, dataset.x, mode="eval", update_running=False)
    per_depth_probs = trace.prob_array()
    alpha = posterior.probs

    prune = PRUNE_HEURISTICS[args.heuristic](alpha)
    pruned_probs = predict_marginal(
        per_depth_probs[:, : prune.d_opt + 1, :], prune.truncated
    )
    full_probs = predict_marginal(per_depth_probs, alpha)
    report = {
        "heuristic": args.heuristic,
        "d_opt": prune.d_opt,
        "pruned": evaluate_predictions(pruned_probs, dataset.y, args.bins).to_dict(),
        "full": evaluate_predictions(full_probs, dataset.y, args.bins).to_dict(),
        "per_depth": [
            evaluate_predictions(per_depth_probs[:, i, :], dataset.y, args.bins).to_dict()
            for i in range(per_depth_probs.shape[1])
        ],
    }
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2)
    if args.reliability_csv:
        pruned_report = evaluate_predictions(pruned_probs, dataset.y, args.bins)
        with open(args.reliability_csv, "w") as fh:
            fh.write(reliability_csv(pruned_report.bins))
    print(
        f"d_opt={prune.d_opt} pruned loglik={report['pruned']['mean_loglik']:.4f} "
        f"error={report['pruned']['error']:.4f} ece={report['pruned']['ece']:.4f}"
    )
    return 0


def _finish_scan(records, args):
    emit_results(records, args.out, args.format)
    for row in summarize(records):
        print(row)
    n_div = sum(r.diverged for r in records)
    print(f"{len(records)} records written to {args.out} ({n_div} diverged)")
    return 0


def cmd_scan_depth(args):
    records = run_depth_scan(
        args.depths,
        repeats=args.repeats,
        base_seed=args.seed,
        ddn_depths=tuple(args.ddn_depths),
        width=args.width,
        data=_spiral_config(args),
        gamma=args.gamma,
        train=_train_config(args),
        workers=args.workers,
    )
    return _finish_scan(records, args)


def cmd_scan_width(args):
    records = run_width_scan(
        args.widths,
        repeats=args.repeats,
        base_seed=args.seed,
        max_depth=args.max_depth,
        data=_spiral_config(args),
        gamma=args.gamma,
        train=_train_config(args),
        workers=args.workers,
    )
    return _finish_scan(records, args)


def cmd_scan_rotation(args):
    records = run_rotation_scan(
        args.rotations,
        repeats=args.repeats,
        base_seed=args.seed,
        max_depth=args.max_depth,
        width=args.width,
        data=_spiral_config(args),
        gamma=args.gamma,
        train=_train_config(args),
        workers=args.workers,
    )
    return _finish_scan(records, args)


def cmd_scan_n(args):
    records = run_ntrain_scan(
        args.ns,
        repeats=args.repeats,
        base_seed=args.seed,
        max_depth=args.max_depth,
        width=args.width,
        data=_spiral_config(args),
        gamma=args.gamma,
        train=_train_config(args),
        workers=args.workers,
    )
    return _finish_scan(records, args)


def cmd_speedup(args):
    ckpt = load_checkpoint(args.checkpoint)
    net, posterior, _prior = ckpt.build()
    if args.data:
        x = load_dataset(args.data).x
    else:
        x = np.random.default_rng(args.seed).standard_normal((args.batch, net.config.input_dim))
    d_opt = args.d_opt
    if d_opt is None:
        d_opt = PRUNE_HEURISTICS["argmax"](posterior.probs).d_opt
    result = measure_speedup(net, d_opt, x, passes=args.passes)
    doc = {
        "d_opt": result.d_opt,
        "max_depth": result.max_depth,
        "full_seconds": result.full_seconds,
        "truncated_seconds": result.truncated_seconds,
        "speedup": result.speedup,
        "passes": result.passes,
    }
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2)
    print(
        f"full {result.full_seconds * 1e3:.3f} ms, truncated {result.truncated_seconds * 1e3:.3f} ms, "
        f"speedup {100 * result.speedup:.1f}%"
    )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ldn",
        description="Variational depth search for residual networks on spiral benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a standardized spiral train/test pair")
    _add_common(p)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=1800)
    p.add_argument("--rotation", type=float, default=720.0)
    p.add_argument("--sigma", type=float, default=0.15)
    p.add_argument("--raw", action="store_true", help="skip standardization")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True, help="training CSV from gen-data")
    p.add_argument("--max-depth", type=int, default=20)
    p.add_argument("--width", type=int, default=20)
    p.add_argument("--gamma", type=float, default=0.85)
    p.add_argument(
        "--fixed-depth",
        type=int,
        default=None,
        help="train a fixed-depth baseline instead of learning the depth",
    )
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bins", type=int, default=10, help="calibration bins")
    p.add_argument("--heuristic", choices=sorted(PRUNE_HEURISTICS), default="argmax")
    p.add_argument("--reliability-csv", help="also write reliability-diagram data here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("scan-depth", help="max-depth scan with fixed-depth baselines")
    _add_scan_common(p)
    p.add_argument("--depths", type=_int_list, default=[20, 35, 50])
    p.add_argument("--ddn-depths", type=_int_list, default=list(DDN_DEPTH_GRID))
    p.set_defaults(func=cmd_scan_depth)

    p = sub.add_parser("scan-width", help="layer width scan")
    _add_scan_common(p)
    p.add_argument("--widths", type=_int_list, default=[2, 5, 10, 20, 50, 100])
    p.set_defaults(func=cmd_scan_width)

    p = sub.add_parser("scan-rotation", help="spiral rotation scan")
    _add_scan_common(p)
    p.add_argument("--rotations", type=_float_list, default=[360.0, 540.0, 720.0])
    p.set_defaults(func=cmd_scan_rotation)

    p = sub.add_parser("scan-n", help="train-set size scan")
    _add_scan_common(p)
    p.add_argument("--ns", type=_int_list, default=[50, 200, 500, 1000])
    p.set_defaults(func=cmd_scan_n)

    p = sub.add_parser("speedup", help="measure truncated vs full forward time")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset CSV used as the timing batch")
    p.add_argument("--batch", type=int, default=1800, help="synthetic batch size if no data")
    p.add_argument("--d-opt", type=int, default=None)
    p.add_argument("--passes", type=int, default=100)
    p.set_defaults(func=cmd_speedup)

    return parser


def _apply_config_file(parser, argv):
    """Use --config JSON values as subcommand defaults; flags still win."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        return argv
    with open(argv[i + 1]) as fh:
        values = json.load(fh)
    defaults = {key.replace("-", "_"): val for key, val in values.items()}
    for action in parser._subparsers._group_actions:
        for sub in action.choices.values():
            known = {a.dest for a in sub._actions}
            sub.set_defaults(**{k: v for k, v in defaults.items() if k in known})
    return argv


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (ValueError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
