# SPDX-License-Identifier: LGPL-3.0-or-later

"""
Command line entry point of the bench.

Exit codes: 0 success, 1 invalid input, 2 I/O failure, 3 divergence.
"""

from .common import (
    PerturbationMethod,
    RankCriterion,
    RunStatus,
    ConfigError,
    CountOverflowError,
    ShapeMismatchError,
    UnexpectedTypeError,
)
from .lowrank import CostModel, count_elements
from .objectives import build_objective, gradient_lipschitz, gradient_spectrum
from .optimizers import run_config, run_sweep, sweep_seeds
from .params import ModelParams, Parameter
from .rank_select import RankPolicy, rank_table
from .report import RunReport, emit_report, parse_config
from .rng import SeedSchedule, spawn_seeds
from .verify import (
    CROSS_COLUMNS,
    STAT_COLUMNS,
    accumulated_moment_error,
    convergence_race,
    cross_term_stats,
    one_step_error,
    theorem1_check,
)
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
import argparse
import logging
import sys

import numpy as np

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2
EXIT_DIVERGED = 3

# flag name -> config key, for train
_TRAIN_FLAGS = (
    "optimizer", "objective", "steps", "eta", "rho", "beta1", "beta2", "eps",
    "rank", "rank_auto", "threshold", "r_max", "criterion", "seed",
    "log_every", "unbiased_scale", "lazy_interval", "factor_refresh",
    "target_ratio", "record_wall_time", "out", "format",
)


def _seed(args: argparse.Namespace) -> int:
    return 0 if args.seed is None else args.seed


def _format(args: argparse.Namespace) -> str:
    return args.format or "csv"


def parse_sizes(text: str) -> List[Tuple[int, int]]:
    """Parse "32x32,128x128" into [(32, 32), (128, 128)]."""
    sizes = []
    for item in text.split(","):
        m, sep, n = item.strip().lower().partition("x")
        if not sep:
            raise ValueError(f"size {item!r} is not of the form MxN")
        sizes.append((int(m), int(n)))
    return sizes


def parse_etas(text: str) -> Dict[str, float]:
    """Parse "tezo=2.5e-4,mezo=1e-3" into {optimizer: eta}."""
    etas = dict()
    for item in text.split(","):
        name, sep, eta = item.partition("=")
        if not sep:
            raise ValueError(f"expected optimizer=eta, got {item!r}")
        etas[name.strip()] = float(eta)
    return etas


def parse_blocks(text: str) -> Dict[int, Tuple[str, ...]]:
    """Parse "W1,W2;W3" into {0: ("W1", "W2"), 1: ("W3",)}."""
    return {
        i: tuple(n.strip() for n in group.split(",") if n.strip())
        for i, group in enumerate(text.split(";"))
    }


def load_model_file(path: str) -> ModelParams:
    """Load the arrays of an .npz file in stored order; every matrix is its
    own block unless --blocks says otherwise."""
    with np.load(path) as data:
        params = [
            Parameter(name=k, value=np.array(data[k], dtype=np.float64), block=i)
            for i, k in enumerate(data.files)
        ]
    return ModelParams(params)


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {k: getattr(args, k, None) for k in _TRAIN_FLAGS}
    config = parse_config(args.config, overrides)
    if args.sweep:
        reports = run_sweep(config, args.sweep, args.jobs)
        seeds = sweep_seeds(config.seed, args.sweep)
        rows = []
        for i, (seed, rep) in enumerate(zip(seeds, reports)):
            rows += [(i, seed) + row for row in rep.rows]
        diverged = sum(r.status == RunStatus.diverged for r in reports)
        report = RunReport(
            header=config.as_dict(),
            columns=["run", "seed"] + reports[0].columns,
            rows=rows,
            totals={"runs": len(reports), "diverged_runs": diverged},
            status=RunStatus.diverged if diverged else RunStatus.completed,
        )
    else:
        report = run_config(config)
    emit_report(report, config.format, config.out)
    return EXIT_DIVERGED if report.status == RunStatus.diverged else EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    seed = _seed(args)
    stats = theorem1_check(args.m, args.n, args.r, args.trials, seed, rho=args.rho)
    report = RunReport(
        header={
            "m": args.m, "n": args.n, "r": args.r, "trials": args.trials,
            "rho": args.rho, "seed": seed,
        },
        columns=STAT_COLUMNS,
        rows=stats.rows(),
        totals={
            "delta": stats.delta,
            "delta_rho": stats.delta_rho,
            "emp_var": stats.emp_var,
            "pred_var": stats.pred_var,
            "emp_var_ratio": stats.ratio,
            "emp_var_ratio_se": stats.ratio_se,
            "max_z": stats.max_z,
        },
    )
    emit_report(report, _format(args), args.out)
    return EXIT_OK


def cmd_cross(args: argparse.Namespace) -> int:
    seed = _seed(args)
    stats = cross_term_stats(args.m, args.n, args.r, args.trials, seed)
    report = RunReport(
        header={"m": args.m, "n": args.n, "r": args.r, "trials": args.trials,
                "seed": seed},
        columns=CROSS_COLUMNS,
        rows=stats.rows(),
        totals={"max_z": stats.max_z},
    )
    emit_report(report, _format(args), args.out)
    return EXIT_OK


def cmd_moment_error(args: argparse.Namespace) -> int:
    seed = _seed(args)
    sizes = parse_sizes(args.sizes)
    seeds = spawn_seeds(SeedSchedule(seed), args.seeds)
    traces = accumulated_moment_error(
        sizes, args.r, args.steps, args.beta2, seeds, kappa=args.kappa
    )
    rows = []
    totals = dict()
    for tr in traces:
        for t in range(0, args.steps + 1, args.log_every):
            rows.append((tr.m, tr.n, tr.seed, t, float(tr.norms[t])))
        if args.steps % args.log_every:
            rows.append((tr.m, tr.n, tr.seed, args.steps, tr.terminal))
    for m, n in sizes:
        terminal = [tr.terminal for tr in traces if (tr.m, tr.n) == (m, n)]
        totals[f"mean_terminal_{m}x{n}"] = float(np.mean(terminal))
    report = RunReport(
        header={"sizes": args.sizes, "r": args.r, "steps": args.steps,
                "beta2": args.beta2, "kappa": args.kappa,
                "seeds": args.seeds, "seed": seed},
        columns=["m", "n", "seed", "step", "error_norm"],
        rows=rows,
        totals=totals,
    )
    emit_report(report, _format(args), args.out)
    return EXIT_OK


def cmd_one_step(args: argparse.Namespace) -> int:
    seed = _seed(args)
    results = one_step_error(parse_sizes(args.sizes), args.r, args.trials, seed)
    report = RunReport(
        header={"sizes": args.sizes, "r": args.r, "trials": args.trials,
                "seed": seed},
        columns=["m", "n", "r", "trials", "abs_error", "rel_error"],
        rows=[(e.m, e.n, e.r, e.trials, e.abs_error, e.rel_error) for e in results],
    )
    emit_report(report, _format(args), args.out)
    return EXIT_OK


def cmd_converge(args: argparse.Namespace) -> int:
    seed = _seed(args)
    etas = parse_etas(args.optimizers)
    base = parse_config(args.config, {
        "optimizer": next(iter(etas)),
        "objective": args.objective,
        "steps": args.steps,
        "rank": args.rank,
        "factor_refresh": args.factor_refresh,
        "log_every": args.log_every,
        "seed": seed,
    })
    seeds = sweep_seeds(seed, args.seeds)
    results = convergence_race(base, etas, seeds, args.target)
    rows = [
        (r.optimizer, r.seed, r.factor_refresh, r.steps_to_target, r.final_ratio,
         str(r.status))
        for r in results
    ]
    report = RunReport(
        header=dict(base.as_dict(), optimizers=args.optimizers,
                    target=args.target, seeds=args.seeds),
        columns=["optimizer", "seed", "factor_refresh", "steps_to_target",
                 "final_ratio", "status"],
        rows=rows,
        totals={"runs": len(rows)},
    )
    emit_report(report, _format(args), args.out)
    return EXIT_OK


def cmd_count(args: argparse.Namespace) -> int:
    method = PerturbationMethod.from_name(args.method)
    elements = count_elements(CostModel(method, args.m, args.n, args.r, args.T))
    report = RunReport(
        header={"seed": _seed(args)},
        columns=["method", "m", "n", "r", "T", "elements"],
        rows=[(str(method), args.m, args.n, args.r, args.T, elements)],
    )
    emit_report(report, _format(args), args.out)
    return EXIT_OK


def cmd_rank(args: argparse.Namespace) -> int:
    seed = _seed(args)
    if args.model_file:
        model = load_model_file(args.model_file)
        source = args.model_file
    elif args.objective:
        _, model = build_objective(args.objective, seed)
        source = args.objective
    else:
        raise ConfigError("model-file", "either --model-file or --objective is required")
    policy = RankPolicy(
        threshold_frac=args.threshold,
        r_max=args.rmax,
        blocks=parse_blocks(args.blocks) if args.blocks else {},
        criterion=RankCriterion.from_name(args.criterion),
        method=args.method,
    )
    report = RunReport(
        header={"source": source, "threshold": args.threshold,
                "r_max": args.rmax, "criterion": args.criterion,
                "blocks": args.blocks, "seed": seed},
        columns=["layer", "sigma1", "rank_raw", "rank_selected"],
        rows=rank_table(model, policy),
    )
    emit_report(report, _format(args), args.out)
    return EXIT_OK


def _suffixed(out: Optional[str], suffix: str) -> Optional[str]:
    if out is None or out == "-":
        return out
    p = Path(out)
    return str(p.with_name(f"{p.stem}_{suffix}{p.suffix}"))


def cmd_spectrum(args: argparse.Namespace) -> int:
    seed = _seed(args)
    objective, model = build_objective(args.net_spec, seed)
    lipschitz = gradient_lipschitz(objective, model, seed=seed)
    spec = gradient_spectrum(objective, model, args.steps, args.topk, seed, lr=args.lr)
    header = {"net_spec": args.net_spec, "steps": args.steps, "topk": args.topk,
              "lr": args.lr, "seed": seed, "smooth": objective.smooth}
    totals = {"gradient_lipschitz": lipschitz}
    for name in spec.spectra:
        totals[f"mean_cosine_{name}"] = spec.mean_off_diagonal(name)
        totals[f"weight_rank_{name}"] = spec.weight_rank[name]
        totals[f"grad_rank_{name}"] = spec.grad_rank[name]
    spectra = RunReport(
        header=header,
        columns=["layer", "step", "index", "sigma"],
        rows=[
            (name, t, i, float(s[t, i]))
            for name, s in spec.spectra.items()
            for t in range(s.shape[0]) for i in range(s.shape[1])
        ],
        totals=totals,
    )
    cosine = RunReport(
        header=header,
        columns=["layer", "step_i", "step_j", "cosine"],
        rows=[
            (name, i, j, float(c[i, j]))
            for name, c in spec.cosine.items()
            for i in range(c.shape[0]) for j in range(c.shape[1])
        ],
        totals=totals,
    )
    fmt = _format(args)
    emit_report(spectra, fmt, _suffixed(args.out, "spectra"))
    emit_report(cosine, fmt, _suffixed(args.out, "cosine"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base seed")
    common.add_argument("--out", default=None, help="output path, - for stdout")
    common.add_argument("--format", choices=("csv", "json"), default=None)
    common.add_argument("-v", "--verbose", action="store_true", default=None)

    parser = argparse.ArgumentParser(
        prog="tezo-bench",
        description="Zeroth-order optimizer bench and estimator checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[common], help="train an objective")
    train.add_argument("--config", default=None, help="key = value file")
    train.add_argument("--optimizer")
    train.add_argument("--objective")
    train.add_argument("--steps", type=int)
    train.add_argument("--eta", type=float)
    train.add_argument("--rho", type=float)
    train.add_argument("--beta1", type=float)
    train.add_argument("--beta2", type=float)
    train.add_argument("--eps", type=float)
    train.add_argument("--rank", type=int)
    train.add_argument("--rank-auto", dest="rank_auto", action="store_true", default=None)
    train.add_argument("--threshold", type=float)
    train.add_argument("--rmax", dest="r_max", type=int)
    train.add_argument("--criterion", choices=[str(c) for c in RankCriterion])
    train.add_argument("--log-every", dest="log_every", type=int)
    train.add_argument("--unbiased-scale", dest="unbiased_scale",
                       action="store_true", default=None)
    train.add_argument("--lazy-interval", dest="lazy_interval", type=int)
    train.add_argument("--factor-refresh", dest="factor_refresh", type=int)
    train.add_argument("--target-ratio", dest="target_ratio", type=float)
    train.add_argument("--record-wall-time", dest="record_wall_time",
                       action="store_true", default=None)
    train.add_argument("--sweep", type=int, default=0, help="runs with derived seeds")
    train.add_argument("--jobs", type=int, default=1, help="worker processes")
    train.set_defaults(func=cmd_train)

    stats = sub.add_parser("stats", parents=[common], help="estimator mean and variance")
    stats.add_argument("--m", type=int, required=True)
    stats.add_argument("--n", type=int, required=True)
    stats.add_argument("--r", type=int, required=True)
    stats.add_argument("--trials", type=int, default=1000000)
    stats.add_argument("--rho", type=float, default=None)
    stats.set_defaults(func=cmd_stats)

    cross = sub.add_parser("cross", parents=[common], help="cross-term mean")
    cross.add_argument("--m", type=int, required=True)
    cross.add_argument("--n", type=int, required=True)
    cross.add_argument("--r", type=int, required=True)
    cross.add_argument("--trials", type=int, default=100000)
    cross.set_defaults(func=cmd_cross)

    moment = sub.add_parser("moment-error", parents=[common],
                            help="accumulated second-moment error")
    moment.add_argument("--sizes", default="32x32,128x128")
    moment.add_argument("--r", type=int, default=8)
    moment.add_argument("--steps", type=int, default=1000)
    moment.add_argument("--beta2", type=float, default=0.99)
    moment.add_argument("--kappa", type=float, default=1.0)
    moment.add_argument("--seeds", type=int, default=5)
    moment.add_argument("--log-every", dest="log_every", type=int, default=10)
    moment.set_defaults(func=cmd_moment_error)

    one = sub.add_parser("one-step", parents=[common], help="one-step separable error")
    one.add_argument("--sizes", default="32x32,64x64,128x128")
    one.add_argument("--r", type=int, default=8)
    one.add_argument("--trials", type=int, default=1000)
    one.set_defaults(func=cmd_one_step)

    converge = sub.add_parser("converge", parents=[common],
                              help="steps to reach a loss ratio")
    converge.add_argument("--config", default=None)
    converge.add_argument("--objective", default="quad16")
    converge.add_argument("--optimizers", default="tezo=2.5e-4,mezo=1e-3")
    converge.add_argument("--steps", type=int, default=50000)
    converge.add_argument("--seeds", type=int, default=3)
    converge.add_argument("--target", type=float, default=1e-3)
    converge.add_argument("--rank", type=int, default=4)
    converge.add_argument("--factor-refresh", dest="factor_refresh", type=int,
                          default=None, help="redraw TeZO factors every N steps")
    converge.add_argument("--log-every", dest="log_every", type=int, default=10)
    converge.set_defaults(func=cmd_converge)

    count = sub.add_parser("count", parents=[common], help="generated element count")
    count.add_argument("--method", required=True,
                       choices=[str(m) for m in PerturbationMethod])
    count.add_argument("--m", type=int, required=True)
    count.add_argument("--n", type=int, required=True)
    count.add_argument("--r", type=int, required=True)
    count.add_argument("--T", type=int, required=True)
    count.set_defaults(func=cmd_count)

    rank = sub.add_parser("rank", parents=[common], help="layer-wise ranks")
    rank.add_argument("--model-file", dest="model_file", default=None, help=".npz file")
    rank.add_argument("--objective", default=None)
    rank.add_argument("--threshold", type=float, default=0.25)
    rank.add_argument("--rmax", type=int, default=64)
    rank.add_argument("--blocks", default=None, help='e.g. "W1,W2;W3"')
    rank.add_argument("--criterion", choices=[str(c) for c in RankCriterion],
                      default="largest")
    rank.add_argument("--method", choices=("auto", "jacobi", "lapack"), default="auto")
    rank.set_defaults(func=cmd_rank)

    spectrum = sub.add_parser("spectrum", parents=[common], help="gradient spectra")
    spectrum.add_argument("--net-spec", dest="net_spec", default="mlp:16-16-16-4")
    spectrum.add_argument("--steps", type=int, default=100)
    spectrum.add_argument("--topk", type=int, default=8)
    spectrum.add_argument("--lr", type=float, default=0.1)
    spectrum.set_defaults(func=cmd_spectrum)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (
        ConfigError,
        CountOverflowError,
        ShapeMismatchError,
        UnexpectedTypeError,
        ValueError,
    ) as e:
        logger.error("%s", e)
        return EXIT_INVALID
    except OSError as e:
        logger.error("%s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
