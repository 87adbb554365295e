"""Command line: gen-data, train, eval, experiment.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from fractions import Fraction
from pathlib import Path
from typing import List, Optional

from . import data, experiments
from .config import TrainPlan, parse_ints, parse_mix
from .errors import ContractError, DataError, NumericError
from .evaluate import EVALUATORS, METRIC_NAMES
from .io import load_checkpoint, load_dataset, restore, save_checkpoint, save_dataset

log = logging.getLogger("mtmanip")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fraction(text: str) -> Fraction:
    try:
        v = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if v <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _int_list(text: str) -> List[int]:
    try:
        vals = list(parse_ints(text))
    except ContractError as exc:
        raise argparse.ArgumentTypeError(str(exc))
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _mix(text: str):
    try:
        return parse_mix(text)
    except ContractError as exc:
        raise argparse.ArgumentTypeError(str(exc))


# -- gen-data ---------------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    counts = experiments.split_counts(args.n, dict(zip(data.TASKS, args.task_mix)))
    sets = data.build_datasets(counts, args.seed, pool=args.pool, pool_size=args.pool_size,
                               balanced=not args.unbalanced, poke_noise=args.poke_noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for task, ds in sets.items():
        path = out / f"{task}.mtmd"
        save_dataset(path, ds)
        print(f"{path}\t{task}\t{len(ds)}")
    return EXIT_OK


# -- train ------------------------------------------------------------------------------------------

def _plan_datasets(plan: TrainPlan):
    if plan.data_dir:
        sets = {}
        for task in data.TASKS:
            path = Path(plan.data_dir) / f"{task}.mtmd"
            if path.exists():
                sets[task] = load_dataset(path)
        if not sets:
            raise DataError(f"no *.mtmd datasets found in {plan.data_dir}")
        return sets
    counts = experiments.split_counts(plan.n, dict(zip(data.TASKS, plan.task_mix)))
    return data.build_datasets(counts, plan.seed, balanced=plan.balanced, poke_noise=plan.poke_noise)


def cmd_train(args) -> int:
    from .train import Trainer
    from .net import NetConfig

    plan = TrainPlan.load(args.plan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sets = _plan_datasets(plan)
    if plan.resume:
        trainer = Trainer.from_checkpoint(load_checkpoint(plan.resume), sets, plan.batch_size)
    else:
        trainer = Trainer.fresh(NetConfig(width_scale=plan.width_scale), sets, plan.batch_size,
                                plan.seed, plan.lr_step)
    loss_rows = []

    def on_step(it, losses):
        loss_rows.append([it] + [("" if losses.get(t) is None else format(losses.get(t), ".17g"))
                                 for t in data.TASKS])
        if plan.checkpoint_every and it % plan.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_{it:07d}.mtck", trainer.checkpoint())
        if plan.log_every and it % plan.log_every == 0:
            log.info("iteration %d: %s", it, ", ".join(f"{t}={r}" for t, r in zip(data.TASKS, loss_rows[-1][1:]) if r))

    remaining = max(0, plan.iterations - trainer.iteration)
    trainer.run(remaining, callback=on_step)
    save_checkpoint(out / "checkpoint.mtck", trainer.checkpoint())
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["iteration", *data.TASKS])
        w.writerows(loss_rows)

    novel = experiments._pool("novel", data.DEFAULT_POOL_SIZES["novel"])
    rows = []
    counts = tuple(len(sets[t]) if t in sets else 0 for t in data.TASKS)
    ratios = tuple(c / sum(counts) for c in counts)
    for task in sets:
        pool = data.generate(task, plan.eval_size, experiments.EVAL_SEED_OFFSET + plan.seed, novel, plan.balanced)
        rows.append(experiments.MetricRow("train", "plan", plan.seed, task, METRIC_NAMES[task],
                                          EVALUATORS[task](trainer.net, pool), sum(counts), ratios, counts,
                                          trainer.iteration, experiments.pool_hash(pool)))
    (out / "metrics.csv").write_text(experiments.rows_to_csv(rows), newline="")
    for r in rows:
        print(f"{r.task}\t{r.metric}\t{r.value:.6f}")
    return EXIT_OK


# -- eval -------------------------------------------------------------------------------------------

def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    net, _, _ = restore(ck)
    ds = load_dataset(args.dataset)
    value = EVALUATORS[ds.task](net, ds)
    print(f"{ds.task}\t{METRIC_NAMES[ds.task]}\t{value:.17g}\t{len(ds)}")
    return EXIT_OK


# -- experiment -------------------------------------------------------------------------------------

def cmd_experiment(args) -> int:
    settings = experiments.TrainSettings(
        iterations=args.iterations, batch_size=args.batch_size, width_scale=args.width_scale,
        lr_step=args.lr_step, eval_size=args.eval_size)
    if args.which == "fig5":
        plan = experiments.fig5_plan(args.ns, args.seeds, settings, args.scale)
    elif args.which == "fig6":
        plan = experiments.fig6_plan(args.seeds, settings, args.scale)
    else:
        plan = experiments.fig7_plan(args.seeds, settings, args.scale)
    rows = experiments.run_plan(plan, workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(experiments.rows_to_csv(rows), newline="")
    stem = str(out.with_suffix(""))
    notes = "".join(f"# {n}\n" for n in plan.notes)
    Path(stem + ".dat").write_text(notes + experiments.summary_dat(rows))
    if not experiments.pool_hash_audit(rows):
        log.error("pool-hash audit failed: conditions saw different evaluation pools")
        return EXIT_DATA
    if args.which == "fig5":
        trend = experiments.fig5_trend(rows)
        experiments.write_trend(stem, trend)
        sys.stdout.write(experiments.format_trend(trend))
    floor = experiments.sanity_floor(rows)
    bad = [f for f in floor if not f["improved"]]
    print(f"wrote {len(rows)} rows to {out}; {len(floor) - len(bad)}/{len(floor)} trained runs beat iteration 0")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtmanip", description="Multi-task manipulation learning on a synthetic tabletop.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate dataset files")
    g.add_argument("--task-mix", type=_mix, required=True, help="grasp,push,poke weights, e.g. 1,1,0")
    g.add_argument("--n", type=int, required=True, help="total records, split by largest remainder")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--pool", choices=("train", "novel"), default="train")
    g.add_argument("--pool-size", type=int, default=None, help="number of objects in the pool")
    g.add_argument("--unbalanced", action="store_true", help="natural grasp label rate instead of 50/50")
    g.add_argument("--poke-noise", type=float, default=0.0)
    g.add_argument("--out", required=True, help="output directory; writes <task>.mtmd")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a key=value plan")
    t.add_argument("--plan", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="run a data-budget study")
    x.add_argument("which", choices=("fig5", "fig6", "fig7"))
    x.add_argument("--scale", type=float, default=1.0, help="multiplies every dataset size")
    x.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    x.add_argument("--ns", type=_int_list, default=[500, 1000, 2000, 5000], help="fig5 budgets")
    x.add_argument("--iterations", type=int, default=3000)
    x.add_argument("--batch-size", type=int, default=32)
    x.add_argument("--width-scale", type=_fraction, default=Fraction(1, 4))
    x.add_argument("--lr-step", type=int, default=1500)
    x.add_argument("--eval-size", type=int, default=500)
    x.add_argument("--workers", type=int, default=1)
    x.add_argument("--out", required=True, help="CSV path")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"mtmanip: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"mtmanip: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"mtmanip: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
