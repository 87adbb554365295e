"""Data-budget experiments: multi-task vs task-specific, ratio sweeps, 3-task mixtures.

Every run is identified by (experiment, condition, seed). Conditions within an
experiment share the training streams (prefixes of the same per-seed sample
sequence) and the same novel-object evaluation pools.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import data
from .data import TASKS
from .errors import ContractError
from .evaluate import EVALUATORS, METRIC_NAMES
from .io import dataset_bytes
from .net import NetConfig
from .train import Trainer

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 1_000_003


@dataclass(frozen=True)
class TrainSettings:
    """Desk-scale training budget shared by every run of an experiment."""

    iterations: int = 3000
    batch_size: int = 32
    width_scale: Fraction = Fraction(1, 4)
    lr_step: int = 1500
    eval_size: int = 500
    balanced: bool = True
    train_objects: int = data.DEFAULT_POOL_SIZES["train"]
    novel_objects: int = data.DEFAULT_POOL_SIZES["novel"]

    def net_config(self) -> NetConfig:
        return NetConfig(width_scale=self.width_scale)


def split_counts(total: int, ratios: Dict[str, float]) -> Dict[str, int]:
    """Largest-remainder rounding of ``total * r`` so the counts sum to ``total``."""
    fr = {t: Fraction(str(ratios.get(t, 0))) for t in TASKS}
    if any(v < 0 for v in fr.values()):
        raise ContractError(f"negative ratio in {ratios}")
    if abs(float(sum(fr.values())) - 1.0) > 1e-9:
        raise ContractError(f"ratios must sum to 1, got {float(sum(fr.values()))}")
    exact = {t: total * v / sum(fr.values()) for t, v in fr.items()}
    counts = {t: math.floor(v) for t, v in exact.items()}
    left = total - sum(counts.values())
    order = sorted(TASKS, key=lambda t: (-(exact[t] - counts[t]), TASKS.index(t)))
    for t in order[:left]:
        counts[t] += 1
    return counts


@dataclass(frozen=True)
class Condition:
    name: str
    total: int
    ratios: Tuple[float, float, float]  # grasp, push, poke

    @property
    def counts(self) -> Dict[str, int]:
        return split_counts(self.total, dict(zip(TASKS, self.ratios)))

    @property
    def tasks(self) -> Tuple[str, ...]:
        return tuple(t for t, c in self.counts.items() if c > 0)


@dataclass
class ExperimentPlan:
    experiment: str
    conditions: List[Condition]
    seeds: List[int]
    settings: TrainSettings = field(default_factory=TrainSettings)
    notes: List[str] = field(default_factory=list)

    def max_counts(self) -> Dict[str, int]:
        return {t: max([c.counts[t] for c in self.conditions] + [0]) for t in TASKS}

    def eval_tasks(self) -> Tuple[str, ...]:
        return tuple(t for t in TASKS if any(t in c.tasks for c in self.conditions))


CSV_FIELDS = ["experiment", "condition", "seed", "task", "metric", "value", "N",
              "r_grasp", "r_push", "r_poke", "n_grasp", "n_push", "n_poke", "iteration", "pool_hash"]


@dataclass(frozen=True)
class MetricRow:
    experiment: str
    condition: str
    seed: int
    task: str
    metric: str
    value: float
    N: int
    ratios: Tuple[float, float, float]
    counts: Tuple[int, int, int]
    iteration: int
    pool_hash: str

    def as_csv(self) -> list:
        return [self.experiment, self.condition, self.seed, self.task, self.metric,
                format(self.value, ".17g"), self.N, *(format(r, "g") for r in self.ratios),
                *self.counts, self.iteration, self.pool_hash]


# -- data, cached per process ------------------------------------------------------------------

@lru_cache(maxsize=16)
def _train_stream(task: str, n: int, seed: int, objects: int, balanced: bool):
    return data.generate(task, n, seed, _pool("train", objects), balanced)


@lru_cache(maxsize=16)
def _eval_pool(task: str, n: int, seed: int, objects: int, balanced: bool):
    return data.generate(task, n, EVAL_SEED_OFFSET + seed, _pool("novel", objects), balanced)


@lru_cache(maxsize=4)
def _pool(name: str, size: int):
    from .world import ObjectPool
    return ObjectPool(name, size)


def pool_hash(ds) -> str:
    return hashlib.sha256(dataset_bytes(ds)).hexdigest()[:16]


def training_data(plan: ExperimentPlan, cond: Condition, seed: int) -> Dict[str, object]:
    s = plan.settings
    full = plan.max_counts()
    out = {}
    for task, n in cond.counts.items():
        if n > 0:
            out[task] = data.head(_train_stream(task, full[task], seed, s.train_objects, s.balanced), n)
    return out


def eval_data(plan: ExperimentPlan, seed: int) -> Dict[str, object]:
    s = plan.settings
    return {t: _eval_pool(t, s.eval_size, seed, s.novel_objects, s.balanced) for t in plan.eval_tasks()}


# -- running ---------------------------------------------------------------------------------------

def run_condition(plan: ExperimentPlan, cond: Condition, seed: int) -> List[MetricRow]:
    """Train one (condition, seed) and evaluate it before and after training."""
    s = plan.settings
    train = training_data(plan, cond, seed)
    pools = eval_data(plan, seed)
    trainer = Trainer.fresh(s.net_config(), train, batch_size=s.batch_size, seed=seed, lr_step=s.lr_step)
    hashes = {t: pool_hash(pools[t]) for t in cond.tasks}
    counts = tuple(cond.counts[t] for t in TASKS)

    def measure(iteration: int) -> List[MetricRow]:
        return [MetricRow(plan.experiment, cond.name, seed, t, METRIC_NAMES[t],
                          EVALUATORS[t](trainer.net, pools[t]), cond.total, cond.ratios,
                          counts, iteration, hashes[t])
                for t in cond.tasks]

    rows = measure(0)
    trainer.run(s.iterations)
    rows += measure(trainer.iteration)
    log.info("%s/%s seed %d done: %s", plan.experiment, cond.name, seed,
             ", ".join(f"{r.metric}={r.value:.4f}" for r in rows[len(cond.tasks):]))
    return rows


def _job(args):
    plan, cond, seed = args
    return run_condition(plan, cond, seed)


def run_plan(plan: ExperimentPlan, workers: int = 1) -> List[MetricRow]:
    """Run every (condition, seed); rows come back in plan order regardless of completion order."""
    jobs = [(plan, c, s) for s in plan.seeds for c in plan.conditions]
    if workers <= 1:
        results = [_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_job, jobs))
    return [row for rows in results for row in rows]


def rows_to_csv(rows: Iterable[MetricRow]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow(r.as_csv())
    return buf.getvalue()


def read_csv(text: str) -> List[dict]:
    return list(csv.DictReader(_io.StringIO(text)))


# -- experiment definitions -------------------------------------------------------------------------

def _scaled(n: float, scale: float) -> int:
    return max(1, int(round(n * scale)))


def fig5_plan(ns: Sequence[int], seeds: Sequence[int], settings: TrainSettings = TrainSettings(),
              scale: float = 1.0) -> ExperimentPlan:
    """Fixed budget N: grasp-only, push-only, and a 50/50 grasp+push joint model."""
    conds = []
    for n in ns:
        n = _scaled(n, scale)
        conds += [Condition(f"grasp_only_N{n}", n, (1.0, 0.0, 0.0)),
                  Condition(f"push_only_N{n}", n, (0.0, 1.0, 0.0)),
                  Condition(f"joint_N{n}", n, (0.5, 0.5, 0.0))]
    notes = ["reference (robot data, not reproducible here): 2.5K grasp + 2.5K push beat 5K grasp-only on grasping"]
    return ExperimentPlan("fig5", conds, list(seeds), settings, notes)


FIG6_RATIOS = (0.25, 0.5, 0.75, 1.0)


def fig6_plan(seeds: Sequence[int], settings: TrainSettings = TrainSettings(), scale: float = 1.0,
              totals: Sequence[int] = (5000, 20000), ratios: Sequence[float] = FIG6_RATIOS) -> ExperimentPlan:
    """Sweep the share r of the original task within a fixed total (rest from the other task)."""
    conds = []
    for total in totals:
        n = _scaled(total, scale)
        for r in ratios:
            conds.append(Condition(f"grasp_r{r:g}_N{n}", n, (r, 1.0 - r, 0.0)))
            conds.append(Condition(f"push_r{r:g}_N{n}", n, (1.0 - r, r, 0.0)))
    notes = ["reference: grasping best at r=0.5", "reference: pushing best at r=0.75"]
    return ExperimentPlan("fig6", conds, list(seeds), settings, notes)


FIG7_MIXES = {
    "G62.5+P25+K12.5": (0.625, 0.25, 0.125),
    "G62.5+K25+P12.5": (0.625, 0.125, 0.25),
    "G50+P25+K25": (0.5, 0.25, 0.25),
    "G50+P50": (0.5, 0.5, 0.0),
    "P62.5+G25+K12.5": (0.25, 0.625, 0.125),
    "P62.5+K25+G12.5": (0.125, 0.625, 0.25),
    "P50+G25+K25": (0.25, 0.5, 0.25),
}


def fig7_plan(seeds: Sequence[int], settings: TrainSettings = TrainSettings(), scale: float = 1.0,
              total: int = 4000, mixes: Optional[Dict[str, tuple]] = None) -> ExperimentPlan:
    n = _scaled(total, scale)
    conds = [Condition(f"{name}_N{n}", n, mix) for name, mix in (mixes or FIG7_MIXES).items()]
    notes = ["reference at 4K: best grasp error 28% with two tasks vs 26% with three"]
    return ExperimentPlan("fig7", conds, list(seeds), settings, notes)


# -- analysis ----------------------------------------------------------------------------------------

def bootstrap_ci(values: Sequence[float], n_boot: int = 10000, level: float = 0.95,
                 seed: int = 0) -> Tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    v = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(seed)
    means = v[rng.integers(0, len(v), size=(n_boot, len(v)))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, 1 - (1 - level) / 2])
    return float(lo), float(hi)


def final_rows(rows: Iterable[MetricRow]) -> Dict[tuple, MetricRow]:
    """Last-iteration row per (condition, seed, task)."""
    out: Dict[tuple, MetricRow] = {}
    for r in rows:
        key = (r.condition, r.seed, r.task)
        if r.iteration > 0 and (key not in out or r.iteration > out[key].iteration):
            out[key] = r
    return out


def sanity_floor(rows: Sequence[MetricRow]) -> List[dict]:
    """Compare every trained (condition, seed, task) with its own iteration-0 metric."""
    start = {(r.condition, r.seed, r.task): r.value for r in rows if r.iteration == 0}
    return [{"condition": k[0], "seed": k[1], "task": k[2], "untrained": start[k], "trained": r.value,
             "improved": r.value < start[k]}
            for k, r in final_rows(rows).items()]


def pool_hash_audit(rows: Sequence[MetricRow]) -> bool:
    """True when all conditions of a seed evaluated each task on byte-identical pools."""
    seen: Dict[tuple, str] = {}
    for r in rows:
        key = (r.experiment, r.seed, r.task)
        if seen.setdefault(key, r.pool_hash) != r.pool_hash:
            return False
    return True


def fig5_trend(rows: Sequence[MetricRow], n_boot: int = 10000) -> dict:
    """Per N and task: joint minus task-specific metric (lower is better for both metrics)."""
    fin = final_rows(rows)
    ns = sorted({r.N for r in rows})
    seeds = sorted({r.seed for r in rows})
    out = {"experiment": "fig5", "comparison": "joint - task_specific (negative favours multi-task)",
           "seeds": seeds, "entries": []}
    for n in ns:
        for task, single in (("grasp", f"grasp_only_N{n}"), ("push", f"push_only_N{n}")):
            diffs = []
            for s in seeds:
                a = fin.get((f"joint_N{n}", s, task))
                b = fin.get((single, s, task))
                if a is not None and b is not None:
                    diffs.append(a.value - b.value)
            if not diffs:
                continue
            lo, hi = bootstrap_ci(diffs, n_boot=n_boot, seed=n)
            mean = float(np.mean(diffs))
            out["entries"].append({
                "N": n, "task": task, "metric": METRIC_NAMES[task], "n_seeds": len(diffs),
                "diffs": diffs, "mean_diff": mean, "ci95": [lo, hi],
                "sign": "multi-task better" if mean < 0 else ("task-specific better" if mean > 0 else "tie"),
                "ci_excludes_zero": bool(lo > 0 or hi < 0),
            })
    return out


def format_trend(trend: dict) -> str:
    lines = [f"# {trend['experiment']} trend report: {trend['comparison']}"]
    for e in trend["entries"]:
        lines.append(f"N={e['N']:<6} {e['task']:<5} {e['metric']:<11} mean_diff={e['mean_diff']:+.5f} "
                     f"ci95=[{e['ci95'][0]:+.5f}, {e['ci95'][1]:+.5f}] seeds={e['n_seeds']} -> {e['sign']}"
                     + (" (interval excludes 0)" if e["ci_excludes_zero"] else ""))
    return "\n".join(lines) + "\n"


def write_trend(path_prefix: str, trend: dict) -> None:
    with open(path_prefix + ".trend.json", "w") as fh:
        json.dump(trend, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(path_prefix + ".trend.txt", "w") as fh:
        fh.write(format_trend(trend))


def with_settings(plan: ExperimentPlan, **kw) -> ExperimentPlan:
    return replace(plan, settings=replace(plan.settings, **kw))


def summary_dat(rows: Sequence[MetricRow]) -> str:
    """Whitespace table of final metrics averaged over seeds, one line per (condition, task)."""
    groups: Dict[tuple, List[float]] = {}
    for (cond, _seed, task), r in final_rows(rows).items():
        groups.setdefault((cond, task, r.N, r.ratios), []).append(r.value)
    lines = ["# condition task N r_grasp r_push r_poke mean std n_seeds"]
    for (cond, task, n, ratios), vals in groups.items():
        v = np.asarray(vals)
        lines.append(f"{cond} {task} {n} {ratios[0]:g} {ratios[1]:g} {ratios[2]:g} "
                     f"{v.mean():.10g} {v.std():.10g} {len(v)}")
    return "\n".join(lines) + "\n"
