"""Deployment and offline protocols, lane metrics and bootstrap intervals.

CSV report columns (stable order)::

    lane, protocol, task, n, accuracy, ci_low, ci_high,
    mean_final_think, mean_rtf, mean_reward

Accuracy and CI bounds are percentages.  The ``task == "avg"`` row carries
the row-weighted average.
"""
from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .judge import Judge, stub_judge
from .policy import CostModel, Controller, PolicyParams, SoftmaxController, emitted_tokens, play_episode, play_offline
from .reward import RewardConfig, answer_matches, score_trajectory
from .stream import StreamTimeline
from .trace import Trajectory

log = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "lane", "protocol", "task", "n", "accuracy", "ci_low", "ci_high",
    "mean_final_think", "mean_rtf", "mean_reward",
)


@dataclass
class EpisodeResult:
    item_id: str
    task_kind: str
    correct: bool
    final_think_tokens: int
    pre_endpoint_thinks: int
    trajectory: Trajectory
    rtf_proxy: float
    reward: float
    mechanism: str = ""
    violations: tuple[str, ...] = ()
    skipped_ticks: tuple[int, ...] = ()


@dataclass(frozen=True)
class EvalConfig:
    cost_model: CostModel = field(default_factory=CostModel)
    reward_config: RewardConfig = field(default_factory=RewardConfig)
    group_by: str = "task_kind"


def rtf_proxy(trajectory: Trajectory, timeline: StreamTimeline, cost_model: CostModel) -> float:
    """Simulated controller seconds over stream seconds.

    One call per listening step on its (full, replayed) prefix, plus one call
    at the endpoint that emits the final think and the answer together.
    """
    total = 0.0
    for tick, action in trajectory.steps:
        total += cost_model.call_cost(timeline.prefix_extent(tick), emitted_tokens(action))
    tail = sum(a.token_count for a in (trajectory.final_think, trajectory.answer) if a is not None)
    if trajectory.final_think is not None or trajectory.answer is not None:
        total += cost_model.call_cost(timeline.endpoint_s, tail)
    return total / timeline.endpoint_s


def _result(prepared, episode, config: EvalConfig, judge: Judge) -> EpisodeResult:
    traj, item = episode.trajectory, prepared.item
    breakdown, report = score_trajectory(traj, prepared.timeline, item, judge, config.reward_config)
    answered = traj.answer is not None
    correct = report.valid and answered and answer_matches(traj.answer.text, item.gold, item.task_kind, item.options, judge)
    return EpisodeResult(
        item_id=item.item_id,
        task_kind=item.task_kind,
        correct=bool(correct),
        final_think_tokens=traj.final_think_tokens,
        pre_endpoint_thinks=len(traj.pre_endpoint_thinks),
        trajectory=traj,
        rtf_proxy=rtf_proxy(traj, prepared.timeline, config.cost_model),
        reward=breakdown.total,
        mechanism=prepared.timeline.mechanism,
        violations=tuple(v.value for v in report.violations),
        skipped_ticks=tuple(episode.skipped_ticks),
    )


def run_deployment(
    policy: PolicyParams | Controller,
    dataset: Sequence,
    config: EvalConfig = EvalConfig(),
    judge: Judge = stub_judge,
) -> list[EpisodeResult]:
    """Argmax tick loop per item; stale ticks are skipped under the cost model."""
    controller = SoftmaxController(policy, sample=False) if isinstance(policy, PolicyParams) else policy
    results = []
    for p in dataset:
        ep = play_episode(
            p.timeline, controller, np.random.default_rng(0), prompt_id=p.item.item_id,
            cost_model=config.cost_model, cap=config.reward_config.token_cap,
        )
        if ep.skipped_ticks:
            log.info("%s: skipped stale ticks %s", p.item.item_id, ep.skipped_ticks)
        results.append(_result(p, ep, config, judge))
    return results


def run_offline(
    policy: PolicyParams | Controller | None,
    dataset: Sequence,
    config: EvalConfig = EvalConfig(),
    judge: Judge = stub_judge,
) -> list[EpisodeResult]:
    """Full stream observed once; the policy has no listening decisions to make."""
    return [
        _result(p, play_offline(p.timeline, prompt_id=p.item.item_id, cap=config.reward_config.token_cap), config, judge)
        for p in dataset
    ]


# ---------------------------------------------------------------- metrics

def row_weighted_average(accuracies: Sequence[float], counts: Sequence[float]) -> float:
    a = np.asarray(accuracies, dtype=float)
    n = np.asarray(counts, dtype=float)
    if a.shape != n.shape or n.sum() <= 0:
        raise ValueError("need matching accuracies and positive counts")
    return float((a * n).sum() / n.sum())


def bootstrap_ci(correct_flags: Sequence[bool], n_resamples: int = 10_000, confidence: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile interval of the resampled mean."""
    flags = np.asarray(correct_flags, dtype=float)
    if flags.size == 0:
        raise ValueError("need at least one item")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, flags.size, size=(n_resamples, flags.size))
    means = flags[idx].mean(axis=1)
    alpha = (1.0 - confidence) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


@dataclass
class LaneReport:
    accuracy: dict[str, float]
    counts: dict[str, int]
    row_weighted_average: float
    mean_final_think: float
    mean_rtf: float
    mean_reward: float
    n_items: int


def aggregate(results: Sequence[EpisodeResult], task_counts: Mapping[str, float] | None = None, group_by: str = "task_kind") -> LaneReport:
    """Per-task accuracy (percent) and the row-weighted average.

    ``task_counts`` overrides the weights (e.g. a benchmark's published item
    counts); by default each task weighs by its own item count.
    """
    groups: dict[str, list[EpisodeResult]] = defaultdict(list)
    for r in results:
        groups[getattr(r, group_by)].append(r)
    declared = list(task_counts) if task_counts else sorted(groups)
    accuracy, counts = {}, {}
    for task in declared:
        rows = groups.get(task, [])
        if not rows:
            log.warning("task %r has no items and is excluded", task)
            continue
        accuracy[task] = 100.0 * sum(r.correct for r in rows) / len(rows)
        counts[task] = len(rows)
    weights = [task_counts[t] if task_counts else counts[t] for t in accuracy]
    avg = row_weighted_average(list(accuracy.values()), weights) if accuracy else float("nan")
    return LaneReport(
        accuracy=accuracy,
        counts=counts,
        row_weighted_average=avg,
        mean_final_think=float(np.mean([r.final_think_tokens for r in results])) if results else float("nan"),
        mean_rtf=float(np.mean([r.rtf_proxy for r in results])) if results else float("nan"),
        mean_reward=float(np.mean([r.reward for r in results])) if results else float("nan"),
        n_items=len(results),
    )


def report_rows(lane: str, protocol: str, results: Sequence[EpisodeResult], *, n_resamples: int = 10_000, seed: int = 0, group_by: str = "task_kind") -> list[dict]:
    rep = aggregate(results, group_by=group_by)
    rows = []
    by_task: dict[str, list[EpisodeResult]] = defaultdict(list)
    for r in results:
        by_task[getattr(r, group_by)].append(r)
    for task in rep.accuracy:
        rs = by_task[task]
        lo, hi = bootstrap_ci([r.correct for r in rs], n_resamples, seed=seed)
        rows.append({
            "lane": lane, "protocol": protocol, "task": task, "n": len(rs),
            "accuracy": rep.accuracy[task], "ci_low": 100 * lo, "ci_high": 100 * hi,
            "mean_final_think": float(np.mean([r.final_think_tokens for r in rs])),
            "mean_rtf": float(np.mean([r.rtf_proxy for r in rs])),
            "mean_reward": float(np.mean([r.reward for r in rs])),
        })
    lo, hi = bootstrap_ci([r.correct for r in results], n_resamples, seed=seed) if results else (float("nan"),) * 2
    rows.append({
        "lane": lane, "protocol": protocol, "task": "avg", "n": rep.n_items,
        "accuracy": rep.row_weighted_average, "ci_low": 100 * lo, "ci_high": 100 * hi,
        "mean_final_think": rep.mean_final_think, "mean_rtf": rep.mean_rtf, "mean_reward": rep.mean_reward,
    })
    return rows


def write_csv(rows: Sequence[Mapping], path: str | Path) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})


def summary_table(rows: Sequence[Mapping]) -> str:
    """Lanes as rows, tasks as columns, then Avg and Final (like a results table)."""
    tasks = sorted({r["task"] for r in rows if r["task"] != "avg"})
    lanes: dict[tuple[str, str], dict[str, Mapping]] = defaultdict(dict)
    for r in rows:
        lanes[(r["lane"], r["protocol"])][r["task"]] = r
    out = io.StringIO()
    header = ["lane", "protocol", *tasks, "Avg", "Final", "RTF"]
    out.write(" | ".join(header) + "\n")
    for (lane, protocol), cells in lanes.items():
        vals = [f"{cells[t]['accuracy']:.1f}" if t in cells else "-" for t in tasks]
        avg = cells["avg"]
        out.write(" | ".join([lane, protocol, *vals, f"{avg['accuracy']:.1f}", f"{avg['mean_final_think']:.2f}", f"{avg['mean_rtf']:.3f}"]) + "\n")
    return out.getvalue()
