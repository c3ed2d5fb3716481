import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from streamthink.evaluation import (
    EpisodeResult, EvalConfig, aggregate, bootstrap_ci, report_rows, row_weighted_average, rtf_proxy,
    run_deployment, run_offline, write_csv,
)
from streamthink.policy import CostModel, FixedController, PolicyParams, play_episode
from streamthink.stream import Action, ActionKind
from streamthink.trace import Trajectory

from conftest import make_timeline, timelines

ACC = (87.8, 80.8, 68.6, 63.5, 22.8, 71.0)
COUNTS = (2376, 1172, 1954, 1838, 1319, 300)


def _results(task_flags):
    out = []
    for task, flags in task_flags.items():
        for i, c in enumerate(flags):
            out.append(EpisodeResult(f"{task}-{i}", task, bool(c), 3, 0, Trajectory(), 0.0, 1.0))
    return out


def test_row_weighted_example():
    expect = sum(a * n for a, n in zip(ACC, COUNTS)) / sum(COUNTS)
    assert row_weighted_average(ACC, COUNTS) == pytest.approx(expect) == pytest.approx(67.579, abs=1e-3)
    assert round(row_weighted_average(ACC, COUNTS), 1) == 67.6


def test_aggregate_single_task_and_declared_counts(caplog):
    rep = aggregate(_results({"a": [1, 1, 0, 0]}))
    assert rep.accuracy == {"a": 50.0} and rep.row_weighted_average == 50.0
    res = _results({"a": [1, 0], "b": [1, 1, 1, 0]})
    rep = aggregate(res)
    assert rep.row_weighted_average == pytest.approx((50 * 2 + 75 * 4) / 6)
    with caplog.at_level(logging.WARNING):
        rep = aggregate(res, task_counts={"a": 10, "b": 30, "c": 5})
    assert "c" not in rep.accuracy and "excluded" in caplog.text
    assert rep.row_weighted_average == pytest.approx((50 * 10 + 75 * 30) / 40)


@given(st.lists(st.lists(st.booleans(), min_size=1, max_size=8), min_size=1, max_size=4))
def test_duplication_leaves_report_unchanged(groups):
    res = _results({f"t{i}": g for i, g in enumerate(groups)})
    a, b = aggregate(res), aggregate(res + res)
    assert a.accuracy == b.accuracy and a.row_weighted_average == pytest.approx(b.row_weighted_average)
    assert a.mean_final_think == b.mean_final_think and a.mean_rtf == b.mean_rtf


def test_bootstrap_examples():
    flags = [True] * 119 + [False] * 67
    lo, hi = bootstrap_ci(flags, 10_000, 0.95, seed=0)
    assert abs(lo - 0.570) <= 0.012 and abs(hi - 0.710) <= 0.012
    for seed in (1, 2, 3):
        l2, h2 = bootstrap_ci(flags, 10_000, 0.95, seed=seed)
        assert abs(l2 - 0.570) <= 0.012 and abs(h2 - 0.710) <= 0.012
    assert bootstrap_ci([True] * 20) == (1.0, 1.0)
    assert bootstrap_ci(flags, seed=5) == bootstrap_ci(flags, seed=5)
    with pytest.raises(ValueError):
        bootstrap_ci([])


def _wait_traj(tl):
    return play_episode(tl, FixedController(ActionKind.WAIT)).trajectory


def test_rtf_zero_rates_and_closed_form():
    tl = make_timeline([0.5] * 12, [3, 8], min_window_s=0.0)
    traj = _wait_traj(tl)
    assert rtf_proxy(traj, tl, CostModel()) == 0.0
    # prefixes 0, d, ..., (K-1)d while listening plus the endpoint call on T = K d
    K, d = tl.n_pre_ticks, tl.tick_s
    assert rtf_proxy(traj, tl, CostModel(prefill_rate=1.0)) == pytest.approx(sum(k * d for k in range(1, K + 1)) / tl.endpoint_s, abs=1e-9)
    assert rtf_proxy(traj, tl, CostModel(prefill_rate=1.0)) == pytest.approx((K + 1) / 2, abs=1e-9)  # quadratic sum over linear T


def test_rtf_generation_share_is_linear():
    tl = make_timeline([0.4] * 20, [4, 11])
    traj = _wait_traj(tl)
    base = rtf_proxy(traj, tl, CostModel(prefill_rate=0.2))
    g1 = rtf_proxy(traj, tl, CostModel(prefill_rate=0.2, generation_rate=0.01)) - base
    g2 = rtf_proxy(traj, tl, CostModel(prefill_rate=0.2, generation_rate=0.02)) - base
    assert g2 == pytest.approx(2 * g1) and g1 > 0


@given(timelines(min_window_s=0.0), st.floats(0.01, 2), st.floats(0, 1))
def test_rtf_monotone_in_calls(tl, prefill, gen):
    cm = CostModel(prefill, gen)
    traj = _wait_traj(tl)
    for cut in range(len(traj.steps)):
        shorter = Trajectory(traj.steps[:cut], traj.final_think, traj.answer, traj.end_tick)
        assert rtf_proxy(shorter, tl, cm) <= rtf_proxy(traj, tl, cm) + 1e-12


def test_deployment_vs_offline(corpus):
    cfg = EvalConfig()
    dep = run_deployment(FixedController(ActionKind.WAIT), corpus, cfg)
    off = run_offline(None, corpus, cfg)
    for d, o in zip(dep, off):
        assert d.pre_endpoint_thinks == 0 == o.pre_endpoint_thinks
        assert d.trajectory.answer == o.trajectory.answer
        assert d.trajectory.final_think == o.trajectory.final_think
    # offline folds every anchor into a capped final think and gets verifiable items right
    for p, o in zip(corpus, off):
        assert o.final_think_tokens <= 48
        if p.record["verifiable"]:
            assert o.correct


def test_deployment_skips_under_heavy_cost(corpus, caplog):
    long_item = max(corpus, key=lambda p: p.timeline.n_pre_ticks)
    with caplog.at_level(logging.INFO, logger="streamthink.evaluation"):
        res = run_deployment(PolicyParams.zeros(), [long_item], EvalConfig(CostModel(prefill_rate=0.5)))
    assert len(res[0].skipped_ticks) > 0 and "skipped" in caplog.text
    free = run_deployment(PolicyParams.zeros(), corpus, EvalConfig())
    assert all(not r.skipped_ticks for r in free)


def test_deployment_is_deterministic(corpus, tmp_path):
    w = np.random.default_rng(0).normal(size=(7, 2))
    paths = []
    for k in range(2):
        rows = report_rows("x", "deployment", run_deployment(PolicyParams(w), corpus, EvalConfig()), n_resamples=500)
        paths.append(tmp_path / f"r{k}.csv")
        write_csv(rows, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()
    header = paths[0].read_text().splitlines()[0]
    assert header == "lane,protocol,task,n,accuracy,ci_low,ci_high,mean_final_think,mean_rtf,mean_reward"


def test_protocol_invalid_counts_as_incorrect(corpus):
    res = run_deployment(FixedController(ActionKind.ANSWER), corpus[:5], EvalConfig())
    for r in res:
        assert not r.correct and r.violations and r.reward == -1.0
