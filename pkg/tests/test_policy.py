import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from streamthink.policy import (
    FEATURES, N_FEATURES, SPURIOUS_THINK, CostModel, DecisionHistory, FixedController, PolicyParams,
    SoftmaxController, action_distribution, compose_final_think, compose_think, featurize,
    log_prob_and_grad, play_episode, play_offline,
)
from streamthink.semantics import Delta
from streamthink.stream import ActionKind, observe_replay
from streamthink.trace import check_protocol

from conftest import make_timeline

WT = (ActionKind.WAIT, ActionKind.THINK)


def test_feature_examples():
    tl = make_timeline([0.5] * 12, [3, 8])
    f0 = featurize(observe_replay(tl, 0), tl, DecisionHistory())
    assert len(f0) == N_FEATURES == 7
    assert f0[FEATURES.index("elapsed_fraction")] == 0 and f0[FEATURES.index("memory_length")] == 0
    h = DecisionHistory(frozenset(), last_think_tick=3)
    f5 = featurize(observe_replay(tl, 5, ["a"]), tl, h)
    assert f5[FEATURES.index("ticks_since_think")] == 2
    assert f5[FEATURES.index("unconsumed_updates")] == 1
    consumed = featurize(observe_replay(tl, 5, ["a"]), tl, DecisionHistory(frozenset({0}), 4))
    assert consumed[FEATURES.index("unconsumed_updates")] == 0


def test_unconsumed_count_matches_recount():
    tl = make_timeline([0.5] * 20, [1, 4, 9, 15])
    for tick in range(tl.n_pre_ticks):
        for consumed in (frozenset(), frozenset({0, 2})):
            f = featurize(observe_replay(tl, tick), tl, DecisionHistory(consumed))
            expect = sum(1 for i, a in enumerate(tl.anchors) if a.tick <= tick and i not in consumed)
            assert f[FEATURES.index("unconsumed_updates")] == expect


def test_distribution_examples():
    p = PolicyParams.zeros()
    f = np.ones(N_FEATURES)
    assert action_distribution(p, f, WT) == {ActionKind.WAIT: 0.5, ActionKind.THINK: 0.5}
    assert action_distribution(p, f, (ActionKind.ANSWER,)) == {ActionKind.ANSWER: 1.0}
    w = np.zeros((N_FEATURES, 2))
    w[0, 0] = 2.0
    d = action_distribution(PolicyParams(w), np.eye(N_FEATURES)[0], WT)
    e2 = math.exp(2)
    assert d[ActionKind.WAIT] == pytest.approx(e2 / (e2 + 1)) and d[ActionKind.THINK] == pytest.approx(1 / (e2 + 1))


def test_illegal_actions_get_zero():
    d = action_distribution(PolicyParams.zeros(), np.ones(N_FEATURES), (ActionKind.THINK,))
    assert ActionKind.WAIT not in d and d[ActionKind.THINK] == 1.0


@given(st.lists(st.floats(-5, 5), min_size=14, max_size=14), st.floats(-10, 10))
def test_argmax_invariant_to_logit_shift(ws, c):
    w = np.array(ws).reshape(N_FEATURES, 2)
    f = np.eye(N_FEATURES)[0]
    p1 = action_distribution(PolicyParams(w), f, WT)
    p2 = action_distribution(PolicyParams(w + np.outer(f, [c, c])), f, WT)
    assert max(p1, key=p1.get) == max(p2, key=p2.get)
    assert sum(p1.values()) == pytest.approx(1.0)


def test_log_prob_examples():
    f = np.arange(1, N_FEATURES + 1, dtype=float)
    logp, grad = log_prob_and_grad(PolicyParams.zeros(), f, WT, ActionKind.WAIT)
    assert logp == pytest.approx(math.log(0.5))
    assert np.allclose(grad[:, 0], f * 0.5) and np.allclose(grad[:, 1], -f * 0.5)
    logp, grad = log_prob_and_grad(PolicyParams.zeros(), f, (ActionKind.THINK,), ActionKind.THINK)
    assert logp == 0.0 and not grad.any()
    with pytest.raises(ValueError):
        log_prob_and_grad(PolicyParams.zeros(), f, (ActionKind.THINK,), ActionKind.WAIT)


def fd_relative_error(func, w, analytic, h=1e-5):
    num = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        up, dn = w.copy(), w.copy()
        up[idx] += h
        dn[idx] -= h
        num[idx] = (func(up) - func(dn)) / (2 * h)
    return np.max(np.abs(num - analytic)) / max(1e-8, np.max(np.abs(num)), np.max(np.abs(analytic)))


def test_log_prob_gradient_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(100):
        w = rng.normal(size=(N_FEATURES, 2))
        f = rng.normal(size=N_FEATURES)
        chosen = WT[rng.integers(2)]
        _, g = log_prob_and_grad(PolicyParams(w), f, WT, chosen)
        err = fd_relative_error(lambda v: log_prob_and_grad(PolicyParams(v), f, WT, chosen)[0], w, g)
        assert err < 1e-4


def test_compose_think_examples():
    tl = make_timeline([0.5] * 12, [3, 5], deltas=[Delta("add", 3), Delta("add", 5)])
    obs = observe_replay(tl, 6)
    think, consumed = compose_think(obs, tl)
    assert think.text == "running total 8" and consumed == {0, 1}
    again, same = compose_think(obs, tl, consumed)
    assert again.text == SPURIOUS_THINK and same == consumed

    slot = make_timeline([0.5] * 12, [3, 5], deltas=[Delta("set", "3pm"), Delta("set", "4pm")], mechanism="overwrite_final_slot")
    assert compose_think(observe_replay(slot, 6), slot)[0].text == "slot now 4pm"


def test_compose_think_only_uses_arrived_updates():
    tl = make_timeline([0.5] * 12, [3, 9], deltas=[Delta("add", 3), Delta("add", 5)])
    think, consumed = compose_think(observe_replay(tl, 5), tl)
    assert think.text == "running total 3" and consumed == {0}


def test_final_think_fits_cap_and_commits_to_fold():
    words = [f"w{i}" for i in range(60)]
    anchors = list(range(5, 60, 6))
    tl = make_timeline([0.3] * 60, anchors, deltas=[Delta("add", 1)] * len(anchors), words=words)
    think, answer = compose_final_think(tl, cap=48)
    assert think.token_count <= 48 and think.text.endswith(f"so answer {answer.text}")
    # only the most recent clauses fit; the answer reflects what was kept
    assert int(answer.text) < len(anchors)
    think, answer = compose_final_think(tl, frozenset(range(len(anchors) - 1)), cap=48)
    assert answer.text == str(len(anchors))


def test_episode_shapes_and_validity():
    tl = make_timeline([0.5] * 12, [3, 8])
    wait = play_episode(tl, FixedController(ActionKind.WAIT))
    assert not wait.trajectory.pre_endpoint_thinks and len(wait.decisions) == tl.n_pre_ticks
    assert check_protocol(wait.trajectory, tl)[0].valid
    argmax = play_episode(tl, SoftmaxController(PolicyParams.zeros(), sample=False))
    assert argmax.trajectory == wait.trajectory  # ties go to wait
    sabotage = play_episode(tl, FixedController(ActionKind.ANSWER))
    assert check_protocol(sabotage.trajectory, tl)[1] == -1.0 and not sabotage.decisions
    off = play_offline(tl)
    assert off.trajectory.steps == () and off.trajectory.answer == wait.trajectory.answer


def test_sampling_is_seeded():
    tl = make_timeline([0.4] * 25, [3, 9, 16])
    c = SoftmaxController(PolicyParams.zeros())
    a = play_episode(tl, c, np.random.default_rng(5)).trajectory
    b = play_episode(tl, c, np.random.default_rng(5)).trajectory
    assert a == b


def test_cost_model_skips_stale_ticks():
    tl = make_timeline([0.5] * 12, [3, 8], min_window_s=0.0)
    ep = play_episode(tl, FixedController(ActionKind.WAIT), cost_model=CostModel(prefill_rate=0.3))
    # hand simulation: tick k starts at 0.5k and costs 0.15k seconds
    busy, expect = 0.0, []
    for k in range(tl.n_pre_ticks):
        if 0.5 * k < busy - 1e-9:
            expect.append(k)
            continue
        busy = 0.5 * k + 0.3 * 0.5 * k
    assert ep.skipped_ticks == expect and expect
    assert [t for t, _ in ep.trajectory.steps] == [k for k in range(tl.n_pre_ticks) if k not in expect]
    free = play_episode(tl, FixedController(ActionKind.WAIT), cost_model=CostModel())
    assert free.skipped_ticks == []


def test_checkpoint_round_trip(tmp_path):
    p = PolicyParams(np.arange(14.0).reshape(7, 2), "v1")
    p.save(tmp_path / "p.json", extra={"note": 1})
    q = PolicyParams.load(tmp_path / "p.json")
    assert np.array_equal(p.weights, q.weights) and q.version == "v1"
    data = json.loads((tmp_path / "p.json").read_text())
    data["features"] = data["features"][::-1]
    (tmp_path / "bad.json").write_text(json.dumps(data))
    with pytest.raises(ValueError):
        PolicyParams.load(tmp_path / "bad.json")
    with pytest.raises(ValueError):
        PolicyParams(np.full((7, 2), np.nan))
    with pytest.raises(ValueError):
        PolicyParams(np.zeros((3, 2)))
