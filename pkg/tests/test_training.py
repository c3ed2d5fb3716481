import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamthink.errors import InvalidArgument, InvalidState, TrainingAborted
from streamthink.policy import N_FEATURES, FixedController, PolicyParams
from streamthink.stream import ActionKind
from streamthink.training import (
    ClipConfig, CreditBatch, DapoConfig, GoldBatch, RolloutGroup, SftConfig, clipped_surrogate, dapo_loss,
    dynamic_sampling_gate, group_advantages, rollout_group, sft_accuracy, sft_loss, teacher_forced_decisions,
    train_dapo, train_sft,
)

from test_policy import fd_relative_error


# ---------------------------------------------------------------- SFT

def test_teacher_forcing_matches_gold(corpus):
    p = corpus[0]
    X, y = teacher_forced_decisions(p)
    assert X.shape == (p.timeline.n_pre_ticks, N_FEATURES)
    assert list(y) == [int(label.kind is ActionKind.THINK) for label in p.gold.labels]


def test_sft_initial_loss_and_progress(corpus):
    batch = GoldBatch.from_prepared(corpus)
    loss, _ = sft_loss(PolicyParams.zeros().weights, batch)
    assert loss == pytest.approx(math.log(2))
    params, curve = train_sft(PolicyParams.zeros(), corpus, SftConfig(steps=200, learning_rate=0.05))
    assert curve[-1]["loss"] < math.log(2)
    assert sft_accuracy(params.weights, batch) > 0.5
    assert params.version == "sft"


def test_sft_gradient_finite_differences(corpus):
    batch = GoldBatch.from_prepared(corpus[:5])
    w = np.random.default_rng(1).normal(scale=0.3, size=(N_FEATURES, 2))
    _, g = sft_loss(w, batch)
    assert fd_relative_error(lambda v: sft_loss(v, batch)[0], w, g) < 1e-4


def test_sft_schedule_shape():
    cfg = SftConfig(learning_rate=1.0, warmup_fraction=0.1)
    lrs = [cfg.lr_at(s, 100) for s in range(100)]
    assert lrs[0] < lrs[9] == pytest.approx(1.0)
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:])) and lrs[-1] < 0.01


def test_sft_is_deterministic(corpus):
    a, _ = train_sft(PolicyParams.zeros(), corpus, SftConfig(steps=20))
    b, _ = train_sft(PolicyParams.zeros(), corpus, SftConfig(steps=20))
    assert np.array_equal(a.weights, b.weights)


# ---------------------------------------------------------------- advantages

def test_advantage_examples():
    assert np.allclose(group_advantages([1, 0, 0, 1]), [1, -1, -1, 1])
    assert np.allclose(group_advantages([2, 2, 2]), 0)
    with pytest.raises(InvalidArgument):
        group_advantages([1.0])


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=16), st.floats(0.1, 10), st.floats(-5, 5))
def test_advantages_are_affine_invariant(rs, a, b):
    adv = group_advantages(rs)
    assert abs(adv.sum()) < 1e-6 * len(rs) + 1e-6
    if np.std(rs) > 1e-3:
        assert np.allclose(group_advantages([a * r + b for r in rs]), adv, atol=1e-5)


# ---------------------------------------------------------------- objective

def _single(ratio_target, advantage):
    # one decision on feature e0, chosen WAIT; old policy uniform
    X = np.eye(N_FEATURES)[:1]
    batch = CreditBatch(X, np.array([0]), np.array([float(advantage)]))
    p = 0.5 * ratio_target
    w_new = np.zeros((N_FEATURES, 2))
    w_new[0, 0] = math.log(p / (1 - p))
    return batch, w_new


def test_clipped_objective_examples():
    clip = ClipConfig(kl_coeff=0.0)
    batch, w = _single(1.5, 1.0)
    loss, _, stats = dapo_loss(batch, w, np.zeros_like(w), clip)
    assert loss == pytest.approx(-1.28) and stats["clip_fraction"] == 1.0
    batch, w = _single(0.5, -1.0)
    loss, _, _ = dapo_loss(batch, w, np.zeros_like(w), clip)
    assert loss == pytest.approx(0.5)  # surrogate max(-0.5, -0.8) = -0.5
    assert clipped_surrogate([0.5], [-1.0], clip)[0] == pytest.approx(-0.5)
    # A < 0 takes the max, so a large ratio is clipped too
    assert clipped_surrogate([1.5], [-1.0], clip)[0] == pytest.approx(-1.28)
    assert clipped_surrogate([1.1], [2.0], clip)[0] == pytest.approx(2.2)


def test_identity_ratio_loss_is_mean_advantage(corpus):
    group = rollout_group(PolicyParams.zeros(), corpus[1], 8, seed=4)
    batch = CreditBatch.from_groups([group])
    w = np.random.default_rng(2).normal(size=(N_FEATURES, 2))
    loss, _, stats = dapo_loss(batch, w, w, ClipConfig(), w)
    assert loss == pytest.approx(-batch.advantages.mean())
    assert stats["kl"] == pytest.approx(0.0)


def test_dapo_gradient_finite_differences(corpus):
    group = rollout_group(PolicyParams.zeros(), corpus[2], 8, seed=9)
    batch = CreditBatch.from_groups([group])
    rng = np.random.default_rng(3)
    w_old = rng.normal(scale=0.1, size=(N_FEATURES, 2))
    w_ref = rng.normal(scale=0.1, size=(N_FEATURES, 2))
    w = w_old + rng.normal(scale=0.02, size=w_old.shape)
    clip = ClipConfig(kl_coeff=0.5)
    _, g, _ = dapo_loss(batch, w, w_old, clip, w_ref)
    assert fd_relative_error(lambda v: dapo_loss(batch, v, w_old, clip, w_ref)[0], w, g) < 1e-4


def test_empty_mask_raises():
    empty = CreditBatch(np.zeros((0, N_FEATURES)), np.zeros(0, dtype=int), np.zeros(0))
    with pytest.raises(InvalidState):
        dapo_loss(empty, np.zeros((N_FEATURES, 2)), np.zeros((N_FEATURES, 2)))


def test_clip_config_validation():
    with pytest.raises(InvalidArgument):
        ClipConfig(eps_low=0.3, eps_high=0.2)
    with pytest.raises(InvalidArgument):
        ClipConfig(kl_coeff=-1)


# ---------------------------------------------------------------- rollouts and gate

def test_rollout_group_shape_and_determinism(corpus):
    p = corpus[0]
    g1 = rollout_group(PolicyParams.zeros(), p, 8, seed=[1, 2])
    g2 = rollout_group(PolicyParams.zeros(), p, 8, seed=[1, 2])
    assert len(g1.rollouts) == 8 and g1.complete and g1.advantages.shape == (8,)
    assert [r.trajectory for r in g1.rollouts] == [r.trajectory for r in g2.rollouts]
    assert np.array_equal(g1.rewards, g2.rewards)
    for r in g1.rollouts:
        assert len(r.chosen) == len(r.old_logp) == r.features.shape[0]
        assert np.allclose(r.old_logp, math.log(0.5))


def test_all_wait_group_is_resampled_then_skipped(corpus):
    g = rollout_group(PolicyParams.zeros(), corpus[0], 8, controller=FixedController(ActionKind.WAIT))
    assert g.validity()["pre_endpoint_think"] == 0
    assert dynamic_sampling_gate(g, attempt=0) == "resample"
    assert dynamic_sampling_gate(g, attempt=3) == "skip"
    assert np.allclose(g.advantages, 0)


def test_gate_accepts_mixed_group(corpus):
    g = rollout_group(PolicyParams.zeros(), corpus[0], 8, seed=0)
    assert dynamic_sampling_gate(g) == "accept"


def test_gate_rejects_mostly_invalid_group(corpus):
    good = rollout_group(PolicyParams.zeros(), corpus[0], 3, seed=0)
    bad = rollout_group(PolicyParams.zeros(), corpus[0], 5, controller=FixedController(ActionKind.ANSWER))
    g = RolloutGroup("x", good.rollouts + bad.rollouts)
    assert g.validity()["format_valid"] == 3 < 4
    assert dynamic_sampling_gate(g) == "resample"
    g = RolloutGroup("x", good.rollouts + good.rollouts[:1] + bad.rollouts[:4])
    assert dynamic_sampling_gate(g) == "accept"


def test_judge_failure_leaves_group_incomplete(corpus):
    def broken(request):
        raise RuntimeError("judge offline")

    g = rollout_group(PolicyParams.zeros(), corpus[0], 4, seed=0, judge=broken)
    assert not g.complete and g.advantages is None
    assert dynamic_sampling_gate(g, attempt=3) == "skip"


# ---------------------------------------------------------------- loop

SMALL = dict(steps=12, groups_per_step=2, group_size=4, warmup_steps=2)


@pytest.mark.slow
def test_train_dapo_is_deterministic(corpus):
    a, ra = train_dapo(PolicyParams.zeros(), corpus[:8], DapoConfig(**SMALL))
    b, rb = train_dapo(PolicyParams.zeros(), corpus[:8], DapoConfig(**SMALL))
    assert np.array_equal(a.weights, b.weights) and ra == rb
    assert any(r["updated"] for r in ra)


@pytest.mark.slow
def test_huge_kl_pins_policy_to_reference(corpus):
    init = PolicyParams(np.random.default_rng(0).normal(scale=0.2, size=(N_FEATURES, 2)))
    out, _ = train_dapo(init, corpus[:8], DapoConfig(**SMALL, clip=ClipConfig(kl_coeff=1e6)))
    assert np.max(np.abs(out.weights - init.weights)) < 1e-3


def test_sabotaged_policy_aborts_without_updates(corpus):
    cfg = DapoConfig(steps=10, groups_per_step=2, group_size=4)
    with pytest.raises(TrainingAborted) as exc:
        train_dapo(PolicyParams.zeros(), corpus[:4], cfg, behavior=lambda p: FixedController(ActionKind.ANSWER))
    log = exc.value.log
    assert len(log) == 2  # one epoch of ceil(4 / 2) steps
    assert all(not r["updated"] and r["groups_accepted"] == 0 for r in log)
    assert sum(r["groups_resampled"] for r in log) == 4 * 3


def test_log_file_written(tmp_path, corpus):
    path = tmp_path / "log.jsonl"
    _, records = train_dapo(PolicyParams.zeros(), corpus[:4], DapoConfig(steps=3, groups_per_step=2, group_size=4), log_path=path)
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    for r in records:
        assert {"groups_accepted", "groups_resampled", "groups_skipped", "skip_rate", "mean_reward"} <= set(r)
