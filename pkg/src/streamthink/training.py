"""Behaviour cloning of gold traces and group-relative policy optimisation.

Credit is assigned per sampled listening decision (wait vs think), not per
text token: thoughts are extractive, so the decision is the only sampled unit.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument, InvalidState, TrainingAborted
from .judge import Judge, stub_judge
from .policy import (
    HEAD,
    Controller,
    DecisionHistory,
    PolicyParams,
    SoftmaxController,
    batch_log_probs,
    compose_think,
    featurize,
    play_episode,
)
from .reward import RewardBreakdown, RewardConfig, score_trajectory
from .stream import ActionKind, observe_replay
from .trace import ProtocolReport, Trajectory

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- SFT

def teacher_forced_decisions(prepared) -> tuple[np.ndarray, np.ndarray]:
    """Features and gold head indices at every listening tick of one item."""
    timeline, gold = prepared.timeline, prepared.gold
    history = DecisionHistory()
    memory: list[str] = []
    feats, labels = [], []
    for tick, action in enumerate(gold.labels):
        obs = observe_replay(timeline, tick, memory)
        feats.append(featurize(obs, timeline, history))
        labels.append(HEAD.index(action.kind))
        if action.kind is ActionKind.THINK:
            think, consumed = compose_think(obs, timeline, history.consumed)
            memory.append(think.text)
            history = DecisionHistory(consumed, tick, len(obs.prefix_words))
        else:
            history = DecisionHistory(history.consumed, history.last_think_tick, len(obs.prefix_words))
    return np.array(feats).reshape(-1, len(feats[0]) if feats else 7), np.array(labels, dtype=int)


@dataclass(frozen=True)
class GoldBatch:
    features: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_prepared(cls, items: Sequence) -> "GoldBatch":
        parts = [teacher_forced_decisions(p) for p in items]
        return cls(np.concatenate([f for f, _ in parts]), np.concatenate([y for _, y in parts]))

    def __len__(self):
        return len(self.labels)


def sft_loss(weights: np.ndarray, batch: GoldBatch) -> tuple[float, np.ndarray]:
    """Mean gold-action NLL and its gradient."""
    logp, score = batch_log_probs(weights, batch.features, batch.labels)
    grad = -(batch.features.T @ score) / len(batch)
    return float(-logp.mean()), grad


def sft_accuracy(weights: np.ndarray, batch: GoldBatch) -> float:
    logits = batch.features @ weights
    # ties go to wait, matching deployment argmax
    pred = (logits[:, 1] > logits[:, 0]).astype(int)
    return float((pred == batch.labels).mean())


def sft_step(params: PolicyParams, batch: GoldBatch, learning_rate: float) -> tuple[PolicyParams, float]:
    loss, grad = sft_loss(params.weights, batch)
    return params.replace(params.weights - learning_rate * grad), loss


@dataclass(frozen=True)
class SftConfig:
    """One epoch with linear warmup then cosine decay unless ``steps`` is set."""

    epochs: float = 1.0
    steps: int | None = None
    batch_size: int = 8
    learning_rate: float = 0.05
    warmup_fraction: float = 0.1
    schedule: str = "cosine"
    seed: int = 0

    def n_steps(self, n_items: int) -> int:
        if self.steps is not None:
            return self.steps
        return max(1, math.ceil(self.epochs * n_items / self.batch_size))

    def lr_at(self, step: int, n_steps: int) -> float:
        if self.schedule == "constant":
            return self.learning_rate
        warm = max(1, int(round(self.warmup_fraction * n_steps)))
        if step < warm:
            return self.learning_rate * (step + 1) / warm
        progress = (step - warm) / max(1, n_steps - warm)
        return 0.5 * self.learning_rate * (1 + math.cos(math.pi * progress))


def train_sft(params: PolicyParams, items: Sequence, config: SftConfig = SftConfig()) -> tuple[PolicyParams, list[dict]]:
    """Minibatch behaviour cloning; items are drawn in seeded epoch order."""
    if not items:
        raise InvalidArgument("no training items")
    tables = [teacher_forced_decisions(p) for p in items]
    rng = np.random.default_rng([config.seed, 0x5F7])
    order: list[int] = []
    history = []
    n_steps = config.n_steps(len(items))
    for step in range(n_steps):
        if len(order) < config.batch_size:
            order.extend(rng.permutation(len(items)).tolist())
        idx, order = order[: config.batch_size], order[config.batch_size:]
        batch = GoldBatch(np.concatenate([tables[i][0] for i in idx]), np.concatenate([tables[i][1] for i in idx]))
        acc = sft_accuracy(params.weights, batch)
        lr = config.lr_at(step, n_steps)
        params, loss = sft_step(params, batch, lr)
        history.append({"step": step, "loss": loss, "token_accuracy": acc, "lr": lr})
    return params.replace(params.weights, version="sft"), history


# ---------------------------------------------------------------- rollouts

@dataclass
class Rollout:
    trajectory: Trajectory
    reward: RewardBreakdown | None
    report: ProtocolReport | None
    features: np.ndarray
    chosen: np.ndarray
    old_logp: np.ndarray

    @property
    def scored(self) -> bool:
        return self.reward is not None

    @property
    def format_valid(self) -> bool:
        return self.report is not None and self.report.valid

    @property
    def has_valid_final_think(self) -> bool:
        return self.format_valid and self.trajectory.final_think is not None

    @property
    def has_pre_endpoint_think(self) -> bool:
        return self.format_valid and bool(self.trajectory.pre_endpoint_thinks)


@dataclass
class RolloutGroup:
    prompt_id: str
    rollouts: list[Rollout]
    advantages: np.ndarray | None = None

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward.total if r.scored else np.nan for r in self.rollouts])

    @property
    def complete(self) -> bool:
        return all(r.scored for r in self.rollouts)

    def validity(self) -> dict[str, int]:
        return {
            "format_valid": sum(r.format_valid for r in self.rollouts),
            "valid_final_think": sum(r.has_valid_final_think for r in self.rollouts),
            "pre_endpoint_think": sum(r.has_pre_endpoint_think for r in self.rollouts),
        }


def rollout_group(
    params: PolicyParams,
    prepared,
    G: int = 8,
    seed: int | Sequence[int] = 0,
    *,
    controller: Controller | None = None,
    judge: Judge = stub_judge,
    reward_config: RewardConfig = RewardConfig(),
) -> RolloutGroup:
    """Sample G episodes from one snapshot and score each one."""
    if G < 1:
        raise InvalidArgument("G must be positive")
    controller = controller or SoftmaxController(params, sample=True)
    rng = np.random.default_rng(seed)
    rollouts = []
    for _ in range(G):
        ep = play_episode(prepared.timeline, controller, rng, prompt_id=prepared.item.item_id, cap=reward_config.token_cap)
        feats = np.array([d.features for d in ep.decisions]).reshape(-1, params.weights.shape[0])
        chosen = np.array([d.chosen for d in ep.decisions], dtype=int)
        old_logp = np.array([d.logp for d in ep.decisions])
        try:
            reward, report = score_trajectory(ep.trajectory, prepared.timeline, prepared.item, judge, reward_config)
        except Exception as exc:  # a failing judge leaves the rollout unscored
            log.warning("scoring failed for %s: %s", prepared.item.item_id, exc)
            reward = report = None
        rollouts.append(Rollout(ep.trajectory, reward, report, feats, chosen, old_logp))
    group = RolloutGroup(prepared.item.item_id, rollouts)
    if group.complete and G >= 2:
        group.advantages = group_advantages(group.rewards)
    return group


def group_advantages(rewards: Sequence[float], epsilon: float = 1e-8) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or len(r) < 2:
        raise InvalidArgument("need at least two rewards per group")
    return (r - r.mean()) / (r.std() + epsilon)


# ---------------------------------------------------------------- objective

@dataclass(frozen=True)
class ClipConfig:
    eps_low: float = 0.20
    eps_high: float = 0.28
    kl_coeff: float = 0.01

    def __post_init__(self):
        if not 0 < self.eps_low <= self.eps_high:
            raise InvalidArgument("need 0 < eps_low <= eps_high")
        if self.kl_coeff < 0:
            raise InvalidArgument("kl_coeff must be non-negative")


def clipped_surrogate(ratio, advantage, clip: ClipConfig = ClipConfig()):
    """Per-decision surrogate: min for A >= 0, max for A < 0."""
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    unclipped = ratio * advantage
    clipped = np.clip(ratio, 1 - clip.eps_low, 1 + clip.eps_high) * advantage
    return np.where(advantage >= 0, np.minimum(unclipped, clipped), np.maximum(unclipped, clipped))


@dataclass(frozen=True)
class CreditBatch:
    """Flattened mask M: one row per sampled decision."""

    features: np.ndarray
    chosen: np.ndarray
    advantages: np.ndarray

    @classmethod
    def from_groups(cls, groups: Sequence[RolloutGroup]) -> "CreditBatch":
        feats, chosen, adv = [], [], []
        for g in groups:
            if g.advantages is None:
                raise InvalidState(f"group {g.prompt_id} has no advantages")
            for r, a in zip(g.rollouts, g.advantages):
                feats.append(r.features)
                chosen.append(r.chosen)
                adv.append(np.full(len(r.chosen), a))
        if not feats:
            return cls(np.zeros((0, 7)), np.zeros(0, dtype=int), np.zeros(0))
        return cls(np.concatenate(feats), np.concatenate(chosen), np.concatenate(adv))

    def __len__(self):
        return len(self.chosen)


def dapo_loss(
    batch: CreditBatch | Sequence[RolloutGroup],
    params_new: PolicyParams | np.ndarray,
    params_old: PolicyParams | np.ndarray,
    clip: ClipConfig = ClipConfig(),
    params_ref: PolicyParams | np.ndarray | None = None,
) -> tuple[float, np.ndarray, dict]:
    """Negative mean clipped surrogate plus the KL penalty, with exact gradient."""
    if not isinstance(batch, CreditBatch):
        batch = CreditBatch.from_groups(batch)
    if len(batch) == 0:
        raise InvalidState("credit mask is empty")
    w_new, w_old = _w(params_new), _w(params_old)
    w_ref = w_old if params_ref is None else _w(params_ref)
    X, c, A = batch.features, batch.chosen, batch.advantages
    logp_new, score = batch_log_probs(w_new, X, c)
    logp_old, _ = batch_log_probs(w_old, X, c)
    logp_ref, _ = batch_log_probs(w_ref, X, c)

    ratio = np.exp(logp_new - logp_old)
    unclipped = ratio * A
    surrogate = clipped_surrogate(ratio, A, clip)
    # gradient flows only where the unclipped branch is the selected one
    live = np.where(A >= 0, unclipped <= surrogate, unclipped >= surrogate)
    delta = logp_ref - logp_new
    kl = np.exp(delta) - delta - 1.0

    n = len(batch)
    loss = -surrogate.mean() + clip.kl_coeff * kl.mean()
    coef = -np.where(live, unclipped, 0.0) + clip.kl_coeff * (1.0 - np.exp(delta))
    grad = X.T @ (coef[:, None] * score) / n
    stats = {
        "surrogate": float(surrogate.mean()),
        "kl": float(kl.mean()),
        "clip_fraction": float((~live).mean()),
        "n_decisions": n,
    }
    return float(loss), grad, stats


def _w(p) -> np.ndarray:
    return p.weights if isinstance(p, PolicyParams) else np.asarray(p, dtype=float)


# ---------------------------------------------------------------- sampling gate

ACCEPT, RESAMPLE, SKIP = "accept", "resample", "skip"


def dynamic_sampling_gate(group: RolloutGroup, min_valid_fraction: float = 0.5, retry_budget: int = 3, attempt: int = 0) -> str:
    """Decide what to do with a scored group; ``attempt`` counts prior resamples."""
    v = group.validity()
    G = len(group.rollouts)
    ok = (
        group.complete
        and v["format_valid"] >= math.ceil(min_valid_fraction * G)
        and v["valid_final_think"] >= 1
        and v["pre_endpoint_think"] >= 1
    )
    if ok:
        return ACCEPT
    return RESAMPLE if attempt < retry_budget else SKIP


# ---------------------------------------------------------------- loop

@dataclass(frozen=True)
class DapoConfig:
    steps: int = 300
    group_size: int = 8
    groups_per_step: int = 4
    updates_per_batch: int = 2
    learning_rate: float = 0.05
    warmup_steps: int = 10
    clip: ClipConfig = field(default_factory=ClipConfig)
    min_valid_fraction: float = 0.5
    retry_budget: int = 3
    advantage_eps: float = 1e-8
    old_policy_refresh: str = "batch"
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise InvalidArgument("group_size must be at least 2")
        if self.old_policy_refresh not in ("batch", "update"):
            raise InvalidArgument("old_policy_refresh is 'batch' or 'update'")

    @classmethod
    def from_dict(cls, d: dict) -> "DapoConfig":
        d = dict(d)
        if "clip" in d:
            d["clip"] = ClipConfig(**d["clip"])
        return cls(**d)


def _line_search_step(w, objective: Callable[[np.ndarray], tuple[float, np.ndarray]], lr: float, max_halvings: int = 30):
    """Backtracking (Armijo) step along the negative gradient."""
    loss, grad = objective(w)
    g2 = float((grad * grad).sum())
    if g2 == 0.0:
        return w, loss, loss, False
    step = lr
    for _ in range(max_halvings):
        cand = w - step * grad
        new_loss, _ = objective(cand)
        if new_loss <= loss - 1e-4 * step * g2:
            return cand, loss, new_loss, True
        step *= 0.5
    return w, loss, loss, False


def train_dapo(
    init_params: PolicyParams,
    dataset: Sequence,
    config: DapoConfig = DapoConfig(),
    *,
    judge: Judge = stub_judge,
    reward_config: RewardConfig = RewardConfig(),
    behavior: Callable[[PolicyParams], Controller] | None = None,
    log_path: str | Path | None = None,
) -> tuple[PolicyParams, list[dict]]:
    """rollout -> gate -> advantages -> clipped objective -> update.

    ``behavior`` replaces the sampling controller (used to probe the gate with
    degenerate policies).  The reference policy is ``init_params``.
    """
    if not dataset:
        raise InvalidArgument("empty dataset")
    ref = init_params.weights.copy()
    w = init_params.weights.copy()
    steps_per_epoch = math.ceil(len(dataset) / config.groups_per_step)
    order_rng = np.random.default_rng([config.seed, 0xDA90])
    order: list[int] = []
    records: list[dict] = []
    accepted_in_epoch = 0
    sink = Path(log_path).open("w") if log_path else None
    try:
        for step in range(config.steps):
            params = init_params.replace(w, version=f"dapo-{step}")
            controller = behavior(params) if behavior else None
            if len(order) < config.groups_per_step:
                order.extend(order_rng.permutation(len(dataset)).tolist())
            idx, order = order[: config.groups_per_step], order[config.groups_per_step:]
            accepted, rewards, finals = [], [], []
            n_resampled = n_skipped = 0
            for g, i in enumerate(idx):
                for attempt in range(config.retry_budget + 1):
                    group = rollout_group(
                        params, dataset[i], config.group_size, [config.seed, step, g, attempt],
                        controller=controller, judge=judge, reward_config=reward_config,
                    )
                    verdict = dynamic_sampling_gate(group, config.min_valid_fraction, config.retry_budget, attempt)
                    if verdict == ACCEPT:
                        group.advantages = group_advantages(group.rewards, config.advantage_eps)
                        accepted.append(group)
                        rewards.extend(group.rewards.tolist())
                        finals.extend(r.trajectory.final_think_tokens for r in group.rollouts)
                        break
                    if verdict == RESAMPLE:
                        n_resampled += 1
                    else:
                        n_skipped += 1
                        log.info("step %d: skipped group %s after %d attempts (%s)", step, group.prompt_id, attempt + 1, group.validity())
            entry = {
                "step": step,
                "groups_accepted": len(accepted),
                "groups_resampled": n_resampled,
                "groups_skipped": n_skipped,
                "skip_rate": n_skipped / len(idx),
                "mean_reward": float(np.mean(rewards)) if rewards else None,
                "mean_final_think": float(np.mean(finals)) if finals else None,
                "loss": None,
                "kl": None,
                "updated": False,
            }
            batch = CreditBatch.from_groups(accepted)
            if accepted and len(batch):
                lr = config.learning_rate * min(1.0, (step + 1) / max(1, config.warmup_steps))
                w_old = w.copy()
                for _ in range(config.updates_per_batch):
                    objective = lambda v: dapo_loss(batch, v, w_old, config.clip, ref)[:2]
                    w, loss, new_loss, moved = _line_search_step(w, objective, lr)
                    entry["updated"] |= moved
                    entry["loss"] = loss
                    if config.old_policy_refresh == "update":
                        w_old = w.copy()
                entry["kl"] = dapo_loss(batch, w, w_old, config.clip, ref)[2]["kl"]
            accepted_in_epoch += len(accepted)
            records.append(entry)
            if sink:
                sink.write(json.dumps(entry, sort_keys=True) + "\n")
            if (step + 1) % steps_per_epoch == 0:
                if accepted_in_epoch == 0:
                    raise TrainingAborted(
                        f"every group was skipped during the epoch ending at step {step}; "
                        "the policy never produced a gate-passing group",
                        records,
                    )
                accepted_in_epoch = 0
    finally:
        if sink:
            sink.close()
    return init_params.replace(w, version="dapo"), records


def config_dict(config) -> dict:
    return asdict(config)
