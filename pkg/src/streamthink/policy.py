"""Trainable wait/think controller.

The learnable decision is the listening-time choice between ``<wait/>`` and
``<think>``: a linear softmax over seven hand-built features.  Thought text
is extractive (a folded summary of the evidence heard so far), the final
think and the answer are phase-forced.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .semantics import answer_of, fold, render_state
from .stream import (
    TOKEN_CAP,
    Action,
    ActionKind,
    Observation,
    StreamTimeline,
    legal_actions,
    observe_replay,
)
from .trace import Trajectory

FEATURES = (
    "bias",
    "elapsed_fraction",
    "ticks_since_think",
    "unconsumed_updates",
    "memory_length",
    "endpoint_reached",
    "new_words",
)
N_FEATURES = len(FEATURES)
HEAD = (ActionKind.WAIT, ActionKind.THINK)
COUNTER_CAP = 8
SPURIOUS_THINK = "no new evidence"


@dataclass(frozen=True)
class PolicyParams:
    weights: np.ndarray
    version: str = "init"

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.shape != (N_FEATURES, len(HEAD)):
            raise ValueError(f"weights must be {N_FEATURES}x{len(HEAD)}, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def zeros(cls, version: str = "base") -> "PolicyParams":
        return cls(np.zeros((N_FEATURES, len(HEAD))), version)

    def replace(self, weights: np.ndarray, version: str | None = None) -> "PolicyParams":
        return PolicyParams(weights, self.version if version is None else version)

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        payload = {
            "version": self.version,
            "features": list(FEATURES),
            "actions": [a.value for a in HEAD],
            "weights": self.weights.tolist(),
        }
        if extra:
            payload["meta"] = extra
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PolicyParams":
        payload = json.loads(Path(path).read_text())
        if list(payload["features"]) != list(FEATURES):
            raise ValueError(f"checkpoint feature order {payload['features']} does not match {FEATURES}")
        return cls(np.array(payload["weights"]), payload["version"])


@dataclass(frozen=True)
class DecisionHistory:
    consumed: frozenset[int] = frozenset()
    last_think_tick: int | None = None
    words_seen: int = 0


def _unconsumed(timeline: StreamTimeline, tick: int, consumed: frozenset[int]) -> list[int]:
    return [
        i for i, a in enumerate(timeline.anchors)
        if a.kind == "state_update" and i not in consumed and a.tick <= tick
    ]


def featurize(obs: Observation, timeline: StreamTimeline, history: DecisionHistory) -> np.ndarray:
    since = obs.tick - (history.last_think_tick if history.last_think_tick is not None else 0)
    return np.array([
        1.0,
        min(1.0, obs.tick * timeline.tick_s / timeline.endpoint_s),
        float(min(COUNTER_CAP, since)),
        float(len(_unconsumed(timeline, obs.tick, history.consumed))),
        float(len(obs.memory)),
        float(obs.endpoint_reached),
        float(min(COUNTER_CAP, len(obs.prefix_words) - history.words_seen)),
    ])


def _head_index(legal: Sequence[ActionKind]) -> list[int]:
    return [HEAD.index(a) for a in legal]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def action_distribution(params: PolicyParams, features: np.ndarray, legal: Sequence[ActionKind]) -> dict[ActionKind, float]:
    if not legal:
        raise ValueError("legal action set is empty")
    if len(legal) == 1:
        return {legal[0]: 1.0}
    logits = features @ params.weights[:, _head_index(legal)]
    probs = np.exp(_log_softmax(logits))
    return {a: float(p) for a, p in zip(legal, probs)}


def log_prob_and_grad(
    params: PolicyParams, features: np.ndarray, legal: Sequence[ActionKind], chosen: ActionKind
) -> tuple[float, np.ndarray]:
    """Exact log pi(chosen) and its gradient w.r.t. the weight matrix."""
    if chosen not in legal:
        raise ValueError(f"{chosen} is not legal here")
    grad = np.zeros_like(params.weights)
    if len(legal) == 1:
        return 0.0, grad
    cols = _head_index(legal)
    logp = _log_softmax(features @ params.weights[:, cols])
    probs = np.exp(logp)
    k = legal.index(chosen)
    indicator = np.zeros(len(cols))
    indicator[k] = 1.0
    grad[:, cols] = np.outer(features, indicator - probs)
    return float(logp[k]), grad


def batch_log_probs(weights: np.ndarray, feats: np.ndarray, chosen: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised two-action log-probs and per-row score vectors (e_c - p)."""
    logp = _log_softmax(feats @ weights)
    rows = np.arange(len(chosen))
    score = -np.exp(logp)
    score[rows, chosen] += 1.0
    return logp[rows, chosen], score


# ---------------------------------------------------------------- thoughts

def _truncate(text: str, cap: int) -> str:
    return " ".join(text.split()[:cap])


def compose_think(
    obs: Observation, timeline: StreamTimeline, consumed: frozenset[int] = frozenset(), cap: int = TOKEN_CAP
) -> tuple[Action, frozenset[int]]:
    """Summarise the tracked state after folding in newly arrived updates.

    Updates count as arrived once their anchor tick is reached.  With nothing
    new, the spurious-think template is returned and nothing is consumed.
    """
    new = _unconsumed(timeline, obs.tick, consumed)
    if not new:
        return Action.think(SPURIOUS_THINK), consumed
    consumed = consumed | frozenset(new)
    state = fold(a.state_delta for i, a in enumerate(timeline.anchors) if i in consumed)
    return Action.think(_truncate(render_state(state, timeline.mechanism), cap)), consumed


def evidence_clause(timeline: StreamTimeline, anchor_index: int, max_words: int = 10) -> list[str]:
    """Transcript words since the previous anchor, up to and including this one."""
    anchor = timeline.anchors[anchor_index]
    start = timeline.anchors[anchor_index - 1].word_index + 1 if anchor_index > 0 else 0
    words = [w.word for w in timeline.words[start:anchor.word_index + 1]]
    return words[-max_words:]


def compose_final_think(
    timeline: StreamTimeline, consumed: frozenset[int] = frozenset(), cap: int = TOKEN_CAP
) -> tuple[Action, Action]:
    """Final think over the full stream, then the answer it commits to.

    Updates already summarised during listening are carried as state; every
    other update has to be re-read from its evidence clause.  When that does
    not fit under the token cap, the oldest unsummarised updates are dropped,
    and the answer is folded from what remains.
    """
    base = fold(a.state_delta for i, a in enumerate(timeline.anchors) if i in consumed)
    pending = [i for i, a in enumerate(timeline.anchors) if a.kind == "state_update" and i not in consumed]
    clauses = {i: evidence_clause(timeline, i) for i in pending}
    for n_keep in range(len(pending), -1, -1):
        kept = pending[len(pending) - n_keep:]
        state = fold((timeline.anchors[i].state_delta for i in kept), base)
        answer = answer_of(state, timeline.mechanism)
        words = [w for i in kept for w in clauses[i]] + ["so", "answer"] + answer.split()
        if len(words) <= cap:
            return Action.think(" ".join(words)), Action.answer(answer)
    return Action.think(_truncate(f"so answer {answer}", cap)), Action.answer(answer)


# ---------------------------------------------------------------- controllers

class Controller(Protocol):
    def act(self, features: np.ndarray, legal: Sequence[ActionKind], rng: np.random.Generator) -> tuple[ActionKind, float]:
        ...


@dataclass
class SoftmaxController:
    params: PolicyParams
    sample: bool = True

    def act(self, features, legal, rng):
        dist = action_distribution(self.params, features, legal)
        kinds = list(dist)
        probs = np.array([dist[k] for k in kinds])
        if self.sample:
            idx = int(rng.choice(len(kinds), p=probs)) if len(kinds) > 1 else 0
        else:
            # ties go to the first legal action, i.e. wait
            idx = int(np.argmax(probs))
        return kinds[idx], float(np.log(probs[idx]))


@dataclass
class FixedController:
    """Always picks ``kind`` when legal, else the first legal action.

    ``ANSWER`` is emitted even when illegal: it models a broken controller
    that answers before the stream ends.
    """

    kind: ActionKind = ActionKind.WAIT

    def act(self, features, legal, rng):
        ok = self.kind in legal or self.kind is ActionKind.ANSWER
        return (self.kind if ok else legal[0]), 0.0


@dataclass(frozen=True)
class CostModel:
    prefill_rate: float = 0.0
    generation_rate: float = 0.0

    def call_cost(self, prefix_s: float, tokens: int) -> float:
        return prefix_s * self.prefill_rate + tokens * self.generation_rate


def emitted_tokens(action: Action) -> int:
    return 1 if action.kind is ActionKind.WAIT else action.token_count


@dataclass
class Decision:
    tick: int
    features: np.ndarray
    chosen: int
    logp: float


@dataclass
class Episode:
    trajectory: Trajectory
    decisions: list[Decision] = field(default_factory=list)
    skipped_ticks: list[int] = field(default_factory=list)


def play_episode(
    timeline: StreamTimeline,
    controller: Controller,
    rng: np.random.Generator | None = None,
    *,
    prompt_id: str = "",
    cost_model: CostModel | None = None,
    cap: int = TOKEN_CAP,
) -> Episode:
    """Deployment-style tick loop with full-prefix observations.

    With a cost model, a call that is still running when later ticks arrive
    makes those ticks stale; they are skipped without acting or observing.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    cost_model = cost_model or CostModel()
    history = DecisionHistory()
    memory: list[str] = []
    steps: list[tuple[int, Action]] = []
    decisions: list[Decision] = []
    skipped: list[int] = []
    busy_until = 0.0
    for tick in range(timeline.n_pre_ticks):
        if tick * timeline.tick_s < busy_until - 1e-9:
            skipped.append(tick)
            continue
        obs = observe_replay(timeline, tick, memory)
        feats = featurize(obs, timeline, history)
        legal = legal_actions(timeline, tick)
        kind, logp = controller.act(feats, legal, rng)
        if kind in HEAD and kind in legal:
            decisions.append(Decision(tick, feats, HEAD.index(kind), logp))
        if kind is ActionKind.THINK:
            action, consumed = compose_think(obs, timeline, history.consumed, cap)
            memory.append(action.text)
            history = DecisionHistory(consumed, tick, len(obs.prefix_words))
        elif kind is ActionKind.ANSWER:
            state = fold(a.state_delta for a in timeline.state_anchors if a.tick <= tick)
            action = Action.answer(answer_of(state, timeline.mechanism))
        else:
            action = Action.wait()
            history = DecisionHistory(history.consumed, history.last_think_tick, len(obs.prefix_words))
        steps.append((tick, action))
        busy_until = tick * timeline.tick_s + cost_model.call_cost(timeline.prefix_extent(tick), emitted_tokens(action))
        if kind is ActionKind.ANSWER:
            return Episode(Trajectory(tuple(steps), prompt_id=prompt_id), decisions, skipped)
    final_think, answer = compose_final_think(timeline, history.consumed, cap)
    trajectory = Trajectory(tuple(steps), final_think, answer, timeline.n_pre_ticks, prompt_id)
    return Episode(trajectory, decisions, skipped)


def play_offline(timeline: StreamTimeline, *, prompt_id: str = "", cap: int = TOKEN_CAP) -> Episode:
    """Complete-audio protocol: one final think over the whole stream, then answer."""
    final_think, answer = compose_final_think(timeline, frozenset(), cap)
    return Episode(Trajectory((), final_think, answer, timeline.n_pre_ticks, prompt_id))
