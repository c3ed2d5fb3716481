"""Six-term trajectory reward with the protocol gate.

    R_valid = la*Ra + lf*Rf + ls*Rs + lu*Ru + lt*Rt + 1[Ra > 0]*lc*Ra*Rc
    R       = lf*Rf            if Rf <= 0
              R_valid          otherwise
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .judge import Judge, JudgeRequest, stub_judge
from .stream import StreamTimeline, token_count
from .trace import ProtocolReport, Trajectory, check_protocol

TASK_KINDS = ("multiple_choice", "numeric", "short_answer")
DIFFICULTY_LEVEL = {"easy": 1, "medium": 2, "hard": 3}
REWARD_TERMS = ("a", "f", "s", "u", "t", "c")


@dataclass(frozen=True)
class RewardWeights:
    lambda_a: float = 1.0
    lambda_f: float = 1.0
    lambda_s: float = 1.0
    lambda_u: float = 3.0
    lambda_t: float = 1.0
    lambda_c: float = 0.45

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class RewardConfig:
    weights: RewardWeights = field(default_factory=RewardWeights)
    free_budget: int = 6
    slope: float = 0.30
    cap: float = 3.0
    bonus: float = 0.25
    bonus_min_tokens: int = 3
    bonus_max_tokens: int = 6
    tolerance_ticks: int = 2
    sparsity: float = 0.5
    effort_tokens_per_level: int = 24
    effort_floor: float = 0.5
    shape_penalty: float = 0.25
    token_cap: int = 48
    terms: tuple[str, ...] = REWARD_TERMS

    @classmethod
    def from_dict(cls, d: Mapping) -> "RewardConfig":
        d = dict(d)
        weights = RewardWeights(**d.pop("weights", {}))
        if "terms" in d:
            d["terms"] = tuple(d["terms"])
        return cls(weights=weights, **d)


@dataclass(frozen=True)
class RewardBreakdown:
    r_a: float
    r_f: float
    r_s: float
    r_u: float
    r_t: float
    r_c: float
    gated: bool
    total: float
    violations: tuple[str, ...] = ()


# ---------------------------------------------------------------- answers

_NUM_WORDS = {
    w: i for i, w in enumerate(
        "zero one two three four five six seven eight nine ten eleven twelve thirteen "
        "fourteen fifteen sixteen seventeen eighteen nineteen twenty".split()
    )
}
_NUM_WORDS.update({"thirty": 30, "forty": 40, "fifty": 50, "sixty": 60, "seventy": 70, "eighty": 80, "ninety": 90})
_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?")
_LABEL = re.compile(r"^\(?([A-Za-z])\)?[.):]?$")
_WH = {"what", "which", "who", "whom", "whose", "when", "where", "why", "how"}


def normalize_text(text: str) -> str:
    return " ".join(re.sub(r"[^a-z0-9 ]", " ", text.lower()).split())


def parse_number(text: str) -> float | None:
    cleaned = text.replace(",", "").replace("$", "")
    m = _NUMBER.search(cleaned)
    if m:
        return float(m.group(0))
    for w in normalize_text(text).split():
        if w in _NUM_WORDS:
            return float(_NUM_WORDS[w])
    return None


def _resolve_label(text: str, options: Mapping[str, str] | None) -> str:
    if options:
        m = _LABEL.match(text.strip())
        if m:
            label = m.group(1).upper()
            lookup = {k.upper(): v for k, v in options.items()}
            if label in lookup:
                return lookup[label]
    return text


def answer_matches(
    answer: str,
    gold: str,
    task_kind: str,
    options: Mapping[str, str] | None = None,
    judge: Judge | None = stub_judge,
) -> bool:
    """Base correctness, shared by training reward and evaluation."""
    if task_kind == "numeric":
        a, g = parse_number(answer), parse_number(gold)
        return a is not None and g is not None and abs(a - g) < 1e-9
    if task_kind == "multiple_choice":
        return normalize_text(_resolve_label(answer, options)) == normalize_text(_resolve_label(gold, options))
    if task_kind == "short_answer":
        if normalize_text(answer) == normalize_text(gold):
            return True
        if judge is None:
            return False
        return judge(JudgeRequest(kind="equivalence", answer=answer, gold=gold)).score == 1.0
    raise ValueError(f"unknown task kind {task_kind!r}")


def answer_shape_ok(answer: str, gold: str, task_kind: str) -> bool:
    """Rejects question-form answers, bare labels for text tasks, yes/no mismatches."""
    words = normalize_text(answer).split()
    if answer.strip().endswith("?") or (words and words[0] in _WH):
        return False
    if task_kind != "multiple_choice" and _LABEL.match(answer.strip()):
        return False
    gold_yn = normalize_text(gold) in ("yes", "no")
    answer_yn = bool(words) and words[0] in ("yes", "no")
    return gold_yn == answer_yn


@dataclass(frozen=True)
class AnswerScore:
    r_a: float
    base: float
    multiplier: float
    shape_ok: bool
    missing: bool = False


def effort_multiplier(think_tokens: int, difficulty: str, config: RewardConfig = RewardConfig()) -> float:
    upper = config.effort_tokens_per_level * DIFFICULTY_LEVEL[difficulty]
    return 1.0 if 1 <= think_tokens <= upper else config.effort_floor


def score_answer(
    answer: str | None,
    gold: str,
    task_kind: str,
    trajectory: Trajectory,
    *,
    options: Mapping[str, str] | None = None,
    difficulty: str = "medium",
    judge: Judge | None = stub_judge,
    config: RewardConfig = RewardConfig(),
) -> AnswerScore:
    if answer is None:
        return AnswerScore(0.0, 0.0, 0.0, False, missing=True)
    base = 1.0 if answer_matches(answer, gold, task_kind, options, judge) else 0.0
    shape_ok = answer_shape_ok(answer, gold, task_kind)
    think_tokens = sum(token_count(t) for t in trajectory.think_texts)
    mult = effort_multiplier(think_tokens, difficulty, config)
    if not shape_ok:
        mult = max(config.effort_floor, mult - config.shape_penalty)
    return AnswerScore(base * mult, base, mult, shape_ok)


# ---------------------------------------------------------------- latency

def score_latency(final_think_tokens: int, answer_ok: bool, shape_ok: bool, config: RewardConfig = RewardConfig()) -> float:
    if final_think_tokens < 0:
        raise ValueError("token count must be non-negative")
    penalty = min(config.cap, config.slope * max(0, final_think_tokens - config.free_budget))
    bonus = 0.0
    if answer_ok and shape_ok and config.bonus_min_tokens <= final_think_tokens <= config.bonus_max_tokens:
        bonus = config.bonus
    return -penalty + bonus


# ---------------------------------------------------------------- update timing

def match_updates(anchor_ticks: Sequence[int], think_ticks: Sequence[int], tolerance: int = 2) -> list[tuple[int, int]]:
    """Greedy nearest matching; returns (anchor index, think index) pairs.

    Pairs are taken by increasing distance, ties toward the earlier anchor,
    and each anchor and each think is used at most once.
    """
    candidates = sorted(
        (abs(a - t), a, i, t, j)
        for i, a in enumerate(anchor_ticks)
        for j, t in enumerate(think_ticks)
        if abs(a - t) <= tolerance
    )
    used_a, used_t, pairs = set(), set(), []
    for _, _, i, _, j in candidates:
        if i not in used_a and j not in used_t:
            used_a.add(i)
            used_t.add(j)
            pairs.append((i, j))
    return pairs


def update_timing_value(matched: int, required: int, spurious: int, n_pre_ticks: int, sparsity: float = 0.5) -> float:
    value = matched / max(1, required) - sparsity * spurious / max(1, n_pre_ticks)
    return max(-1.0, min(1.0, value))


def score_update_timing(trajectory: Trajectory, timeline: StreamTimeline, config: RewardConfig = RewardConfig()) -> float:
    anchors = [a.tick for a in timeline.state_anchors]
    thinks = [t for t, _ in trajectory.pre_endpoint_thinks if t < timeline.n_pre_ticks]
    pairs = match_updates(anchors, thinks, config.tolerance_ticks)
    m = len(pairs)
    return update_timing_value(m, len(anchors), len(thinks) - m, timeline.n_pre_ticks, config.sparsity)


# ---------------------------------------------------------------- judge terms

def score_thought_quality(trajectory: Trajectory, keywords: frozenset[str], judge: Judge = stub_judge) -> float:
    thoughts = [a.text for _, a in trajectory.pre_endpoint_thinks]
    if not thoughts:
        return 0.0
    scores = [judge(JudgeRequest(kind="thought", text=t, keywords=keywords)).score for t in thoughts]
    return sum(scores) / len(scores)


def score_chain_consistency(
    trajectory: Trajectory,
    gold_state_trace: Sequence[str],
    keywords: frozenset[str],
    judge: Judge = stub_judge,
) -> float:
    answer = trajectory.answer.text if trajectory.answer is not None else ""
    request = JudgeRequest(
        kind="chain",
        thoughts=tuple(trajectory.think_texts),
        answer=answer,
        keywords=keywords,
        expected_values=tuple(gold_state_trace),
    )
    return judge(request).score


# ---------------------------------------------------------------- total

def total_reward(
    r_a: float, r_f: float, r_s: float, r_u: float, r_t: float | None, r_c: float | None,
    weights: RewardWeights = RewardWeights(),
    terms: Sequence[str] = REWARD_TERMS,
) -> RewardBreakdown:
    r_t = 0.0 if r_t is None else r_t
    r_c = 0.0 if r_c is None else r_c
    w = weights
    if r_f <= 0:
        return RewardBreakdown(r_a, r_f, r_s, r_u, r_t, r_c, True, w.lambda_f * r_f)
    on = set(terms)
    total = w.lambda_f * r_f
    if "a" in on:
        total += w.lambda_a * r_a
    if "s" in on:
        total += w.lambda_s * r_s
    if "u" in on:
        total += w.lambda_u * r_u
    if "t" in on:
        total += w.lambda_t * r_t
    if "c" in on and r_a > 0:
        total += w.lambda_c * r_a * r_c
    return RewardBreakdown(r_a, r_f, r_s, r_u, r_t, r_c, False, total)


@dataclass(frozen=True)
class GoldItem:
    """Everything the reward needs to know about one prompt."""

    item_id: str
    gold: str
    task_kind: str
    difficulty: str
    options: Mapping[str, str] | None = None
    keywords: frozenset[str] = frozenset()
    gold_state_trace: tuple[str, ...] = ()


def score_trajectory(
    trajectory: Trajectory,
    timeline: StreamTimeline,
    item: GoldItem,
    judge: Judge = stub_judge,
    config: RewardConfig = RewardConfig(),
) -> tuple[RewardBreakdown, ProtocolReport]:
    report, r_f = check_protocol(trajectory, timeline, config.token_cap)
    answer = trajectory.answer.text if trajectory.answer is not None else None
    ans = score_answer(
        answer, item.gold, item.task_kind, trajectory,
        options=item.options, difficulty=item.difficulty, judge=judge, config=config,
    )
    r_s = score_latency(trajectory.final_think_tokens, ans.base > 0, ans.shape_ok, config)
    r_u = score_update_timing(trajectory, timeline, config)
    r_t = r_c = None
    if r_f > 0:
        if "t" in config.terms:
            r_t = score_thought_quality(trajectory, item.keywords, judge)
        if "c" in config.terms:
            r_c = score_chain_consistency(trajectory, item.gold_state_trace, item.keywords, judge)
    breakdown = total_reward(ans.r_a, r_f, r_s, r_u, r_t, r_c, config.weights, config.terms)
    breakdown = RewardBreakdown(**{**vars(breakdown), "violations": tuple(v.value for v in report.violations)})
    return breakdown, report
