"""Wait-think-answer trace wire format and the interaction-protocol check.

Wire grammar (no whitespace is emitted, whitespace between tags is tolerated)::

    trace  := action*
    action := "<wait/>" | "<think>" TEXT "</think>" | "<answer>" TEXT "</answer>"

TEXT may not contain ``<`` or ``>``.  A think immediately followed by an
answer is the final think; everything before it is a listening step.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass

from .stream import TOKEN_CAP, Action, ActionKind, StreamTimeline


class Violation(str, enum.Enum):
    EARLY_ANSWER = "EarlyAnswer"
    MALFORMED_TAG = "MalformedTag"
    MISSING_FINAL_THINK = "MissingFinalThink"
    MISSING_ANSWER = "MissingAnswer"
    ILLEGAL_ACTION_ORDER = "IllegalActionOrder"
    OVER_CAP_THINK = "OverCapThink"
    OVER_CAP_ANSWER = "OverCapAnswer"


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[tuple[int, Action], ...] = ()
    final_think: Action | None = None
    answer: Action | None = None
    end_tick: int | None = None
    prompt_id: str = ""

    @property
    def pre_endpoint_thinks(self) -> list[tuple[int, Action]]:
        return [(t, a) for t, a in self.steps if a.kind is ActionKind.THINK]

    @property
    def think_texts(self) -> list[str]:
        texts = [a.text for _, a in self.pre_endpoint_thinks]
        if self.final_think is not None:
            texts.append(self.final_think.text)
        return texts

    @property
    def final_think_tokens(self) -> int:
        return self.final_think.token_count if self.final_think is not None else 0


@dataclass(frozen=True)
class ProtocolReport:
    violations: tuple[Violation, ...] = ()
    detail: str = ""

    @property
    def valid(self) -> bool:
        return not self.violations


class TraceParseError(ValueError):
    def __init__(self, message: str, span: tuple[int, int]):
        super().__init__(f"{message} at [{span[0]}:{span[1]}]")
        self.span = span
        self.violation = Violation.MALFORMED_TAG


def serialize(trajectory: Trajectory) -> str:
    """Canonical tag string.

    Ticks are not on the wire; :func:`parse` reassigns consecutive ticks, so
    only gap-free trajectories survive a round trip tick-exactly.
    """
    parts = [_tag(a) for _, a in trajectory.steps]
    if trajectory.final_think is not None:
        parts.append(_tag(trajectory.final_think))
    if trajectory.answer is not None:
        parts.append(_tag(trajectory.answer))
    return "".join(parts)


def _tag(action: Action) -> str:
    if action.kind is ActionKind.WAIT:
        return "<wait/>"
    name = action.kind.value
    return f"<{name}>{action.text}</{name}>"


_TOKEN = re.compile(r"<wait/>|<(think|answer)>([^<>]*)</\1>")
_SPACE = re.compile(r"\s+")


def _scan(text: str) -> list[Action]:
    actions: list[Action] = []
    pos = 0
    while pos < len(text):
        m = _SPACE.match(text, pos)
        if m:
            pos = m.end()
            continue
        m = _TOKEN.match(text, pos)
        if m is None:
            end = text.find(">", pos)
            end = len(text) if end < 0 else end + 1
            raise TraceParseError(f"malformed tag {text[pos:end]!r}", (pos, end))
        if m.group(0) == "<wait/>":
            actions.append(Action.wait())
        else:
            actions.append(Action(ActionKind(m.group(1)), m.group(2)))
        pos = m.end()
    return actions


def parse(text: str, timeline: StreamTimeline | None = None, prompt_id: str = "") -> Trajectory:
    """Parse a tag string; listening steps get ticks 0, 1, 2, ...

    The final think and answer are placed at the tick after the last step,
    so an answer that arrives before the timeline's endpoint tick is visible
    to :func:`check_protocol` as early.
    """
    actions = _scan(text)
    final_think = answer = None
    if len(actions) >= 2 and actions[-1].kind is ActionKind.ANSWER and actions[-2].kind is ActionKind.THINK:
        final_think, answer = actions[-2], actions[-1]
        actions = actions[:-2]
    elif actions and actions[-1].kind is ActionKind.ANSWER:
        answer = actions[-1]
        actions = actions[:-1]
    steps = tuple(enumerate(actions))
    end_tick = len(steps) if (final_think is not None or answer is not None) else None
    return Trajectory(steps=steps, final_think=final_think, answer=answer, end_tick=end_tick, prompt_id=prompt_id)


def _malformed(action: Action) -> bool:
    return "<" in action.text or ">" in action.text


def check_protocol(trajectory: Trajectory, timeline: StreamTimeline, token_cap: int = TOKEN_CAP) -> tuple[ProtocolReport, float]:
    """Collect every protocol violation; R_f is +1 when clean, -1 otherwise."""
    endpoint = timeline.n_pre_ticks
    found: list[Violation] = []

    def flag(v: Violation):
        if v not in found:
            found.append(v)

    prev_tick = None
    answered = False
    for tick, action in trajectory.steps:
        if answered:
            flag(Violation.ILLEGAL_ACTION_ORDER)
        if prev_tick is not None and tick <= prev_tick:
            flag(Violation.ILLEGAL_ACTION_ORDER)
        prev_tick = tick
        if action.kind is ActionKind.ANSWER:
            answered = True
            flag(Violation.EARLY_ANSWER if tick < endpoint else Violation.ILLEGAL_ACTION_ORDER)
        elif tick >= endpoint:
            flag(Violation.ILLEGAL_ACTION_ORDER)
        if _malformed(action):
            flag(Violation.MALFORMED_TAG)
        if action.kind is ActionKind.THINK and action.token_count > token_cap:
            flag(Violation.OVER_CAP_THINK)
        if action.kind is ActionKind.ANSWER and action.token_count > token_cap:
            flag(Violation.OVER_CAP_ANSWER)

    ft, ans = trajectory.final_think, trajectory.answer
    if ft is None:
        flag(Violation.MISSING_FINAL_THINK)
    else:
        if ft.kind is not ActionKind.THINK:
            flag(Violation.ILLEGAL_ACTION_ORDER)
        if _malformed(ft):
            flag(Violation.MALFORMED_TAG)
        if ft.token_count > token_cap:
            flag(Violation.OVER_CAP_THINK)
    if ans is None:
        flag(Violation.MISSING_ANSWER)
    else:
        if ans.kind is not ActionKind.ANSWER:
            flag(Violation.ILLEGAL_ACTION_ORDER)
        if _malformed(ans):
            flag(Violation.MALFORMED_TAG)
        if ans.token_count > token_cap:
            flag(Violation.OVER_CAP_ANSWER)
    if (ft is not None or ans is not None) and trajectory.end_tick is not None:
        if trajectory.end_tick < endpoint and ans is not None:
            flag(Violation.EARLY_ANSWER)
        if prev_tick is not None and trajectory.end_tick <= prev_tick:
            flag(Violation.ILLEGAL_ACTION_ORDER)

    report = ProtocolReport(tuple(found))
    return report, 1.0 if report.valid else -1.0


def check_text(text: str, timeline: StreamTimeline, prompt_id: str = "", token_cap: int = TOKEN_CAP) -> tuple[ProtocolReport, float, Trajectory | None]:
    """Parse then check; unparseable text is a MalformedTag with R_f = -1."""
    try:
        trajectory = parse(text, timeline, prompt_id)
    except TraceParseError as exc:
        return ProtocolReport((Violation.MALFORMED_TAG,), detail=str(exc)), -1.0, None
    report, r_f = check_protocol(trajectory, timeline, token_cap)
    return report, r_f, trajectory
