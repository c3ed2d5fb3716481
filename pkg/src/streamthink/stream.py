"""Simulated timed speech stream, decision grid and controller observations.

The "audio" is a sequence of timestamped words.  Decisions happen on a fixed
grid of ``tick_s`` seconds: ticks ``0 .. n_pre_ticks - 1`` are listening
ticks, tick ``n_pre_ticks`` is the endpoint where the final think and the
answer are produced.
"""
from __future__ import annotations

import bisect
import enum
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .errors import InvalidArgument, InvalidState, ProtocolExhausted
from .semantics import Delta, delta_keywords

TICK_S = 0.5
MIN_WINDOW_S = 2.0
TOKEN_CAP = 48

_EPS = 1e-9


def token_count(text: str) -> int:
    return len(text.split())


def snap_to_grid(t: float, tick_s: float = TICK_S) -> int:
    """Smallest grid index ``k`` with ``k * tick_s >= t``."""
    if tick_s <= 0:
        raise InvalidArgument(f"tick_s must be positive, got {tick_s}")
    if t < 0:
        raise InvalidArgument(f"time must be non-negative, got {t}")
    # rounding absorbs float noise such as 1.5000000000000002
    return math.ceil(round(t / tick_s, 9))


class ActionKind(str, enum.Enum):
    WAIT = "wait"
    THINK = "think"
    ANSWER = "answer"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    text: str = ""

    @classmethod
    def wait(cls) -> "Action":
        return cls(ActionKind.WAIT)

    @classmethod
    def think(cls, text: str) -> "Action":
        return cls(ActionKind.THINK, text)

    @classmethod
    def answer(cls, text: str) -> "Action":
        return cls(ActionKind.ANSWER, text)

    @property
    def token_count(self) -> int:
        return 0 if self.kind is ActionKind.WAIT else token_count(self.text)


@dataclass(frozen=True)
class WordEvent:
    word: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if self.start_s < 0 or self.end_s <= self.start_s:
            raise InvalidArgument(f"bad word timing {self}")


ANCHOR_KINDS = ("state_update", "pause_filler")


@dataclass(frozen=True)
class AnchorEvent:
    word_index: int
    tick: int
    kind: str
    state_delta: Delta | None = None

    def __post_init__(self):
        if self.kind not in ANCHOR_KINDS:
            raise InvalidArgument(f"unknown anchor kind {self.kind!r}")
        if self.kind == "state_update" and self.state_delta is None:
            raise InvalidArgument("state_update anchor needs a state_delta")


@dataclass(frozen=True)
class StreamTimeline:
    words: tuple[WordEvent, ...]
    anchors: tuple[AnchorEvent, ...]
    endpoint_s: float
    tick_s: float = TICK_S
    min_window_s: float = MIN_WINDOW_S
    mechanism: str = "cumulative_total"
    _ends: tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tick_s <= 0:
            raise InvalidArgument("tick_s must be positive")
        words = tuple(self.words)
        object.__setattr__(self, "words", words)
        object.__setattr__(self, "anchors", tuple(self.anchors))
        for a, b in zip(words, words[1:]):
            if b.start_s < a.end_s - _EPS:
                raise InvalidArgument(f"words overlap or are unsorted: {a} / {b}")
        if words and abs(words[-1].end_s - self.endpoint_s) > 1e-6:
            raise InvalidArgument("last word must end at the endpoint")
        for anc in self.anchors:
            if not 0 <= anc.word_index < len(words):
                raise InvalidArgument(f"anchor word index {anc.word_index} out of range")
            expected = snap_to_grid(words[anc.word_index].end_s, self.tick_s)
            if anc.tick != expected:
                raise InvalidArgument(f"anchor tick {anc.tick} != snapped {expected}")
        object.__setattr__(self, "_ends", tuple(w.end_s for w in words))

    @property
    def n_pre_ticks(self) -> int:
        return snap_to_grid(self.endpoint_s, self.tick_s)

    @property
    def state_anchors(self) -> tuple[AnchorEvent, ...]:
        return tuple(a for a in self.anchors if a.kind == "state_update")

    @property
    def keywords(self) -> frozenset[str]:
        return delta_keywords(a.state_delta for a in self.state_anchors)

    def words_until(self, t: float) -> tuple[WordEvent, ...]:
        return self.words[: bisect.bisect_right(self._ends, t + _EPS)]

    def prefix_extent(self, tick: int) -> float:
        """Seconds of audio visible at ``tick`` (minimum window floor, endpoint clamp)."""
        if tick >= self.n_pre_ticks:
            return self.endpoint_s
        return min(self.endpoint_s, max(tick * self.tick_s, self.min_window_s))

    def prefix_words(self, tick: int) -> tuple[WordEvent, ...]:
        return self.words_until(self.prefix_extent(tick))


class Phase(enum.Enum):
    LISTENING = "listening"
    FINAL_THINK = "final_think"
    ANSWER = "answer"
    DONE = "done"


def legal_actions(timeline: StreamTimeline, tick: int, phase: Phase = Phase.LISTENING) -> tuple[ActionKind, ...]:
    if tick < 0:
        raise InvalidArgument("tick must be non-negative")
    if phase is Phase.DONE:
        raise ProtocolExhausted("the controller already answered")
    if phase is Phase.ANSWER:
        return (ActionKind.ANSWER,)
    if phase is Phase.FINAL_THINK or tick >= timeline.n_pre_ticks:
        return (ActionKind.THINK,)
    return (ActionKind.WAIT, ActionKind.THINK)


@dataclass(frozen=True)
class Observation:
    prefix_words: tuple[WordEvent, ...]
    memory: tuple[str, ...]
    tick: int
    endpoint_reached: bool

    def to_bytes(self) -> bytes:
        payload = {
            "prefix_words": [[w.word, w.start_s, w.end_s] for w in self.prefix_words],
            "memory": list(self.memory),
            "tick": self.tick,
            "endpoint_reached": self.endpoint_reached,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def observe_replay(timeline: StreamTimeline, tick: int, memory: Sequence[str] = ()) -> Observation:
    """Full-prefix observation: every call sees the whole heard prefix."""
    return Observation(
        prefix_words=timeline.prefix_words(tick),
        memory=tuple(memory),
        tick=tick,
        endpoint_reached=tick >= timeline.n_pre_ticks,
    )


@dataclass(frozen=True)
class CacheState:
    """Persistent-context state for incremental observation building."""

    words: tuple[WordEvent, ...] = ()
    memory: tuple[str, ...] = ()
    tick: int = -1
    n_pre_ticks: int = 0

    @classmethod
    def start(cls, timeline: StreamTimeline) -> "CacheState":
        return cls(n_pre_ticks=timeline.n_pre_ticks)


def observe_incremental(
    cache: CacheState,
    new_words: Iterable[WordEvent],
    committed: Action | None = None,
    *,
    tick: int | None = None,
) -> tuple[CacheState, Observation]:
    """Append new audio and the previous decision's commitment, then observe.

    Waits are never written into memory; a think appends exactly one entry.
    """
    words = list(cache.words)
    for w in new_words:
        if words and (w.start_s < words[-1].end_s - _EPS):
            raise InvalidState(f"out-of-order word append: {w} after {words[-1]}")
        words.append(w)
    memory = cache.memory
    if committed is not None:
        if committed.kind is ActionKind.THINK:
            memory = memory + (committed.text,)
        elif committed.kind is ActionKind.ANSWER:
            raise InvalidState("an answer cannot be committed into the listening cache")
    next_tick = cache.tick + 1 if tick is None else tick
    if next_tick <= cache.tick:
        raise InvalidState(f"tick must advance past {cache.tick}, got {next_tick}")
    new_cache = replace(cache, words=tuple(words), memory=memory, tick=next_tick)
    obs = Observation(
        prefix_words=new_cache.words,
        memory=memory,
        tick=next_tick,
        endpoint_reached=next_tick >= cache.n_pre_ticks,
    )
    return new_cache, obs


def pending_words(timeline: StreamTimeline, cache: CacheState, tick: int) -> tuple[WordEvent, ...]:
    """Words that become visible at ``tick`` but are not yet cached."""
    return timeline.prefix_words(tick)[len(cache.words):]
