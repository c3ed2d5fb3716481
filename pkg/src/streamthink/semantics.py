"""Answer-state folding for the ten reasoning mechanisms.

A record's evidence is a sequence of :class:`Delta` updates.  Folding them in
order yields a :class:`TrackedState`; the gold answer is read off the final
state.  The same fold drives gold answers, extractive thoughts and the chain
judge, so they cannot disagree about what a stream means.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

MECHANISMS = (
    "overwrite_final_slot",
    "cumulative_total",
    "tiered_discount_total",
    "fee_or_threshold_decision",
    "exclusion_choice",
    "bounded_window_selection",
    "quantity_update",
    "eligibility_decision",
    "refund_or_credit_total",
    "schedule_window_resolution",
)

TOTAL_MECHANISMS = {
    "cumulative_total",
    "tiered_discount_total",
    "quantity_update",
    "refund_or_credit_total",
}
DECISION_MECHANISMS = {"fee_or_threshold_decision", "eligibility_decision"}
OPTION_MECHANISMS = {"exclusion_choice", "bounded_window_selection"}

OPS = (
    "add", "sub", "set_num", "discount", "limit_max", "limit_min",
    "set", "option", "exclude", "window", "set_hour", "shift",
)


@dataclass(frozen=True)
class Delta:
    op: str
    value: int | str
    extra: int | str | None = None

    def __post_init__(self):
        if self.op not in OPS:
            raise ValueError(f"unknown delta op {self.op!r}")

    def to_dict(self) -> dict:
        return {"op": self.op, "value": self.value, "extra": self.extra}

    @classmethod
    def from_dict(cls, d: dict) -> "Delta":
        return cls(d["op"], d["value"], d.get("extra"))


@dataclass(frozen=True)
class TrackedState:
    total: int | None = None
    limit: tuple[str, int] | None = None
    slot: str | None = None
    options: tuple[str, ...] = ()
    hour: int | None = None


def format_hour(hour: int) -> str:
    h = hour % 24
    suffix = "am" if h < 12 else "pm"
    h12 = h % 12 or 12
    return f"{h12}{suffix}"


def parse_hour(text: str) -> int:
    text = text.strip().lower()
    h = int(text[:-2])
    if text.endswith("am"):
        return 0 if h == 12 else h
    return 12 if h == 12 else h + 12


def apply(state: TrackedState, delta: Delta) -> TrackedState:
    op, v = delta.op, delta.value
    if op == "add":
        return replace(state, total=(state.total or 0) + int(v))
    if op == "sub":
        return replace(state, total=(state.total or 0) - int(v))
    if op == "set_num":
        return replace(state, total=int(v))
    if op == "discount":
        total = state.total or 0
        if total >= int(delta.extra):
            total -= int(v)
        return replace(state, total=total)
    if op == "limit_max":
        return replace(state, limit=("max", int(v)))
    if op == "limit_min":
        return replace(state, limit=("min", int(v)))
    if op == "set":
        return replace(state, slot=str(v))
    if op == "option":
        return replace(state, options=state.options + (str(v),))
    if op == "exclude":
        return replace(state, options=tuple(o for o in state.options if o != v))
    if op == "window":
        lo, hi = int(v), int(delta.extra)
        kept = tuple(o for o in state.options if lo <= parse_hour(o) <= hi)
        return replace(state, options=kept)
    if op == "set_hour":
        return replace(state, hour=int(v))
    if op == "shift":
        return replace(state, hour=(state.hour or 0) + int(v))
    raise ValueError(op)


def fold(deltas: Iterable[Delta], state: TrackedState | None = None) -> TrackedState:
    state = state or TrackedState()
    for d in deltas:
        state = apply(state, d)
    return state


def _decision(state: TrackedState) -> str | None:
    if state.limit is None or state.total is None:
        return None
    kind, bound = state.limit
    ok = state.total > bound if kind == "max" else state.total >= bound
    return "yes" if ok else "no"


def answer_of(state: TrackedState, mechanism: str) -> str:
    """Gold-style answer string for a (possibly partial) state."""
    if mechanism in TOTAL_MECHANISMS:
        return str(state.total if state.total is not None else 0)
    if mechanism in DECISION_MECHANISMS:
        return _decision(state) or "no"
    if mechanism == "overwrite_final_slot":
        return state.slot or ""
    if mechanism == "schedule_window_resolution":
        return format_hour(state.hour) if state.hour is not None else ""
    if mechanism == "exclusion_choice":
        return state.options[0] if state.options else ""
    if mechanism == "bounded_window_selection":
        if not state.options:
            return ""
        return min(state.options, key=parse_hour)
    raise ValueError(f"unknown mechanism {mechanism!r}")


def key_value(state: TrackedState, mechanism: str) -> str:
    """The value a short state update must mention; always inside render_state."""
    if mechanism in TOTAL_MECHANISMS or mechanism in DECISION_MECHANISMS:
        if state.total is None and state.limit is not None:
            return str(state.limit[1])
        return str(state.total if state.total is not None else 0)
    if mechanism == "overwrite_final_slot":
        return state.slot or ""
    if mechanism == "schedule_window_resolution":
        return format_hour(state.hour) if state.hour is not None else ""
    return " ".join(state.options)


_TOTAL_LABEL = {
    "cumulative_total": "running total",
    "tiered_discount_total": "running total",
    "quantity_update": "quantity now",
    "refund_or_credit_total": "refund total",
}


def render_state(state: TrackedState, mechanism: str) -> str:
    if mechanism in TOTAL_MECHANISMS:
        return f"{_TOTAL_LABEL[mechanism]} {key_value(state, mechanism)}"
    if mechanism in DECISION_MECHANISMS:
        parts = []
        if state.total is not None:
            parts.append(f"total {state.total}")
        if state.limit is not None:
            parts.append(f"{'limit' if state.limit[0] == 'max' else 'minimum'} {state.limit[1]}")
        decision = _decision(state)
        if decision:
            parts.append(decision)
        return " ".join(parts)
    if mechanism == "overwrite_final_slot":
        return f"slot now {state.slot}"
    if mechanism == "schedule_window_resolution":
        return f"meeting now {key_value(state, mechanism)}"
    if mechanism in OPTION_MECHANISMS:
        return f"left {key_value(state, mechanism)}".strip()
    raise ValueError(f"unknown mechanism {mechanism!r}")


def delta_keywords(deltas: Iterable[Delta]) -> frozenset[str]:
    """Non-numeric slot words carried by the deltas (lower-cased)."""
    words: set[str] = set()
    for d in deltas:
        for v in (d.value, d.extra):
            if isinstance(v, str):
                words.update(w for w in v.lower().split() if not any(c.isdigit() for c in w))
    return frozenset(words)
