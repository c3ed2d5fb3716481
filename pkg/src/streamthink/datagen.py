"""Procedural streaming-QA records with simulated word timings.

Each record is a short spoken request whose answer depends on a chain of
state updates (adds, overwrites, exclusions, ...).  Every update is attached
to an anchor word; folding the anchors' deltas reproduces ``final_answer``.
Utterances always open with a value that later stops being the answer.

Records are plain dicts so they serialise to JSONL without a schema layer;
:func:`validate_record` is the schema.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidArgument, SchemaViolation
from .reward import GoldItem
from .semantics import MECHANISMS, Delta, answer_of, fold, key_value, render_state
from .stream import MIN_WINDOW_S, TICK_S, Action, AnchorEvent, StreamTimeline, WordEvent, snap_to_grid
from .trace import Trajectory

DIFFICULTIES = ("easy", "medium", "hard")
UPDATES_BY_DIFFICULTY = {"easy": (2, 3), "medium": (4, 5), "hard": (6, 8)}
WORD_DURATION_S = (0.2, 0.5)
FILLERS = ("um", "uh")
FILLER_PROB = 0.15

TASK_KIND = {
    "overwrite_final_slot": "short_answer",
    "cumulative_total": "numeric",
    "tiered_discount_total": "numeric",
    "fee_or_threshold_decision": "short_answer",
    "exclusion_choice": "multiple_choice",
    "bounded_window_selection": "short_answer",
    "quantity_update": "numeric",
    "eligibility_decision": "short_answer",
    "refund_or_credit_total": "numeric",
    "schedule_window_resolution": "short_answer",
}

REQUIRED_FIELDS = (
    "sample_id", "task_type", "topic", "verifiable", "difficulty", "question_text",
    "tts_text", "tts_instruct", "transcript_text", "anchor_words", "logical_actions",
    "final_answer", "difficulty_metadata",
    "mechanism", "task_kind", "word_timings", "anchors", "options", "early_answer",
)

_SMALL = (
    "zero one two three four five six seven eight nine ten eleven twelve thirteen "
    "fourteen fifteen sixteen seventeen eighteen nineteen twenty"
).split()
_TENS = {30: "thirty", 40: "forty", 50: "fifty", 60: "sixty", 70: "seventy", 80: "eighty", 90: "ninety"}


def spell(n: int) -> str:
    """Single-word English number (0..20 and round tens)."""
    if 0 <= n <= 20:
        return _SMALL[n]
    if n in _TENS:
        return _TENS[n]
    raise InvalidArgument(f"{n} has no single-word spelling")


PLACES = ("library", "cafe", "station", "park", "office", "gym", "bakery", "museum", "harbor", "lobby")
COLORS = ("red", "blue", "green", "yellow", "purple", "orange", "silver")
ITEMS = ("apples", "boxes", "tickets", "chairs", "books", "plates", "bottles")
STYLES = ("calm and steady", "slightly hurried", "casual, thinking aloud", "clear and slow")
TOPICS = {
    "overwrite_final_slot": "meeting plans",
    "cumulative_total": "shopping",
    "tiered_discount_total": "checkout",
    "fee_or_threshold_decision": "budget",
    "exclusion_choice": "choosing a color",
    "bounded_window_selection": "appointment slots",
    "quantity_update": "inventory",
    "eligibility_decision": "membership points",
    "refund_or_credit_total": "refunds",
    "schedule_window_resolution": "rescheduling",
}


@dataclass
class _Clause:
    words: list[str]
    delta: Delta | None = None  # anchors on the clause's last word


class _Script:
    """Accumulates clauses, then the closing question."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.clauses: list[_Clause] = []

    def say(self, text: str, delta: Delta | None = None):
        self.clauses.append(_Clause(text.split(), delta))

    def pick(self, seq: Sequence):
        return seq[int(self.rng.integers(len(seq)))]

    def ints(self, lo: int, hi: int) -> int:
        return int(self.rng.integers(lo, hi + 1))


# ---------------------------------------------------------------- mechanisms
# Each builder writes clauses into the script and returns (question, options).

def _cumulative(s: _Script, n: int):
    item = s.pick(ITEMS)
    v = s.ints(2, 9)
    s.say(f"okay so i have {spell(v)}", Delta("add", v))
    for _ in range(n - 1):
        v = s.ints(1, 9)
        s.say(f"{s.pick(['then', 'and then', 'oh and'])} add {spell(v)}", Delta("add", v))
    return f"how many {item} is that in total", None


def _discount(s: _Script, n: int):
    total = 0
    for k in range(n - 1):
        v = s.ints(10, 20) if k == 0 else s.ints(5, 20)
        total += v
        s.say(f"{'first one costs' if k == 0 else 'next one is'} {spell(v)}", Delta("add", v))
    threshold = min(90, max(10, 10 * (total // 10)))
    cut = s.ints(2, 4)
    s.say(f"and they take {spell(cut)} off at {spell(threshold)}", Delta("discount", cut, threshold))
    return "what do i pay in the end", None


def _threshold(s: _Script, n: int, kind: str):
    adds = [s.ints(3, 12) for _ in range(n - 1)]
    first, total = adds[0], sum(adds)
    crossing = bool(s.rng.random() < 0.5)
    if crossing:
        # early running value is on one side of the bound, the final one on the other
        bound = first + 1 + int(s.rng.integers(0, max(1, total - first - 1)))
    else:
        bound = first - 1 - int(s.rng.integers(0, max(1, first - 2)))
    bound = max(1, min(bound, 20))
    if kind == "max":
        s.say(f"my limit is {spell(bound)}", Delta("limit_max", bound))
    else:
        s.say(f"you need at least {spell(bound)}", Delta("limit_min", bound))
    for k, v in enumerate(adds):
        s.say(f"{'i already have' if k == 0 else 'then plus'} {spell(v)}", Delta("add", v))
    if not crossing:
        # pull the total back across the bound with a late removal
        drop = total - bound + (0 if kind == "max" else 1)
        drop = max(1, drop)
        while drop > 20:
            s.say(f"and minus {spell(20)}", Delta("sub", 20))
            drop -= 20
        s.say(f"oh wait minus {spell(drop)}", Delta("sub", drop))
    q = "does that go over my limit" if kind == "max" else "do i qualify"
    return q, None


def _exclusion(s: _Script, n: int):
    k = {2: 3, 3: 3, 4: 4, 5: 4}.get(n, 5)
    colors = list(s.rng.permutation(COLORS)[:k])
    for i, c in enumerate(colors):
        s.say(f"{'options are' if i == 0 else 'or maybe'} {c}", Delta("option", c))
    keep = colors[1 + int(s.rng.integers(k - 1))]
    for c in [c for c in colors if c != keep]:
        s.say(f"{s.pick(['actually not', 'cross out', 'no to'])} {c}", Delta("exclude", c))
    return "which color is left", {chr(65 + i): c for i, c in enumerate(colors)}


def _window(s: _Script, n: int):
    k = max(3, min(5, n))
    hours = sorted(int(h) for h in s.rng.choice(np.arange(9, 19), size=k, replace=False))
    s.say("we have some open slots")
    for i, h in enumerate(hours):
        word = spell(h - 12 if h > 12 else h)
        s.say(f"{'one at' if i == 0 else 'another at'} {word}", Delta("option", f"{(h - 12) if h > 12 else h}{'pm' if h >= 12 else 'am'}"))
    lo = hours[1]
    hi = max(hours)
    s.say(f"but i am only free from {spell(lo - 12 if lo > 12 else lo)} onward", Delta("window", lo, hi))
    return "which is the earliest slot that works", None


def _quantity(s: _Script, n: int):
    item = s.pick(ITEMS)
    v = s.ints(5, 20)
    total = v
    s.say(f"we start with {spell(v)}", Delta("set_num", v))
    for _ in range(n - 1):
        if total > 6 and s.rng.random() < 0.5:
            d = s.ints(1, min(9, total - 1))
            total -= d
            s.say(f"then remove {spell(d)}", Delta("sub", d))
        else:
            d = s.ints(1, 9)
            total += d
            s.say(f"then add {spell(d)}", Delta("add", d))
    return f"how many {item} are there now", None


def _refund(s: _Script, n: int):
    v = s.ints(5, 20)
    total = v
    s.say(f"i got a refund of {spell(v)}", Delta("add", v))
    for _ in range(n - 1):
        if total > 4 and s.rng.random() < 0.4:
            d = s.ints(1, min(5, total - 1))
            total -= d
            s.say(f"minus a fee of {spell(d)}", Delta("sub", d))
        else:
            d = s.ints(1, 12)
            total += d
            s.say(f"plus a credit of {spell(d)}", Delta("add", d))
    return "what is my refund total", None


def _slot(s: _Script, n: int):
    places = list(s.rng.permutation(PLACES)[:n])
    for i, p in enumerate(places):
        lead = "lets meet at the" if i == 0 else s.pick(["actually make it the", "no wait the", "change that to the"])
        s.say(f"{lead} {p}", Delta("set", p))
    return "where are we meeting", None


def _schedule(s: _Script, n: int):
    h = s.ints(13, 16)
    s.say(f"the meeting is at {spell(h - 12)} pm", Delta("set_hour", h))
    for _ in range(n - 1):
        if h < 18 and s.rng.random() < 0.6:
            d = s.ints(1, min(2, 19 - h))
            h += d
            s.say(f"push it back {spell(d)} hours" if d > 1 else "push it back one hour", Delta("shift", d))
        else:
            d = s.ints(1, 2) if h > 11 else 1
            h -= d
            s.say(f"move it earlier by {spell(d)}", Delta("shift", -d))
    return "when is the meeting now", None


def _build(mechanism: str, s: _Script, n: int):
    if mechanism == "cumulative_total":
        return _cumulative(s, n)
    if mechanism == "tiered_discount_total":
        return _discount(s, n)
    if mechanism == "fee_or_threshold_decision":
        return _threshold(s, n, "max")
    if mechanism == "eligibility_decision":
        return _threshold(s, n, "min")
    if mechanism == "exclusion_choice":
        return _exclusion(s, n)
    if mechanism == "bounded_window_selection":
        return _window(s, n)
    if mechanism == "quantity_update":
        return _quantity(s, n)
    if mechanism == "refund_or_credit_total":
        return _refund(s, n)
    if mechanism == "overwrite_final_slot":
        return _slot(s, n)
    if mechanism == "schedule_window_resolution":
        return _schedule(s, n)
    raise InvalidArgument(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")


def _early(deltas: Sequence[Delta], mechanism: str) -> str:
    # a bound alone decides nothing; for decisions the first value is bound + first add
    n = 2 if mechanism in ("fee_or_threshold_decision", "eligibility_decision") else 1
    return answer_of(fold(deltas[:n]), mechanism)


def _seed_for(seed: int, mechanism: str, difficulty: str) -> list[int]:
    tag = hashlib.sha256(f"{mechanism}/{difficulty}".encode()).digest()[:4]
    return [int(seed), int.from_bytes(tag, "little")]


def generate_record(seed: int, mechanism: str, difficulty: str = "easy") -> dict:
    if mechanism not in MECHANISMS:
        raise InvalidArgument(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")
    if difficulty not in DIFFICULTIES:
        raise InvalidArgument(f"unknown difficulty {difficulty!r}")
    rng = np.random.default_rng(_seed_for(seed, mechanism, difficulty))
    lo, hi = UPDATES_BY_DIFFICULTY[difficulty]
    n_updates = int(rng.integers(lo, hi + 1))
    for _ in range(32):
        script = _Script(rng)
        question, options = _build(mechanism, script, n_updates)
        deltas = [c.delta for c in script.clauses if c.delta is not None]
        # the opening value must stop being the answer later on
        if _early(deltas, mechanism) != answer_of(fold(deltas), mechanism):
            break
    else:
        raise RuntimeError(f"could not draw an adversarial {mechanism} record for seed {seed}")

    words: list[str] = []
    anchors: list[dict] = []
    for i, clause in enumerate(script.clauses):
        if i > 0 and rng.random() < FILLER_PROB:
            words.append(script.pick(FILLERS))
            anchors.append({"word_index": len(words) - 1, "kind": "pause_filler", "state_delta": None})
        words.extend(clause.words)
        if clause.delta is not None:
            anchors.append({"word_index": len(words) - 1, "kind": "state_update", "state_delta": clause.delta.to_dict()})
    words.extend(question.split())

    durations = rng.uniform(*WORD_DURATION_S, size=len(words)).round(3)
    ends = np.cumsum(durations).round(3)
    starts = np.concatenate([[0.0], ends[:-1]])
    timings = [[w, float(a), float(b)] for w, a, b in zip(words, starts, ends)]

    deltas = [Delta.from_dict(a["state_delta"]) for a in anchors if a["kind"] == "state_update"]
    final_answer = answer_of(fold(deltas), mechanism)
    early_answer = _early(deltas, mechanism)

    logical: dict[str, str] = {}
    for i, a in enumerate(anchors):
        key = f"anchor_{i:02d}_{words[a['word_index']]}"
        if a["kind"] == "state_update":
            n_seen = sum(1 for b in anchors[: i + 1] if b["kind"] == "state_update")
            logical[key] = f"<think>{render_state(fold(deltas[:n_seen]), mechanism)}</think>"
        else:
            logical[key] = "<wait/>"
    logical["anchor_AUDIO_END"] = f"<think>so answer {final_answer}</think><answer>{final_answer}</answer>"

    transcript = " ".join(words)
    return {
        "sample_id": f"{mechanism}-{difficulty}-{seed:06d}",
        "task_type": TASK_KIND[mechanism],
        "task_kind": TASK_KIND[mechanism],
        "topic": TOPICS[mechanism],
        "verifiable": True,
        "difficulty": difficulty,
        "mechanism": mechanism,
        "question_text": question[0].upper() + question[1:] + "?",
        "tts_text": transcript[0].upper() + transcript[1:] + "?",
        "tts_instruct": script.pick(STYLES),
        "transcript_text": transcript,
        "anchor_words": [words[a["word_index"]] for a in anchors],
        "logical_actions": logical,
        "final_answer": final_answer,
        "early_answer": early_answer,
        "options": options,
        "difficulty_metadata": {"n_updates": len(deltas), "n_words": len(words)},
        "word_timings": timings,
        "anchors": anchors,
    }


# ---------------------------------------------------------------- validation

_AUDIO_END = re.compile(r"^<think>([^<>]+)</think><answer>([^<>]+)</answer>$")
_NON_FINAL = re.compile(r"^(<wait/>|<think>[^<>]*</think>)$")


def validate_record(record: Mapping, row: int | None = None) -> None:
    def fail(msg: str):
        raise SchemaViolation(msg, row)

    missing = [f for f in REQUIRED_FIELDS if f not in record]
    if missing:
        fail(f"missing fields {missing}")
    if record["mechanism"] not in MECHANISMS:
        fail(f"unknown mechanism {record['mechanism']!r}")
    if record["difficulty"] not in DIFFICULTIES:
        fail(f"unknown difficulty {record['difficulty']!r}")
    words = record["transcript_text"].split()
    if [t[0] for t in record["word_timings"]] != words:
        fail("word_timings do not match transcript_text")
    prev_end = 0.0
    for w, a, b in record["word_timings"]:
        if a < prev_end - 1e-9 or b <= a:
            fail(f"bad timing for {w!r}")
        prev_end = b
    anchors = record["anchors"]
    if len(anchors) != len(record["anchor_words"]):
        fail("anchor_words and anchors differ in length")
    for a, w in zip(anchors, record["anchor_words"]):
        if w not in words:
            fail(f"anchor word {w!r} is not in the transcript")
        if not 0 <= a["word_index"] < len(words) or words[a["word_index"]] != w:
            fail(f"anchor word {w!r} is not at index {a['word_index']}")
        if a["kind"] == "state_update" and not a.get("state_delta"):
            fail("state_update anchor without a delta")
    keys = list(record["logical_actions"])
    if len(keys) != len(anchors) + 1 or keys[-1] != "anchor_AUDIO_END":
        fail("logical_actions needs one key per anchor plus anchor_AUDIO_END")
    for k in keys[:-1]:
        if not _NON_FINAL.match(record["logical_actions"][k]):
            fail(f"non-final action {k} must be a wait or a think")
    m = _AUDIO_END.match(record["logical_actions"]["anchor_AUDIO_END"])
    if m is None:
        fail("anchor_AUDIO_END must be one think then one answer")
    if m.group(2) != record["final_answer"]:
        fail("trace answer differs from final_answer")
    deltas = [Delta.from_dict(a["state_delta"]) for a in anchors if a["kind"] == "state_update"]
    if answer_of(fold(deltas), record["mechanism"]) != record["final_answer"]:
        fail("final_answer is not the fold of the anchor deltas")


# ---------------------------------------------------------------- alignment

@dataclass(frozen=True)
class GoldTrace:
    """Per-tick gold labels for ticks 0..n_pre_ticks-1 plus the endpoint pair."""

    labels: tuple[Action, ...]
    final_think: Action
    answer: Action

    def trajectory(self, prompt_id: str = "") -> Trajectory:
        return Trajectory(tuple(enumerate(self.labels)), self.final_think, self.answer, len(self.labels), prompt_id)


def build_timeline(record: Mapping, tick_s: float = TICK_S, min_window_s: float = MIN_WINDOW_S) -> StreamTimeline:
    words = tuple(WordEvent(w, a, b) for w, a, b in record["word_timings"])
    if not words:
        raise SchemaViolation("record has no words")
    anchors = []
    for a in record["anchors"]:
        if not 0 <= a["word_index"] < len(words):
            raise SchemaViolation(f"anchor word index {a['word_index']} missing from transcript")
        delta = Delta.from_dict(a["state_delta"]) if a.get("state_delta") else None
        anchors.append(AnchorEvent(a["word_index"], snap_to_grid(words[a["word_index"]].end_s, tick_s), a["kind"], delta))
    return StreamTimeline(words, tuple(anchors), words[-1].end_s, tick_s, min_window_s, record["mechanism"])


def gold_state_trace(timeline: StreamTimeline) -> tuple[str, ...]:
    """Key values the tracked state passes through, one per anchor tick."""
    ticks = sorted({a.tick for a in timeline.state_anchors})
    return tuple(
        key_value(fold(a.state_delta for a in timeline.state_anchors if a.tick <= t), timeline.mechanism)
        for t in ticks
    )


def align_gold_trace(record: Mapping, tick_s: float = TICK_S, min_window_s: float = MIN_WINDOW_S) -> tuple[StreamTimeline, GoldTrace]:
    for w in record["anchor_words"]:
        if w not in record["transcript_text"].split():
            raise SchemaViolation(f"anchor word {w!r} missing from transcript")
    timeline = build_timeline(record, tick_s, min_window_s)
    think_ticks = {a.tick for a in timeline.state_anchors}
    labels = []
    for t in range(timeline.n_pre_ticks):
        if t in think_ticks:
            state = fold(a.state_delta for a in timeline.state_anchors if a.tick <= t)
            labels.append(Action.think(render_state(state, timeline.mechanism)))
        else:
            labels.append(Action.wait())
    answer = record["final_answer"]
    return timeline, GoldTrace(tuple(labels), Action.think(f"so answer {answer}"), Action.answer(answer))


def gold_item(record: Mapping, timeline: StreamTimeline) -> GoldItem:
    return GoldItem(
        item_id=record["sample_id"],
        gold=record["final_answer"],
        task_kind=record["task_kind"],
        difficulty=record["difficulty"],
        options=record.get("options"),
        keywords=timeline.keywords,
        gold_state_trace=gold_state_trace(timeline),
    )


@dataclass(frozen=True)
class Prepared:
    record: Mapping
    timeline: StreamTimeline
    gold: GoldTrace
    item: GoldItem


def prepare(record: Mapping, tick_s: float = TICK_S, min_window_s: float = MIN_WINDOW_S) -> Prepared:
    timeline, gold = align_gold_trace(record, tick_s, min_window_s)
    return Prepared(record, timeline, gold, gold_item(record, timeline))


# ---------------------------------------------------------------- corpus & export

def generate_corpus(
    n: int,
    seed: int = 0,
    mechanisms: Sequence[str] = MECHANISMS,
    mechanism_weights: Sequence[float] | None = None,
    difficulties: Sequence[str] = DIFFICULTIES,
    open_ended_fraction: float = 0.0,
) -> list[dict]:
    """Seeded mixed corpus.  ``open_ended_fraction`` marks rows non-verifiable."""
    unknown = set(mechanisms) - set(MECHANISMS)
    if unknown:
        raise InvalidArgument(f"unknown mechanisms {sorted(unknown)}")
    rng = np.random.default_rng([seed, 0xC0])
    p = None
    if mechanism_weights is not None:
        p = np.asarray(mechanism_weights, dtype=float)
        p = p / p.sum()
    records = []
    for i in range(n):
        mech = mechanisms[int(rng.choice(len(mechanisms), p=p))]
        diff = difficulties[int(rng.integers(len(difficulties)))]
        rec = generate_record(seed * 1_000_003 + i, mech, diff)
        if rng.random() < open_ended_fraction:
            rec["verifiable"] = False
        records.append(rec)
    return records


def _dump(path: Path, rows: Iterable[Mapping]) -> None:
    with path.open("w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def load_jsonl(path: str | Path) -> list[dict]:
    with Path(path).open() as f:
        return [json.loads(line) for line in f if line.strip()]


def export_dataset(
    records: Sequence[Mapping],
    out_dir: str | Path,
    val_fraction: float = 0.1,
    *,
    n_val: int | None = None,
    extra_manifest: Mapping | None = None,
) -> dict[str, Path]:
    """Write sft_train / sft_val (all rows), dapo_train (verifiable train rows), manifest.

    The validation rows are the tail of ``records``; ``n_val`` overrides the fraction.
    """
    for i, r in enumerate(records):
        validate_record(r, row=i)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if n_val is None:
        n_val = int(math.floor(len(records) * val_fraction + 1e-9))
    if not 0 <= n_val <= len(records):
        raise InvalidArgument(f"n_val {n_val} out of range")
    train, val = records[: len(records) - n_val], records[len(records) - n_val:]
    paths = {
        "sft_train": out / "sft_train.jsonl",
        "sft_val": out / "sft_val.jsonl",
        "dapo_train": out / "dapo_train.jsonl",
        "manifest": out / "manifest.json",
    }
    _dump(paths["sft_train"], train)
    _dump(paths["sft_val"], val)
    _dump(paths["dapo_train"], (r for r in train if r["verifiable"]))
    manifest = {
        "n_records": len(records),
        "n_train": len(train),
        "n_val": len(val),
        "n_dapo": sum(1 for r in train if r["verifiable"]),
        "fields": list(REQUIRED_FIELDS),
        **(dict(extra_manifest) if extra_manifest else {}),
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths
