import sys
import numpy as np
import pytest
from hypothesis import strategies as st

from streamthink.datagen import generate_corpus, prepare
from streamthink.semantics import Delta
from streamthink.stream import AnchorEvent, StreamTimeline, WordEvent, snap_to_grid


def make_timeline(durations, anchor_words=(), *, tick_s=0.5, min_window_s=2.0, deltas=None, words=None, mechanism="cumulative_total"):
    """Timeline from per-word durations; anchors are state updates (+1 each) unless deltas given."""
    t = 0.0
    events = []
    for i, d in enumerate(durations):
        w = words[i] if words else f"w{i}"
        events.append(WordEvent(w, round(t, 6), round(t + d, 6)))
        t = round(t + d, 6)
    anchors = []
    for j, wi in enumerate(anchor_words):
        delta = deltas[j] if deltas else Delta("add", 1)
        anchors.append(AnchorEvent(wi, snap_to_grid(events[wi].end_s, tick_s), "state_update", delta))
    return StreamTimeline(tuple(events), tuple(anchors), events[-1].end_s, tick_s, min_window_s, mechanism)


@st.composite
def timelines(draw, max_words=30, min_window_s=2.0):
    n = draw(st.integers(1, max_words))
    durations = draw(st.lists(st.floats(0.2, 0.5).map(lambda x: round(x, 3)), min_size=n, max_size=n))
    n_anchors = draw(st.integers(0, min(4, n)))
    anchor_words = sorted(draw(st.lists(st.integers(0, n - 1), min_size=n_anchors, max_size=n_anchors, unique=True)))
    return make_timeline(durations, anchor_words, min_window_s=min_window_s)


@pytest.fixture(scope="session")
def corpus():
    return [prepare(r) for r in generate_corpus(40, seed=3)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
