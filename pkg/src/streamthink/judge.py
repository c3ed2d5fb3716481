"""Judge interface for the two judge-assisted reward terms.

A judge is any callable ``judge(request) -> JudgeVerdict``.  The default
:func:`stub_judge` is a deterministic rule table so tests never touch a
network service; a remote judge only has to honour the same call contract.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable

JUDGE_SCORES = (0.0, 0.5, 1.0)
THOUGHT_TOKEN_LIMIT = 12


@dataclass(frozen=True)
class JudgeVerdict:
    score: float
    rationale: str = ""

    def __post_init__(self):
        if self.score not in JUDGE_SCORES:
            raise ValueError(f"judge score must be one of {JUDGE_SCORES}, got {self.score}")


@dataclass(frozen=True)
class JudgeRequest:
    """kind is "thought", "chain" or "equivalence"."""

    kind: str
    text: str = ""
    thoughts: tuple[str, ...] = ()
    answer: str = ""
    gold: str = ""
    keywords: frozenset[str] = frozenset()
    expected_values: tuple[str, ...] = ()


Judge = Callable[[JudgeRequest], JudgeVerdict]

_WORD = re.compile(r"[a-z0-9]+")
_ARTICLES = {"a", "an", "the", "at", "on", "in", "of"}


def _words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def _concrete(token: str, keywords: frozenset[str]) -> bool:
    return any(c.isdigit() for c in token) or token in keywords


def _judge_thought(req: JudgeRequest) -> JudgeVerdict:
    tokens = req.text.split()
    concrete = any(_concrete(w, req.keywords) for w in _words(req.text))
    if not concrete:
        return JudgeVerdict(0.0, "no concrete state")
    if len(tokens) <= THOUGHT_TOKEN_LIMIT:
        return JudgeVerdict(1.0, "short concrete state")
    return JudgeVerdict(0.5, "concrete but overlong")


def _contains(haystack: list[str], needle: list[str]) -> bool:
    n = len(needle)
    return n > 0 and any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


def _judge_chain(req: JudgeRequest) -> JudgeVerdict:
    values = {"yes", "no"} | req.keywords
    chain = [w for t in req.thoughts for w in _words(t)]
    mentioned = [w for w in chain if any(c.isdigit() for c in w) or w in values]
    if not mentioned:
        return JudgeVerdict(0.5, "no supporting state in chain")
    answer = _words(req.answer)
    if not answer or mentioned[-1] != answer[-1]:
        return JudgeVerdict(0.0, "chain ends on a value the answer contradicts")
    if all(_contains(chain, _words(v)) for v in req.expected_values if v):
        return JudgeVerdict(1.0, "chain tracks every update")
    return JudgeVerdict(0.5, "partial support")


def _judge_equivalence(req: JudgeRequest) -> JudgeVerdict:
    a = [w for w in _words(req.answer) if w not in _ARTICLES]
    g = [w for w in _words(req.gold) if w not in _ARTICLES]
    if a and "".join(a) == "".join(g):
        return JudgeVerdict(1.0, "equivalent")
    if a and g and (set(a) <= set(g) or set(g) <= set(a)):
        return JudgeVerdict(0.5, "partial overlap")
    return JudgeVerdict(0.0, "different")


def stub_judge(request: JudgeRequest) -> JudgeVerdict:
    if request.kind == "thought":
        return _judge_thought(request)
    if request.kind == "chain":
        return _judge_chain(request)
    if request.kind == "equivalence":
        return _judge_equivalence(request)
    raise ValueError(f"unknown judge request kind {request.kind!r}")
