"""Shared domain vocabulary: boxes, steps, trajectories, answers, and geometry.

Everything here is immutable value data; all operations are pure functions.
The canonical JSONL record for a trajectory is one JSON object per line with
fields ``task_id``, ``steps`` (array of {kind, tokens, claim}), ``logprobs``,
``answer``, and ``outcome_score`` (nullable).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence, Union


class DegenerateBoxError(ValueError):
    """Raised when a zero-area box is passed where a valid box is required."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box on an integer cell grid, half-open on the max edges.

    A box covers cells (x, y) with x_min <= x < x_max and y_min <= y < y_max,
    so areas and intersections are exact integer arithmetic.
    """

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DegenerateBoxError(f"box has non-positive area: {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def within(self, width: int, height: int) -> bool:
        return 0 <= self.x_min and 0 <= self.y_min and self.x_max <= width and self.y_max <= height

    def as_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @staticmethod
    def from_list(xs: Sequence[int]) -> "Box":
        if len(xs) != 4:
            raise ValueError(f"box needs 4 coordinates, got {xs!r}")
        return Box(int(xs[0]), int(xs[1]), int(xs[2]), int(xs[3]))


def intersection_area(a: Box, b: Box) -> int:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0
    return w * h


def compute_iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0.0 when disjoint.

    Areas are exact integers, so the result is a single float division of two
    exact integers and matches a rasterized cell-count oracle bit for bit.
    """
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union


class StepKind(str, Enum):
    PLAN = "plan"
    EVIDENCE = "evidence"
    SYNTHESIS = "synthesis"
    ANSWER = "answer"


@dataclass(frozen=True)
class BoxClaim:
    """Claim that an object of ``class_name`` sits exactly at ``box``."""

    class_name: str
    box: Box

    def to_json(self) -> dict:
        return {"type": "box", "class": self.class_name, "box": self.box.as_list()}


@dataclass(frozen=True)
class CountClaim:
    """Claim that the scene contains exactly ``count`` objects of ``class_name``."""

    class_name: str
    count: int

    def to_json(self) -> dict:
        return {"type": "count", "class": self.class_name, "count": self.count}


@dataclass(frozen=True)
class AttrClaim:
    """Claim that the query's target object has attribute ``key`` == ``value``."""

    key: str
    value: str

    def to_json(self) -> dict:
        return {"type": "attr", "key": self.key, "value": self.value}


Claim = Union[BoxClaim, CountClaim, AttrClaim]


def claim_from_json(obj: Optional[dict]) -> Optional[Claim]:
    if obj is None:
        return None
    kind = obj["type"]
    if kind == "box":
        return BoxClaim(obj["class"], Box.from_list(obj["box"]))
    if kind == "count":
        return CountClaim(obj["class"], int(obj["count"]))
    if kind == "attr":
        return AttrClaim(obj["key"], obj["value"])
    raise ValueError(f"unknown claim type {kind!r}")


@dataclass(frozen=True)
class Step:
    kind: StepKind
    tokens: tuple[str, ...]
    claim: Optional[Claim] = None

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "tokens": list(self.tokens),
            "claim": self.claim.to_json() if self.claim is not None else None,
        }

    @staticmethod
    def from_json(obj: dict) -> "Step":
        return Step(StepKind(obj["kind"]), tuple(obj["tokens"]), claim_from_json(obj.get("claim")))


class AnswerKind(str, Enum):
    COUNT = "count"
    GROUNDING = "ground"
    LABEL = "label"


@dataclass(frozen=True)
class Answer:
    kind: AnswerKind
    count_value: Optional[int] = None
    box: Optional[Box] = None
    label: Optional[str] = None

    def __post_init__(self):
        if self.kind == AnswerKind.COUNT:
            if self.count_value is None or self.count_value < 0:
                raise ValueError("count answers need a non-negative value")
        elif self.kind == AnswerKind.GROUNDING:
            if self.box is None:
                raise ValueError("grounding answers need a box")
        elif self.kind == AnswerKind.LABEL:
            if self.label is None:
                raise ValueError("label answers need a string")

    @staticmethod
    def count(value: int) -> "Answer":
        return Answer(AnswerKind.COUNT, count_value=value)

    @staticmethod
    def grounding(box: Box) -> "Answer":
        return Answer(AnswerKind.GROUNDING, box=box)

    @staticmethod
    def label(value: str) -> "Answer":
        return Answer(AnswerKind.LABEL, label=value)

    def to_json(self) -> dict:
        if self.kind == AnswerKind.COUNT:
            return {"kind": "count", "count": self.count_value}
        if self.kind == AnswerKind.GROUNDING:
            return {"kind": "ground", "box": self.box.as_list()}
        return {"kind": "label", "label": self.label}

    @staticmethod
    def from_json(obj: Optional[dict]) -> Optional["Answer"]:
        if obj is None:
            return None
        kind = AnswerKind(obj["kind"])
        if kind == AnswerKind.COUNT:
            return Answer.count(int(obj["count"]))
        if kind == AnswerKind.GROUNDING:
            return Answer.grounding(Box.from_list(obj["box"]))
        return Answer.label(obj["label"])


@dataclass(frozen=True)
class Trajectory:
    """An ordered sequence of reasoning steps plus a final answer.

    ``token_logprobs`` holds one natural-log probability per token across all
    steps, in order.  ``outcome_score``, when present, lies in [0, 1].
    """

    task_id: str
    steps: tuple[Step, ...]
    token_logprobs: tuple[float, ...]
    final_answer: Optional[Answer] = None
    outcome_score: Optional[float] = None

    def tokens(self) -> list[str]:
        out: list[str] = []
        for s in self.steps:
            out.extend(s.tokens)
        return out

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "steps": [s.to_json() for s in self.steps],
            "logprobs": list(self.token_logprobs),
            "answer": self.final_answer.to_json() if self.final_answer else None,
            "outcome_score": self.outcome_score,
        }

    @staticmethod
    def from_json(obj: dict) -> "Trajectory":
        return Trajectory(
            task_id=obj["task_id"],
            steps=tuple(Step.from_json(s) for s in obj["steps"]),
            token_logprobs=tuple(float(x) for x in obj["logprobs"]),
            final_answer=Answer.from_json(obj.get("answer")),
            outcome_score=obj.get("outcome_score"),
        )


def token_count(t: Trajectory) -> int:
    """Total token count over all steps (the length the reward-model loss averages over)."""
    return sum(len(s.tokens) for s in t.steps)


# Violation codes returned by validate_trajectory.  Violations are data, not faults.
ANSWER_NOT_FINAL = "AnswerNotFinal"
LOGPROB_LENGTH_MISMATCH = "LogprobLengthMismatch"
POSITIVE_LOGPROB = "PositiveLogprob"
OUTCOME_OUT_OF_RANGE = "OutcomeOutOfRange"
UNKNOWN_TOKEN = "UnknownToken"
UNKNOWN_CLAIM_CLASS = "UnknownClaimClass"
ANSWER_MISMATCH = "AnswerMismatch"
MISSING_FINAL_ANSWER = "MissingFinalAnswer"


def validate_trajectory(t: Trajectory, vocab) -> list[str]:
    """Check all trajectory and step invariants; return [] iff everything holds.

    ``vocab`` is a TaskVocabulary (see treealign.vocab); it supplies the legal
    token strings and class names.
    """
    violations: list[str] = []
    n_tokens = token_count(t)
    if len(t.token_logprobs) != n_tokens:
        violations.append(LOGPROB_LENGTH_MISMATCH)
    if any(lp > 0 for lp in t.token_logprobs):
        violations.append(POSITIVE_LOGPROB)
    if t.outcome_score is not None and not (0.0 <= t.outcome_score <= 1.0):
        violations.append(OUTCOME_OUT_OF_RANGE)
    for i, s in enumerate(t.steps):
        if s.kind == StepKind.ANSWER and i != len(t.steps) - 1:
            violations.append(ANSWER_NOT_FINAL)
            break
    known = vocab.token_set()
    if any(tok not in known for tok in t.tokens()):
        violations.append(UNKNOWN_TOKEN)
    classes = set(vocab.classes)
    for s in t.steps:
        if isinstance(s.claim, (BoxClaim, CountClaim)) and s.claim.class_name not in classes:
            violations.append(UNKNOWN_CLAIM_CLASS)
            break
    if t.steps and t.steps[-1].kind == StepKind.ANSWER:
        decoded = vocab.decode_answer_step(t.steps[-1])
        if t.final_answer is None:
            violations.append(MISSING_FINAL_ANSWER)
        elif decoded is not None and decoded != t.final_answer:
            violations.append(ANSWER_MISMATCH)
    return violations


def write_jsonl(path, records: Iterable[dict]) -> None:
    import os

    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
