"""Domain types for reasoning traces, steps, and routing actions.

A trace abstracts a multi-step generation: each step carries a correctness
score in [0, 1] from a step-level scorer, the number of tokens the step cost
to decode, which generator produced it, and (in simulation or labeled data)
a ground-truth correctness label.  Raw step text never appears here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional

from .errors import (
    AppendAfterTermination,
    EmptyTrace,
    InvariantViolation,
    MaxStepsExceeded,
    ParseError,
)
from .validation import require_nonnegative_int, require_unit_interval

DEFAULT_MAX_STEPS = 30


class RoutingAction(Enum):
    """Per-step decision: keep the cheap generator's step or redo it."""

    CONTINUE = "continue"
    REGENERATE = "regenerate"


class Origin(Enum):
    """Which generator produced an accepted step."""

    WEAK = "weak"
    STRONG = "strong"


class Truth(Enum):
    """Ground-truth step label, available only in simulation or labeled data."""

    CORRECT = "correct"
    INCORRECT = "incorrect"


@dataclass(frozen=True)
class StepRecord:
    """One accepted reasoning step: (score, token count, origin, optional truth)."""

    score: float
    token_count: int
    origin: Origin = Origin.WEAK
    truth: Optional[Truth] = None

    def __post_init__(self):
        require_unit_interval("score", self.score)
        n = require_nonnegative_int("token_count", self.token_count)
        if n < 1:
            raise InvariantViolation("token_count", "generated steps cost at least one token")
        if not isinstance(self.origin, Origin):
            raise InvariantViolation("origin", f"expected Origin, got {self.origin!r}")
        if self.truth is not None and not isinstance(self.truth, Truth):
            raise InvariantViolation("truth", f"expected Truth or None, got {self.truth!r}")


@dataclass(frozen=True)
class TraceState:
    """A query-rooted prefix of accepted steps plus a termination flag.

    Immutable: :meth:`append` returns a new trace.  ``step_index`` always
    equals the number of steps.
    """

    query_id: str
    steps: tuple[StepRecord, ...] = ()
    terminated: bool = False
    max_steps: int = DEFAULT_MAX_STEPS

    def __post_init__(self):
        if not isinstance(self.steps, tuple):
            object.__setattr__(self, "steps", tuple(self.steps))
        if self.max_steps < 1:
            raise InvariantViolation("max_steps", "must be at least 1")
        if len(self.steps) > self.max_steps:
            raise InvariantViolation("steps", f"{len(self.steps)} steps exceed cap {self.max_steps}")

    @property
    def step_index(self) -> int:
        return len(self.steps)

    def append(self, step: StepRecord) -> "TraceState":
        return append_step(self, step)

    def terminate(self) -> "TraceState":
        return replace(self, terminated=True)

    def scores(self) -> tuple[float, ...]:
        return tuple(s.score for s in self.steps)

    def has_origin(self, origin: Origin) -> bool:
        return any(s.origin is origin for s in self.steps)

    def min_score(self) -> float:
        if not self.steps:
            raise EmptyTrace("trace has no steps")
        return min(s.score for s in self.steps)


@dataclass(frozen=True)
class AggFeatures:
    """Reduced per-step observation: current score, running min of earlier
    scores, current token count, and the 1-based step index.

    At step 1 the running min over the empty prefix is 1.0 by convention
    ("no evidence of prior error").
    """

    current_score: float
    min_prev_score: float
    current_tokens: int
    step_index: int

    def __post_init__(self):
        require_unit_interval("current_score", self.current_score)
        require_unit_interval("min_prev_score", self.min_prev_score)
        require_nonnegative_int("current_tokens", self.current_tokens)
        if self.step_index < 1:
            raise InvariantViolation("step_index", "steps are 1-indexed")

    def observation(self) -> tuple[float, float]:
        """(min_prev_score, current_score) pair used as a noisy observation."""
        return (self.min_prev_score, self.current_score)


@dataclass(frozen=True)
class CostLedger:
    """Token accounting for one episode.

    ``strong_tokens`` counts every token the expensive generator decoded;
    ``weak_tokens`` counts every token the cheap generator decoded, including
    proposals that were discarded by a regeneration.
    """

    strong_tokens: int = 0
    weak_tokens: int = 0
    regenerate_count: int = 0

    def __post_init__(self):
        require_nonnegative_int("strong_tokens", self.strong_tokens)
        require_nonnegative_int("weak_tokens", self.weak_tokens)
        require_nonnegative_int("regenerate_count", self.regenerate_count)
        if (self.strong_tokens == 0) != (self.regenerate_count == 0):
            raise InvariantViolation(
                "strong_tokens", "strong tokens accrue exactly when regenerations happen"
            )


def append_step(trace: TraceState, step: StepRecord) -> TraceState:
    """Return ``trace`` with ``step`` appended; the input is not mutated."""
    if trace.terminated:
        raise AppendAfterTermination(f"trace {trace.query_id!r} is terminated")
    if trace.step_index >= trace.max_steps:
        raise MaxStepsExceeded(f"trace {trace.query_id!r} already has {trace.max_steps} steps")
    return replace(trace, steps=trace.steps + (step,))


def aggregate_features(trace: TraceState) -> AggFeatures:
    """Extract the reduced feature set for the latest step of ``trace``."""
    if trace.step_index == 0:
        raise EmptyTrace("cannot aggregate features of an empty trace")
    last = trace.steps[-1]
    prev = trace.steps[:-1]
    min_prev = min((s.score for s in prev), default=1.0)
    return AggFeatures(
        current_score=last.score,
        min_prev_score=min_prev,
        current_tokens=last.token_count,
        step_index=trace.step_index,
    )


# --- JSONL interchange -------------------------------------------------------
#
# One JSON object per line:
#   {"query_id": ..., "steps": [{"score": ..., "tokens": ..., "origin": ...,
#    "truth": ...?}, ...], "terminated": bool}


def step_to_dict(step: StepRecord) -> dict:
    d = {"score": step.score, "tokens": step.token_count, "origin": step.origin.value}
    if step.truth is not None:
        d["truth"] = step.truth.value
    return d


def trace_to_dict(trace: TraceState) -> dict:
    return {
        "query_id": trace.query_id,
        "steps": [step_to_dict(s) for s in trace.steps],
        "terminated": trace.terminated,
    }


def _step_from_dict(d: dict) -> StepRecord:
    if not isinstance(d, dict):
        raise InvariantViolation("steps", "each step must be an object")
    for key in ("score", "tokens", "origin"):
        if key not in d:
            raise InvariantViolation(key, "missing required step field")
    try:
        origin = Origin(d["origin"])
    except ValueError:
        raise InvariantViolation("origin", f"unknown origin {d['origin']!r}") from None
    truth = None
    if d.get("truth") is not None:
        try:
            truth = Truth(d["truth"])
        except ValueError:
            raise InvariantViolation("truth", f"unknown truth {d['truth']!r}") from None
    tokens = d["tokens"]
    if isinstance(tokens, float) and tokens.is_integer():
        tokens = int(tokens)
    return StepRecord(score=d["score"], token_count=tokens, origin=origin, truth=truth)


def trace_from_dict(d: dict, max_steps: int = DEFAULT_MAX_STEPS) -> TraceState:
    if not isinstance(d, dict):
        raise InvariantViolation("trace", "expected an object")
    for key in ("query_id", "steps", "terminated"):
        if key not in d:
            raise InvariantViolation(key, "missing required trace field")
    if not isinstance(d["steps"], list):
        raise InvariantViolation("steps", "expected an array")
    steps = tuple(_step_from_dict(s) for s in d["steps"])
    if not isinstance(d["terminated"], bool):
        raise InvariantViolation("terminated", "expected a boolean")
    return TraceState(
        query_id=str(d["query_id"]), steps=steps, terminated=d["terminated"], max_steps=max_steps
    )


def write_traces_jsonl(traces: Iterable[TraceState], path: str | Path) -> int:
    """Write traces one-per-line; returns the number written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps(trace_to_dict(t)) + "\n")
            n += 1
    return n


def iter_traces_jsonl(path: str | Path, max_steps: int = DEFAULT_MAX_STEPS) -> Iterator[TraceState]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, str(exc)) from exc
            yield trace_from_dict(obj, max_steps=max_steps)


def replay_load(path: str | Path, max_steps: int = DEFAULT_MAX_STEPS) -> list[TraceState]:
    """Load and validate a recorded-trace corpus (JSONL, one trace per line)."""
    return list(iter_traces_jsonl(path, max_steps=max_steps))
