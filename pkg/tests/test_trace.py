import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from steproute.errors import (
    AppendAfterTermination,
    EmptyTrace,
    InvariantViolation,
    MaxStepsExceeded,
    ParseError,
)
from steproute.trace import (
    AggFeatures,
    CostLedger,
    Origin,
    StepRecord,
    TraceState,
    Truth,
    aggregate_features,
    append_step,
    replay_load,
    trace_from_dict,
    trace_to_dict,
    write_traces_jsonl,
)


def make_trace(scores, tokens=None, query_id="q"):
    tokens = tokens or [10] * len(scores)
    t = TraceState(query_id=query_id)
    for s, c in zip(scores, tokens):
        t = t.append(StepRecord(score=s, token_count=c))
    return t


class TestStepRecord:
    def test_valid(self):
        s = StepRecord(score=0.9, token_count=12)
        assert s.origin is Origin.WEAK and s.truth is None

    @pytest.mark.parametrize("score", [-0.1, 1.5, float("nan")])
    def test_score_bounds(self, score):
        with pytest.raises(InvariantViolation):
            StepRecord(score=score, token_count=5)

    def test_zero_tokens_rejected(self):
        with pytest.raises(InvariantViolation):
            StepRecord(score=0.5, token_count=0)


class TestAppendStep:
    def test_append_to_empty(self):
        t = append_step(TraceState(query_id="q"), StepRecord(score=0.9, token_count=12))
        assert t.step_index == 1

    def test_input_not_mutated(self):
        t0 = make_trace([0.5])
        t1 = append_step(t0, StepRecord(score=0.4, token_count=3))
        assert t0.step_index == 1 and t1.step_index == 2
        assert t0.steps[0].score == 0.5

    def test_max_steps_cap(self):
        t = make_trace([0.5] * 30)
        with pytest.raises(MaxStepsExceeded):
            append_step(t, StepRecord(score=0.5, token_count=1))

    def test_append_after_termination(self):
        t = make_trace([0.5]).terminate()
        with pytest.raises(AppendAfterTermination):
            append_step(t, StepRecord(score=0.5, token_count=1))


class TestAggregateFeatures:
    def test_three_steps(self):
        t = make_trace([0.9, 0.4, 0.7], [12, 30, 18])
        f = aggregate_features(t)
        assert f == AggFeatures(0.7, 0.4, 18, 3)

    def test_first_step_convention(self):
        f = aggregate_features(make_trace([0.8], [25]))
        assert f == AggFeatures(0.8, 1.0, 25, 1)

    def test_constant_sequence(self):
        f = aggregate_features(make_trace([0.5, 0.5], [10, 10]))
        assert f == AggFeatures(0.5, 0.5, 10, 2)

    def test_empty_trace(self):
        with pytest.raises(EmptyTrace):
            aggregate_features(TraceState(query_id="q"))

    @given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=30))
    def test_min_prev_matches_fold(self, scores):
        t = make_trace(scores)
        f = aggregate_features(t)
        expect = 1.0
        for s in scores[:-1]:
            expect = min(expect, s)
        assert f.min_prev_score == expect


class TestCostLedger:
    def test_strong_iff_regen(self):
        with pytest.raises(InvariantViolation):
            CostLedger(strong_tokens=10, weak_tokens=0, regenerate_count=0)
        with pytest.raises(InvariantViolation):
            CostLedger(strong_tokens=0, weak_tokens=0, regenerate_count=2)
        CostLedger(strong_tokens=10, weak_tokens=5, regenerate_count=1)


class TestJsonl:
    def test_round_trip(self, tmp_path):
        traces = [
            make_trace([0.9, 0.2], query_id="a"),
            TraceState(
                query_id="b",
                steps=(
                    StepRecord(0.5, 7, Origin.STRONG, Truth.CORRECT),
                    StepRecord(0.1, 3, Origin.WEAK, Truth.INCORRECT),
                ),
                terminated=True,
            ),
        ]
        path = tmp_path / "traces.jsonl"
        assert write_traces_jsonl(traces, path) == 2
        loaded = replay_load(path)
        assert len(loaded) == 2
        assert [trace_to_dict(t) for t in loaded] == [trace_to_dict(t) for t in traces]

    def test_score_out_of_bounds(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        row = {"query_id": "q", "steps": [{"score": 1.5, "tokens": 3, "origin": "weak"}], "terminated": False}
        path.write_text(json.dumps(row) + "\n")
        with pytest.raises(InvariantViolation) as exc:
            replay_load(path)
        assert exc.value.field == "score"

    def test_truncated_json(self, tmp_path):
        path = tmp_path / "trunc.jsonl"
        good = json.dumps(trace_to_dict(make_trace([0.5])))
        path.write_text(good + "\n" + good[: len(good) // 2] + "\n")
        with pytest.raises(ParseError) as exc:
            replay_load(path)
        assert exc.value.line == 2

    def test_unknown_origin(self):
        with pytest.raises(InvariantViolation):
            trace_from_dict(
                {"query_id": "q", "steps": [{"score": 0.5, "tokens": 3, "origin": "medium"}], "terminated": False}
            )
