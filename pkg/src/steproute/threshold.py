"""Myopic routing baselines.

``ThresholdRouter`` regenerates whenever the current step's score falls
strictly below a threshold ``k``; with ``takeover=True`` the expensive
generator keeps every remaining step after the first escalation (the
full-takeover ablation).  ``BinnedRouter`` is the greedy binned-classifier
baseline: it discretizes the score axis into uniform bins, learns per-bin
outcome-class frequencies from labeled queries, and escalates when the
expected accuracy gain of one intervention outweighs its token cost.
"""

from __future__ import annotations

import json
from enum import IntEnum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import EmptyDataset, InvariantViolation
from .trace import AggFeatures, Origin, RoutingAction, TraceState
from .validation import require_positive_int, require_unit_interval


class OutcomeClass(IntEnum):
    """Query-level outcome classes for the binned baseline."""

    WEAK_SOLVABLE = 0
    UNSOLVABLE = 1
    STRONG_ONLY = 2


class ThresholdRouter(BaseEstimator):
    """Score-threshold policy.

    Parameters
    ----------
    k : float in [0, 1]
        Regenerate iff the current step score is strictly below ``k``.
    takeover : bool
        If True, once any step has been escalated every later step is also
        regenerated (full-takeover variant).
    """

    def __init__(self, k: float = 0.5, takeover: bool = False):
        self.k = k
        self.takeover = takeover

    def decide(self, feats: AggFeatures, escalated_before: bool = False) -> RoutingAction:
        require_unit_interval("k", self.k)
        if self.takeover and escalated_before:
            return RoutingAction.REGENERATE
        if feats.current_score < self.k:
            return RoutingAction.REGENERATE
        return RoutingAction.CONTINUE

    def episode_policy(self) -> Callable[[AggFeatures, TraceState], RoutingAction]:
        """Per-episode callback; escalation state is read off the trace."""

        def _policy(feats: AggFeatures, trace: TraceState) -> RoutingAction:
            return self.decide(feats, escalated_before=trace.has_origin(Origin.STRONG))

        return _policy


def decide_threshold(
    k: float, feats: AggFeatures, escalated_before: bool = False, takeover: bool = False
) -> RoutingAction:
    return ThresholdRouter(k=k, takeover=takeover).decide(feats, escalated_before)


class BinnedClassifier:
    """Per-bin empirical distribution over the three outcome classes.

    Bins uniformly partition [0, 1]; a score of exactly 1.0 falls in the top
    bin.  Bins with no calibration data inherit the global class marginal.
    """

    def __init__(self, n_bins: int, bin_dist: np.ndarray):
        require_positive_int("n_bins", n_bins)
        arr = np.asarray(bin_dist, dtype=float)
        if arr.shape != (n_bins, 3):
            raise InvariantViolation("bin_dist", f"expected shape ({n_bins}, 3), got {arr.shape}")
        if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-9):
            raise InvariantViolation("bin_dist", "rows must be probability triples")
        self.n_bins = int(n_bins)
        self.bin_dist = arr

    def bin_index(self, score: float) -> int:
        require_unit_interval("score", score)
        return min(int(score * self.n_bins), self.n_bins - 1)

    def class_probs(self, score: float) -> np.ndarray:
        return self.bin_dist[self.bin_index(score)]

    def to_dict(self) -> dict:
        return {"n_bins": self.n_bins, "bin_dist": self.bin_dist.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "BinnedClassifier":
        return cls(n_bins=obj["n_bins"], bin_dist=np.asarray(obj["bin_dist"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BinnedClassifier":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_outcome_bins(
    labeled: Sequence[tuple[float, int]], n_bins: int = 10
) -> BinnedClassifier:
    """Fit per-bin outcome-class frequencies from (score, outcome_class)
    pairs; empty bins fall back to the global marginal."""
    require_positive_int("n_bins", n_bins)
    if len(labeled) == 0:
        raise EmptyDataset("no labeled (score, outcome) pairs")
    counts = np.zeros((n_bins, 3), dtype=float)
    marginal = np.zeros(3, dtype=float)
    for score, outcome in labeled:
        require_unit_interval("score", score)
        c = int(outcome)
        if c not in (0, 1, 2):
            raise InvariantViolation("outcome_class", f"expected 0, 1, or 2, got {outcome!r}")
        b = min(int(score * n_bins), n_bins - 1)
        counts[b, c] += 1.0
        marginal[c] += 1.0
    marginal /= marginal.sum()
    dist = np.empty_like(counts)
    for b in range(n_bins):
        total = counts[b].sum()
        dist[b] = counts[b] / total if total > 0 else marginal
    return BinnedClassifier(n_bins=n_bins, bin_dist=dist)


def decide_binned(
    clf: BinnedClassifier, score: float, lam: float, expected_strong_tokens: float
) -> RoutingAction:
    """Greedy one-step rule: escalate iff the probability the query is
    solvable only by the strong model outweighs the escalation cost."""
    p_strong_only = float(clf.class_probs(score)[OutcomeClass.STRONG_ONLY])
    gain = p_strong_only - lam * expected_strong_tokens
    return RoutingAction.REGENERATE if gain > 0 else RoutingAction.CONTINUE


class BinnedRouter(BaseEstimator):
    """Greedy binned-classifier router.

    Parameters
    ----------
    n_bins : int
        Number of uniform score bins.
    lam : float
        Cost-performance trade-off weight.
    expected_strong_tokens : float
        Mean token cost of one regeneration; used by the greedy rule.
    """

    def __init__(self, n_bins: int = 10, lam: float = 0.0, expected_strong_tokens: float = 30.0):
        self.n_bins = n_bins
        self.lam = lam
        self.expected_strong_tokens = expected_strong_tokens

    def fit(self, scores: Sequence[float], outcomes: Sequence[int]) -> "BinnedRouter":
        if len(scores) != len(outcomes):
            raise InvariantViolation("outcomes", "one outcome per score required")
        self.classifier_ = fit_outcome_bins(list(zip(scores, outcomes)), n_bins=self.n_bins)
        return self

    def decide(self, score: float) -> RoutingAction:
        if not hasattr(self, "classifier_"):
            raise NotFittedError("BinnedRouter must be fit before deciding")
        return decide_binned(self.classifier_, score, self.lam, self.expected_strong_tokens)

    def episode_policy(self) -> Callable[[AggFeatures, TraceState], RoutingAction]:
        def _policy(feats: AggFeatures, trace: TraceState) -> RoutingAction:
            return self.decide(feats.current_score)

        return _policy
