"""Cost-performance evaluation: PGR, CPT, incremental benefit per cost,
budgeted accuracy, and min-score ranking AUC.

Conventions shared by every curve metric:

- curves are pruned to the upper-left staircase (a point survives only if no
  other point has lower-or-equal cost and higher-or-equal accuracy, one
  strictly) because cost-to-reach metrics quantify over the policy family;
- interpolation between adjacent surviving points is linear in
  (cost, accuracy) space;
- gap-relative metrics (incremental benefit, budgeted accuracy) additionally
  anchor the curve at (cost 0, weak accuracy), so a curve consisting of the
  strong-only operating point scores a relative gain of exactly zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    DegenerateGap,
    EmptyCurve,
    InvariantViolation,
    SingleClass,
    Unreachable,
)
from .trace import TraceState, Truth


@dataclass(frozen=True)
class SweepPoint:
    """One policy evaluation: control knob value, costs, and accuracy."""

    control: float
    mean_strong_tokens: float
    normalized_cost: float
    accuracy: float
    n_queries: int

    def __post_init__(self):
        if self.mean_strong_tokens < 0:
            raise InvariantViolation("mean_strong_tokens", "negative cost")
        if self.normalized_cost < 0:
            raise InvariantViolation("normalized_cost", "negative cost")
        if not 0.0 <= self.accuracy <= 1.0:
            raise InvariantViolation("accuracy", f"{self.accuracy} outside [0, 1]")
        if self.n_queries < 1:
            raise InvariantViolation("n_queries", "need at least one query")


@dataclass(frozen=True)
class TradeoffCurve:
    """Sweep result plus the weak/strong endpoint statistics it is judged
    against.  Points are sorted by mean strong tokens and deduplicated
    (equal-cost points keep the best accuracy)."""

    points: tuple[SweepPoint, ...]
    r_weak: float
    r_strong: float
    mean_strong_only_tokens: float

    def __post_init__(self):
        pts = sorted(self.points, key=lambda p: (p.mean_strong_tokens, -p.accuracy))
        dedup: list[SweepPoint] = []
        for p in pts:
            if dedup and dedup[-1].mean_strong_tokens == p.mean_strong_tokens:
                continue
            dedup.append(p)
        object.__setattr__(self, "points", tuple(dedup))
        for name in ("r_weak", "r_strong"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvariantViolation(name, f"{v} outside [0, 1]")

    def pruned(self) -> tuple[SweepPoint, ...]:
        """Upper-left staircase: strictly increasing accuracy with cost."""
        out: list[SweepPoint] = []
        for p in self.points:
            if out and p.accuracy <= out[-1].accuracy:
                continue
            out.append(p)
        return tuple(out)


def pgr(r_pi: float, r_weak: float, r_strong: float) -> float:
    """Fraction of the weak-to-strong accuracy gap recovered.

    May be negative (below the weak endpoint) or exceed 1 (above the strong
    endpoint)."""
    if r_strong == r_weak:
        raise DegenerateGap("weak and strong accuracies coincide")
    return (r_pi - r_weak) / (r_strong - r_weak)


def _interp_cost_at_accuracy(
    pts: Sequence[tuple[float, float]], target_accuracy: float
) -> Optional[float]:
    """Minimum interpolated cost reaching ``target_accuracy`` on a staircase
    of (cost, accuracy) points sorted by cost with increasing accuracy.
    Returns None when the target exceeds the final accuracy."""
    for i, (cost, acc) in enumerate(pts):
        if acc >= target_accuracy:
            if i == 0:
                return cost
            c0, a0 = pts[i - 1]
            if acc == a0:
                return cost
            frac = (target_accuracy - a0) / (acc - a0)
            return c0 + frac * (cost - c0)
    return None


def _interp_accuracy_at_cost(pts: Sequence[tuple[float, float]], budget: float) -> float:
    """Max interpolated accuracy at cost <= budget on a sorted staircase."""
    if budget >= pts[-1][0]:
        return pts[-1][1]
    best = None
    for i, (cost, acc) in enumerate(pts):
        if cost <= budget:
            best = (i, cost, acc)
        else:
            break
    if best is None:
        # Budget below the first point: nothing affordable.
        return pts[0][1] if pts[0][0] <= budget else 0.0
    i, c0, a0 = best
    c1, a1 = pts[i + 1]
    if c1 == c0:
        return max(a0, a1)
    frac = (budget - c0) / (c1 - c0)
    return a0 + frac * (a1 - a0)


def cpt(curve: TradeoffCurve, x: float) -> tuple[float, float]:
    """Minimum token cost at which the curve's interpolated PGR reaches ``x``
    (a fraction in (0, 1]).  Returns (mean strong tokens, normalized cost).

    Targets at or below the cheapest point's PGR clamp to that point's cost.
    """
    pruned = curve.pruned()
    if not pruned:
        raise EmptyCurve("no sweep points")
    if curve.r_strong == curve.r_weak:
        raise DegenerateGap("weak and strong accuracies coincide")
    target_acc = curve.r_weak + x * (curve.r_strong - curve.r_weak)
    abs_pts = [(p.mean_strong_tokens, p.accuracy) for p in pruned]
    norm_pts = [(p.normalized_cost, p.accuracy) for p in pruned]
    cost_abs = _interp_cost_at_accuracy(abs_pts, target_acc)
    if cost_abs is None:
        max_pgr = pgr(pruned[-1].accuracy, curve.r_weak, curve.r_strong)
        raise Unreachable(x, max_pgr)
    cost_norm = _interp_cost_at_accuracy(norm_pts, target_acc)
    return cost_abs, float(cost_norm)


def _anchored(pts: Sequence[tuple[float, float]], r_weak: float) -> list[tuple[float, float]]:
    """Prepend the free weak-only operating point, then re-prune."""
    merged = [(0.0, r_weak)] + [p for p in pts if p[0] > 0.0 or p[1] > r_weak]
    merged.sort(key=lambda t: (t[0], -t[1]))
    out: list[tuple[float, float]] = []
    for cost, acc in merged:
        if out and acc <= out[-1][1]:
            continue
        out.append((cost, acc))
    return out


def ibc_delta(
    curve: TradeoffCurve,
    n_regions: int = 100,
    regions: str = "accuracy",
) -> tuple[float, int]:
    """Mean relative gain in incremental benefit per cost over always running
    the strong model, averaged across performance regions.

    The gap between weak and strong accuracy is split into ``n_regions``
    equal regions; each region is represented by its midpoint target.  For a
    target ``r*`` reachable by the (anchored, pruned) curve at interpolated
    cost ``C(r*)``, the region's relative gain is
    ``((r* - r_weak)/C(r*)) / ibc_base - 1`` with
    ``ibc_base = (r_strong - r_weak)/mean_strong_only_tokens``.  With
    ``regions="cost"`` the cost axis is partitioned instead.

    Returns (mean gain over reachable regions, number of unreachable
    regions).
    """
    if not curve.points:
        raise EmptyCurve("no sweep points")
    if curve.r_strong <= curve.r_weak:
        raise DegenerateGap("strong endpoint does not exceed weak endpoint")
    if curve.mean_strong_only_tokens <= 0:
        raise InvariantViolation("mean_strong_only_tokens", "must be positive")
    if regions not in ("accuracy", "cost"):
        raise InvariantViolation("regions", f"unknown partition {regions!r}")

    base = (curve.r_strong - curve.r_weak) / curve.mean_strong_only_tokens
    pts = _anchored(
        [(p.mean_strong_tokens, p.accuracy) for p in curve.pruned()], curve.r_weak
    )
    deltas: list[float] = []
    unreachable = 0
    if regions == "accuracy":
        gap = curve.r_strong - curve.r_weak
        for i in range(n_regions):
            r_target = curve.r_weak + (i + 0.5) / n_regions * gap
            cost = _interp_cost_at_accuracy(pts, r_target)
            if cost is None:
                unreachable += 1
                continue
            if cost <= 0:
                # Free accuracy above the weak endpoint: infinite gain;
                # treat as unreachable-for-averaging rather than poison the mean.
                unreachable += 1
                continue
            ibc = (r_target - curve.r_weak) / cost
            deltas.append((ibc - base) / base)
    else:
        max_cost = pts[-1][0]
        if max_cost <= 0:
            raise EmptyCurve("curve never spends strong tokens")
        for i in range(n_regions):
            c_target = (i + 0.5) / n_regions * max_cost
            if c_target <= 0:
                unreachable += 1
                continue
            acc = _interp_accuracy_at_cost(pts, c_target)
            ibc = (acc - curve.r_weak) / c_target
            deltas.append((ibc - base) / base)
    if not deltas:
        raise Unreachable(float("nan"), curve.r_weak)
    return float(np.mean(deltas)), unreachable


def budgeted_accuracy(curve: TradeoffCurve, budget_norm: float) -> tuple[float, float]:
    """Best interpolated accuracy with normalized strong-token spend at most
    ``budget_norm``, with the paired PGR."""
    if not curve.points:
        raise EmptyCurve("no sweep points")
    if budget_norm < 0:
        raise InvariantViolation("budget_norm", "budget must be nonnegative")
    pts = _anchored([(p.normalized_cost, p.accuracy) for p in curve.pruned()], curve.r_weak)
    acc = _interp_accuracy_at_cost(pts, budget_norm)
    if curve.r_strong == curve.r_weak:
        return acc, float("nan")
    return acc, pgr(acc, curve.r_weak, curve.r_strong)


def min_score_auc(
    traces: Sequence[TraceState], labels: Optional[Sequence[bool]] = None
) -> float:
    """AUC-ROC of the min-over-steps score as a ranking statistic for final
    trace correctness; tied scores count half.

    Labels default to the truth tag of each trace's final step.
    """
    if labels is None:
        labels = []
        for t in traces:
            if not t.steps or t.steps[-1].truth is None:
                raise InvariantViolation("truth", "traces lack final-step truth labels")
            labels.append(t.steps[-1].truth is Truth.CORRECT)
    if len(labels) != len(traces):
        raise InvariantViolation("labels", "one label per trace required")
    scores = np.array([t.min_score() for t in traces], dtype=float)
    y = np.array([bool(v) for v in labels], dtype=bool)
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("need at least one correct and one incorrect trace")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=float)
    sorted_scores = scores[order]
    i = 0
    rank = 1
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        mid = (rank + rank + (j - i)) / 2.0
        ranks[order[i : j + 1]] = mid
        rank += j - i + 1
        i = j + 1
    pos_rank_sum = float(ranks[y].sum())
    u = pos_rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


# --- Curve CSV interchange ----------------------------------------------------

CURVE_COLUMNS = ["control", "mean_strong_tokens", "normalized_cost", "accuracy", "n_queries"]


def write_curve_csv(points: Iterable[SweepPoint], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for p in points:
            writer.writerow(
                [
                    repr(float(p.control)),
                    repr(float(p.mean_strong_tokens)),
                    repr(float(p.normalized_cost)),
                    repr(float(p.accuracy)),
                    p.n_queries,
                ]
            )


def read_curve_csv(path: str | Path) -> list[SweepPoint]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CURVE_COLUMNS:
            raise InvariantViolation("header", f"expected {CURVE_COLUMNS}, got {header}")
        points = []
        for row in reader:
            if not row:
                continue
            points.append(
                SweepPoint(
                    control=float(row[0]),
                    mean_strong_tokens=float(row[1]),
                    normalized_cost=float(row[2]),
                    accuracy=float(row[3]),
                    n_queries=int(row[4]),
                )
            )
    return points


def metric_report(
    curve: TradeoffCurve,
    cpt_levels: Sequence[int] = (50, 80, 95),
    budget_levels: Sequence[int] = (10, 15, 20, 25, 30),
) -> dict:
    """Assemble the standard JSON metric report for one curve."""
    report: dict = {
        "pgr_endpoints": {"r_weak": curve.r_weak, "r_strong": curve.r_strong},
        "mean_strong_only_tokens": curve.mean_strong_only_tokens,
        "cpt": {},
        "budgeted": {},
    }
    for level in cpt_levels:
        try:
            cost_abs, cost_norm = cpt(curve, level / 100.0)
            report["cpt"][str(level)] = {"tokens": cost_abs, "normalized": cost_norm}
        except (Unreachable, DegenerateGap, EmptyCurve):
            report["cpt"][str(level)] = None
    try:
        delta, skipped = ibc_delta(curve)
        report["ibc_delta"] = delta
        report["ibc_unreachable_regions"] = skipped
    except (DegenerateGap, EmptyCurve, Unreachable, InvariantViolation):
        report["ibc_delta"] = None
        report["ibc_unreachable_regions"] = None
    for level in budget_levels:
        try:
            acc, level_pgr = budgeted_accuracy(curve, level / 100.0)
            report["budgeted"][str(level)] = {"accuracy": acc, "pgr": level_pgr}
        except (EmptyCurve, InvariantViolation):
            report["budgeted"][str(level)] = None
    return report
