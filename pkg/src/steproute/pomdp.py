"""Belief-space router: observation-model fitting, Bayesian filtering over
latent correctness classes, point-based value iteration, and the
trigger-band decision heuristic with a belief-grid lookup cache.

Class indices everywhere: 0 = ON_TRACK, 1 = DERAILED, 2 = SLIPPED (plus an
absorbing terminal class internal to the planner).  Observations are
(min score of earlier steps, current step score) pairs on the unit square;
per-class observation densities are reflected kernel density estimates so no
probability mass leaks across the [0, 1] boundaries.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import (
    DegenerateBelief,
    InsufficientSamples,
    InvariantViolation,
    NoSamples,
    OutOfDomain,
    SteppedTerminal,
)
from .simenv import ALIVE_CLASSES, LatentClass
from .trace import AggFeatures, Origin, RoutingAction, TraceState, Truth
from .validation import require_prob_vector, require_unit_interval

N_ALIVE = 3
_IDX = {cls: i for i, cls in enumerate(ALIVE_CLASSES)}


@dataclass(frozen=True)
class PomdpSpec:
    """Planner parameterization.

    ``expected_strong_tokens`` is the mean regeneration cost in tokens, so
    one regeneration costs ``lam * expected_strong_tokens`` task-reward
    units.  ``termination_prob_per_step`` realizes episode endings as a
    geometric stopping time (default mean horizon 18 steps).
    """

    p_weak: float
    p_strong: float
    lam: float = 0.0
    task_reward: float = 1.0
    expected_strong_tokens: float = 30.0
    max_steps: int = 30
    termination_prob_per_step: float = 1.0 / 18.0

    def __post_init__(self):
        require_unit_interval("p_weak", self.p_weak)
        require_unit_interval("p_strong", self.p_strong)
        require_unit_interval("termination_prob_per_step", self.termination_prob_per_step)
        if self.lam < 0:
            raise InvariantViolation("lam", "must be nonnegative")
        if self.expected_strong_tokens <= 0:
            raise InvariantViolation("expected_strong_tokens", "must be positive")

    @property
    def regen_cost(self) -> float:
        return self.lam * self.expected_strong_tokens


@dataclass(frozen=True)
class Belief:
    """Posterior over the three alive classes after ``step_index`` steps."""

    probs: tuple[float, float, float]
    step_index: int = 0

    def __post_init__(self):
        arr = require_prob_vector("probs", self.probs)
        object.__setattr__(self, "probs", tuple(float(v) for v in arr))
        if self.step_index < 0:
            raise InvariantViolation("step_index", "must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=float)


def transition_dist(
    cls: LatentClass, action: RoutingAction, spec: PomdpSpec
) -> dict[LatentClass, float]:
    """One-decision transition row including the geometric termination mass."""
    if cls is LatentClass.DONE:
        raise SteppedTerminal("no transitions out of the terminal class")
    q = spec.termination_prob_per_step
    alive = 1.0 - q
    row: dict[LatentClass, float] = {LatentClass.DONE: q}
    if action is RoutingAction.REGENERATE and cls is not LatentClass.DERAILED:
        row[LatentClass.ON_TRACK] = alive * spec.p_strong
        row[LatentClass.SLIPPED] = alive * (1.0 - spec.p_strong)
    elif action is RoutingAction.CONTINUE and cls is LatentClass.ON_TRACK:
        row[LatentClass.ON_TRACK] = alive * spec.p_weak
        row[LatentClass.SLIPPED] = alive * (1.0 - spec.p_weak)
    else:
        # Continuing past a slipped step derails; the derailed class absorbs.
        row[LatentClass.DERAILED] = alive
    return row


@lru_cache(maxsize=256)
def _transition_matrices_cached(
    p_weak: float, p_strong: float, q: float
) -> dict[RoutingAction, np.ndarray]:
    spec = PomdpSpec(p_weak=p_weak, p_strong=p_strong, termination_prob_per_step=q)
    mats = {}
    order = list(ALIVE_CLASSES) + [LatentClass.DONE]
    col = {c: i for i, c in enumerate(order)}
    for action in RoutingAction:
        t = np.zeros((4, 4))
        for cls in ALIVE_CLASSES:
            for nxt, p in transition_dist(cls, action, spec).items():
                t[col[cls], col[nxt]] = p
        t[col[LatentClass.DONE], col[LatentClass.DONE]] = 1.0
        t.setflags(write=False)
        mats[action] = t
    return mats


def transition_matrices(spec: PomdpSpec) -> dict[RoutingAction, np.ndarray]:
    """Full 4x4 transition matrices (alive classes + terminal), rows sum to 1."""
    return _transition_matrices_cached(
        spec.p_weak, spec.p_strong, spec.termination_prob_per_step
    )


def alive_transition(spec: PomdpSpec, action: RoutingAction) -> np.ndarray:
    """3x3 alive-to-alive block (unnormalized; termination mass omitted)."""
    return transition_matrices(spec)[action][:N_ALIVE, :N_ALIVE]


# --- Observation models --------------------------------------------------------


class ReflectedKde2D:
    """Product-Gaussian KDE on the unit square with mass mirrored across all
    four edges (and corners), so boundary-adjacent samples keep unit mass
    inside the square."""

    def __init__(self, samples: np.ndarray, bandwidth: float | None = None, floor: float = 0.02):
        pts = np.atleast_2d(np.asarray(samples, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InvariantViolation("samples", "expected an (n, 2) array")
        if np.any(pts < 0) or np.any(pts > 1):
            raise OutOfDomain("samples must lie in the unit square")
        self.samples = pts
        if bandwidth is None:
            n = len(pts)
            sigma = float(np.sqrt(np.var(pts, axis=0).mean()))
            bandwidth = sigma * n ** (-1.0 / 6.0)
        self.bandwidth = max(float(bandwidth), floor)
        self._reflected = self._reflect(pts)

    @staticmethod
    def _reflect(pts: np.ndarray) -> np.ndarray:
        xs = [pts[:, 0], -pts[:, 0], 2.0 - pts[:, 0]]
        ys = [pts[:, 1], -pts[:, 1], 2.0 - pts[:, 1]]
        out = np.empty((9 * len(pts), 2))
        k = 0
        for rx in xs:
            for ry in ys:
                out[k * len(pts) : (k + 1) * len(pts), 0] = rx
                out[k * len(pts) : (k + 1) * len(pts), 1] = ry
                k += 1
        return out

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Density at each query point (vectorized, chunked)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        h = self.bandwidth
        norm = 1.0 / (2.0 * np.pi * h * h * len(self.samples))
        out = np.empty(len(pts))
        chunk = max(1, int(4_000_000 // max(1, len(self._reflected))))
        for start in range(0, len(pts), chunk):
            block = pts[start : start + chunk]
            dx = block[:, 0:1] - self._reflected[None, :, 0]
            dy = block[:, 1:2] - self._reflected[None, :, 1]
            out[start : start + chunk] = norm * np.exp(-(dx * dx + dy * dy) / (2 * h * h)).sum(axis=1)
        return out

    def cell_masses(self, n_grid: int) -> np.ndarray:
        """Exact kernel mass inside each cell of the n x n uniform grid,
        computed with Gaussian CDFs over every reflected copy."""
        edges = np.linspace(0.0, 1.0, n_grid + 1)
        h = self.bandwidth
        r = self._reflected
        phi_x = ndtr((edges[None, :] - r[:, 0:1]) / h)
        phi_y = ndtr((edges[None, :] - r[:, 1:2]) / h)
        dx = np.diff(phi_x, axis=1)
        dy = np.diff(phi_y, axis=1)
        return (dx.T @ dy) / len(self.samples)

    def vertex_grid(self, resolution: int) -> np.ndarray:
        """Density on the (resolution+1)^2 vertex lattice, computed via the
        separable structure of the product kernel (one matmul per axis pair)."""
        xs = np.linspace(0.0, 1.0, resolution + 1)
        h = self.bandwidth
        r = self._reflected
        kx = np.exp(-((xs[None, :] - r[:, 0:1]) ** 2) / (2 * h * h))
        ky = np.exp(-((xs[None, :] - r[:, 1:2]) ** 2) / (2 * h * h))
        return (kx.T @ ky) / (2.0 * np.pi * h * h * len(self.samples))


_CLASS_NAMES = {LatentClass.ON_TRACK: "on_track", LatentClass.DERAILED: "derailed", LatentClass.SLIPPED: "slipped"}
_NAME_CLASSES = {v: k for k, v in _CLASS_NAMES.items()}


class ObservationModel:
    """Per-class reflected-KDE densities over (min prior score, current
    score).  Likelihoods are floored at ``floor`` so the belief filter stays
    defined in the far tails."""

    def __init__(self, kdes: dict[LatentClass, ReflectedKde2D], floor: float = 1e-8):
        missing = [c for c in ALIVE_CLASSES if c not in kdes]
        if missing:
            raise InvariantViolation("kdes", f"missing classes {missing}")
        self.kdes = kdes
        self.floor = float(floor)

    @property
    def bandwidths(self) -> dict[LatentClass, float]:
        return {c: k.bandwidth for c, k in self.kdes.items()}

    @property
    def sample_counts(self) -> dict[LatentClass, int]:
        return {c: len(k.samples) for c, k in self.kdes.items()}

    def _check_obs(self, obs) -> np.ndarray:
        arr = np.asarray(obs, dtype=float)
        if arr.shape != (2,):
            raise OutOfDomain(f"expected an observation pair, got shape {arr.shape}")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise OutOfDomain(f"observation {tuple(arr)} outside the unit square")
        return arr

    def likelihood(self, cls: LatentClass, obs) -> float:
        if cls not in self.kdes:
            raise InvariantViolation("class", f"{cls} has no fitted density")
        arr = self._check_obs(obs)
        return max(float(self.kdes[cls].evaluate(arr[None, :])[0]), self.floor)

    def likelihood_vector(self, obs) -> np.ndarray:
        arr = self._check_obs(obs)
        return np.array(
            [
                max(float(self.kdes[c].evaluate(arr[None, :])[0]), self.floor)
                for c in ALIVE_CLASSES
            ]
        )

    def to_dict(self) -> dict:
        return {
            "floor": self.floor,
            "classes": {
                _CLASS_NAMES[c]: {
                    "samples": self.kdes[c].samples.tolist(),
                    "bandwidth": self.kdes[c].bandwidth,
                }
                for c in ALIVE_CLASSES
            },
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ObservationModel":
        kdes = {}
        for name, payload in obj["classes"].items():
            kdes[_NAME_CLASSES[name]] = ReflectedKde2D(
                np.asarray(payload["samples"]), bandwidth=payload["bandwidth"], floor=0.0
            )
        return cls(kdes, floor=obj.get("floor", 1e-8))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ObservationModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class DiscreteObservationModel:
    """Finite observation set, one probability row per alive class.

    With ``n_grid`` set, observations index the cells of an n x n grid over
    the unit square and continuous (min_prev, current) pairs map to their
    cell, which is how the planner consumes continuous models.  Without a
    grid the observation set is abstract (toy problems) and only integer
    indices are accepted.
    """

    def __init__(self, probs: np.ndarray, n_grid: Optional[int] = None, floor: float = 0.0):
        arr = np.asarray(probs, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != N_ALIVE:
            raise InvariantViolation("probs", "expected one row per alive class")
        if n_grid is not None and arr.shape[1] != n_grid * n_grid:
            raise InvariantViolation("probs", f"expected shape (3, {n_grid * n_grid})")
        if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-9):
            raise InvariantViolation("probs", "rows must be probability vectors")
        self.probs = arr
        self.n_grid = None if n_grid is None else int(n_grid)
        self.floor = float(floor)

    @property
    def n_obs(self) -> int:
        return self.probs.shape[1]

    def cell_of(self, obs) -> int:
        if isinstance(obs, (int, np.integer)):
            if not 0 <= int(obs) < self.n_obs:
                raise OutOfDomain(f"observation index {obs} out of range")
            return int(obs)
        if self.n_grid is None:
            raise OutOfDomain("gridless observation set accepts only integer indices")
        arr = np.asarray(obs, dtype=float)
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise OutOfDomain(f"observation {tuple(arr)} outside the unit square")
        i = min(int(arr[0] * self.n_grid), self.n_grid - 1)
        j = min(int(arr[1] * self.n_grid), self.n_grid - 1)
        return i * self.n_grid + j

    def cell_center(self, index: int) -> tuple[float, float]:
        if self.n_grid is None:
            raise OutOfDomain("gridless observation set has no cell geometry")
        i, j = divmod(int(index), self.n_grid)
        return ((i + 0.5) / self.n_grid, (j + 0.5) / self.n_grid)

    def likelihood(self, cls: LatentClass, obs) -> float:
        return max(float(self.probs[_IDX[cls], self.cell_of(obs)]), self.floor)

    def likelihood_vector(self, obs) -> np.ndarray:
        return np.maximum(self.probs[:, self.cell_of(obs)], self.floor)


class GriddedLikelihood:
    """Bilinear interpolation of the class densities on a fine vertex grid.

    A fast stand-in for exact KDE evaluation inside episode loops; at the
    default resolution (512) the interpolation error is orders of magnitude
    below the Monte-Carlo noise of any sweep, while evaluation drops from
    milliseconds to microseconds.
    """

    def __init__(self, model: ObservationModel, resolution: int = 512):
        self.resolution = int(resolution)
        self.floor = model.floor
        self._grids = np.stack(
            [model.kdes[c].vertex_grid(self.resolution) for c in ALIVE_CLASSES]
        )

    def likelihood_vector(self, obs) -> np.ndarray:
        x, y = float(obs[0]), float(obs[1])
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise OutOfDomain(f"observation {(x, y)} outside the unit square")
        r = self.resolution
        fx, fy = x * r, y * r
        i, j = min(int(fx), r - 1), min(int(fy), r - 1)
        ax, ay = fx - i, fy - j
        g = self._grids
        val = (
            g[:, i, j] * (1 - ax) * (1 - ay)
            + g[:, i + 1, j] * ax * (1 - ay)
            + g[:, i, j + 1] * (1 - ax) * ay
            + g[:, i + 1, j + 1] * ax * ay
        )
        return np.maximum(val, self.floor)

    def likelihood(self, cls: LatentClass, obs) -> float:
        return float(self.likelihood_vector(obs)[_IDX[cls]])


def discretize(model: ObservationModel, n_grid: int = 8) -> DiscreteObservationModel:
    """Integrate each class density over grid cells; rows are renormalized so
    the planner sees an exact finite observation distribution."""
    rows = []
    for c in ALIVE_CLASSES:
        cell = model.kdes[c].cell_masses(n_grid).ravel()
        cell = np.maximum(cell, 0.0)
        rows.append(cell / cell.sum())
    return DiscreteObservationModel(np.vstack(rows), n_grid)


def fit_observation_model(
    labeled: Sequence[tuple[float, float, int | LatentClass | str]],
    bandwidth: float | dict | None = None,
    floor: float = 1e-8,
    bandwidth_floor: float = 0.02,
    min_per_class: int = 10,
) -> ObservationModel:
    """Fit one reflected KDE per class from (min_prev, current, class) rows."""
    buckets: dict[LatentClass, list[tuple[float, float]]] = {c: [] for c in ALIVE_CLASSES}
    for row in labeled:
        mp, cur, raw = row
        if isinstance(raw, LatentClass):
            cls = raw
        elif isinstance(raw, str):
            cls = _NAME_CLASSES[raw]
        else:
            cls = ALIVE_CLASSES[int(raw)]
        require_unit_interval("min_prev", mp)
        require_unit_interval("current", cur)
        buckets[cls].append((float(mp), float(cur)))
    kdes = {}
    for c in ALIVE_CLASSES:
        if len(buckets[c]) < min_per_class:
            raise InsufficientSamples(_CLASS_NAMES[c], len(buckets[c]), min_per_class)
        bw = bandwidth.get(c) if isinstance(bandwidth, dict) else bandwidth
        kdes[c] = ReflectedKde2D(np.asarray(buckets[c]), bandwidth=bw, floor=bandwidth_floor)
    return ObservationModel(kdes, floor=floor)


def observation_likelihood(model, cls: LatentClass, obs) -> float:
    """Density (or cell probability) of ``obs`` under the class density."""
    if cls not in ALIVE_CLASSES:
        raise InvariantViolation("class", f"{cls} is not an alive class")
    return model.likelihood(cls, obs)


# --- Belief filtering -----------------------------------------------------------


def belief_update(
    belief: Belief,
    action: RoutingAction,
    obs,
    spec: PomdpSpec,
    model,
) -> Belief:
    """One Bayes step: propagate through the action's transition, weight by
    the observation likelihood, renormalize over the alive classes
    (conditioning on the episode not having terminated)."""
    b = belief.as_array()
    t_alive = alive_transition(spec, action)
    prior = t_alive.T @ b
    like = model.likelihood_vector(obs)
    post = prior * like
    total = float(post.sum())
    if total < 1e-300:
        raise DegenerateBelief("posterior mass vanished")
    return Belief(tuple(post / total), step_index=belief.step_index + 1)


# --- Point-based value iteration -------------------------------------------------


@dataclass
class AlphaPolicy:
    """Piecewise-linear convex value function: one (vector, action) pair per
    backed-up belief; value(b) = max over vectors of <b, vector>."""

    vectors: np.ndarray  # (K, 3) over alive classes
    actions: tuple[RoutingAction, ...]
    budget_exceeded: bool = False
    value_history: tuple[float, ...] = ()

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        if len(self.vectors) == 0 or self.vectors.shape[1] != N_ALIVE:
            raise InvariantViolation("vectors", "need at least one alpha triple")
        if len(self.actions) != len(self.vectors):
            raise InvariantViolation("actions", "one action per alpha vector")

    def value(self, belief) -> float:
        b = belief.as_array() if isinstance(belief, Belief) else np.asarray(belief, dtype=float)
        return float((self.vectors @ b).max())

    def action(self, belief) -> RoutingAction:
        b = belief.as_array() if isinstance(belief, Belief) else np.asarray(belief, dtype=float)
        scores = self.vectors @ b
        best = scores.max()
        # Deterministic tie-break: prefer CONTINUE among near-best vectors.
        near = np.nonzero(scores >= best - 1e-12)[0]
        for k in near:
            if self.actions[k] is RoutingAction.CONTINUE:
                return RoutingAction.CONTINUE
        return self.actions[int(near[0])]


def _reward_matrix(spec: PomdpSpec) -> np.ndarray:
    """Expected immediate reward R[a, s] over the 4-state space: regeneration
    cost plus the terminal bonus collected when stopping from ON_TRACK."""
    r = np.zeros((2, 4))
    q = spec.termination_prob_per_step
    r[:, 0] += q * spec.task_reward  # terminal entry from ON_TRACK
    r[1, :N_ALIVE] -= spec.regen_cost
    return r


def _solver_tensors(spec: PomdpSpec, disc: DiscreteObservationModel):
    mats = transition_matrices(spec)
    t = np.stack([mats[RoutingAction.CONTINUE], mats[RoutingAction.REGENERATE]])
    n_obs = disc.n_obs
    o = np.empty((4, n_obs))
    o[:N_ALIVE] = disc.probs
    o[N_ALIVE] = 1.0 / n_obs  # terminal observations carry no value
    return t, o


def _belief_successor(
    b: np.ndarray, a: int, o_idx: int, t_alive: np.ndarray, obs_probs: np.ndarray
) -> Optional[np.ndarray]:
    prior = t_alive[a].T @ b
    post = prior * obs_probs[:, o_idx]
    total = post.sum()
    if total <= 1e-300:
        return None
    return post / total


def _expand_beliefs(
    init: np.ndarray,
    t_alive: np.ndarray,
    obs_probs: np.ndarray,
    n_beliefs: int,
    depth_cap: Optional[int],
    rng: np.random.Generator,
) -> np.ndarray:
    """Reachable-belief set: breadth-first while it fits, then stochastic
    farthest-point fill up to ``n_beliefs``."""
    n_obs = obs_probs.shape[1]
    seen: dict[tuple, np.ndarray] = {}

    def key(b):
        return tuple(np.round(b, 10))

    seen[key(init)] = init
    frontier = [init]
    exhaustive_cap = 5000 if depth_cap is not None else n_beliefs
    depth = 0
    # Breadth-first while a full next level fits (always, for finite-horizon
    # toy problems, whose exactness needs every reachable belief).
    while frontier and (depth_cap is None or depth < depth_cap):
        if depth_cap is None and len(seen) + 2 * n_obs * len(frontier) > exhaustive_cap:
            break
        if depth_cap is not None and len(seen) > exhaustive_cap:
            break
        nxt = []
        for b in frontier:
            for a in (0, 1):
                for oi in range(n_obs):
                    child = _belief_successor(b, a, oi, t_alive, obs_probs)
                    if child is None:
                        continue
                    k = key(child)
                    if k not in seen:
                        seen[k] = child
                        nxt.append(child)
        frontier = nxt
        depth += 1
    points = list(seen.values())
    if depth_cap is None:
        # Seed the corners so the alpha set generalizes across the simplex.
        for corner in np.eye(N_ALIVE):
            k = key(corner)
            if k not in seen and len(points) < n_beliefs:
                seen[k] = corner
                points.append(corner)
        tries = 0
        while len(points) < n_beliefs and tries < 40 * n_beliefs:
            tries += 1
            b = points[rng.integers(len(points))]
            a = int(rng.integers(2))
            p_o = obs_probs.T @ (t_alive[a].T @ b)
            total = p_o.sum()
            if total <= 0:
                continue
            oi = int(rng.choice(len(p_o), p=p_o / total))
            child = _belief_successor(b, a, oi, t_alive, obs_probs)
            if child is None:
                continue
            k = key(child)
            if k not in seen:
                seen[k] = child
                points.append(child)
    return np.vstack(points)


def solve(
    spec: PomdpSpec,
    model,
    init_belief: Belief | Sequence[float] | None = None,
    horizon: Optional[int] = None,
    obs_grid: int = 8,
    n_beliefs: int = 64,
    max_iterations: int = 300,
    tol: float = 1e-5,
    time_cap_s: Optional[float] = None,
    seed: int = 0,
) -> AlphaPolicy:
    """Point-based value iteration over beliefs reachable from
    ``init_belief``.

    With ``horizon`` set, runs exactly that many exact backups from a zero
    value function (finite-horizon semantics used by the oracle tests).
    Otherwise iterates to convergence under the geometric-termination
    contraction, flagging ``budget_exceeded`` if the iteration or time cap
    lands first.  Backups use the standard alpha-projection form, so belief
    normalization never enters the value computation.
    """
    if isinstance(model, ObservationModel):
        disc = discretize(model, obs_grid)
    elif isinstance(model, DiscreteObservationModel):
        disc = model
    else:
        raise InvariantViolation("model", f"cannot solve against {type(model).__name__}")

    if init_belief is None:
        b0 = np.array([1.0, 0.0, 0.0])
    elif isinstance(init_belief, Belief):
        b0 = init_belief.as_array()
    else:
        b0 = require_prob_vector("init_belief", init_belief)

    t, o = _solver_tensors(spec, disc)
    t_alive = t[:, :N_ALIVE, :N_ALIVE]
    obs_alive = disc.probs
    r = _reward_matrix(spec)
    n_obs = disc.n_obs
    rng = np.random.default_rng(seed)

    beliefs = _expand_beliefs(
        b0, t_alive, obs_alive, n_beliefs, None if horizon is None else horizon - 1, rng
    )
    nb = len(beliefs)
    b4 = np.zeros((nb, 4))
    b4[:, :N_ALIVE] = beliefs

    # Projection operators: M[a, o](s, s') = T[a](s, s') * O(o | s').
    m = np.empty((2 * n_obs, 4, 4))
    for a in (0, 1):
        for oi in range(n_obs):
            m[a * n_obs + oi] = t[a] * o[None, :, oi]

    alphas = np.zeros((1, 4))
    actions: list[RoutingAction] = [RoutingAction.CONTINUE]
    history: list[float] = []
    start = time.monotonic()
    budget_exceeded = False
    n_iter = horizon if horizon is not None else max_iterations
    prev_values = None
    ao_range = np.arange(2 * n_obs)

    for _ in range(n_iter):
        # Gamma[ao][k](s) = sum_{s'} M[ao](s, s') * alpha_k(s').
        g = np.matmul(alphas[None, :, :], m.transpose(0, 2, 1))  # (2*n_obs, K, 4)
        scores = np.matmul(g, b4.T)  # (2*n_obs, K, nb)
        best_k = scores.argmax(axis=1)  # (2*n_obs, nb)
        picked = g[ao_range[:, None], best_k]  # (2*n_obs, nb, 4)
        per_action = picked.reshape(2, n_obs, nb, 4).sum(axis=1) + r[:, None, :]
        values = (per_action * b4[None, :, :]).sum(axis=2)  # (2, nb)
        act_idx = values.argmax(axis=0)  # argmax picks CONTINUE (index 0) on ties
        alphas = per_action[act_idx, np.arange(nb)]
        actions = [RoutingAction.CONTINUE if a == 0 else RoutingAction.REGENERATE for a in act_idx]
        new_values = values[act_idx, np.arange(nb)]
        history.append(float((alphas @ b4[0]).max()))

        if horizon is None:
            if prev_values is not None and np.max(np.abs(new_values - prev_values)) < tol:
                break
            prev_values = new_values
            if time_cap_s is not None and time.monotonic() - start > time_cap_s:
                budget_exceeded = True
                break
    else:
        if horizon is None:
            budget_exceeded = True

    return AlphaPolicy(
        vectors=alphas[:, :N_ALIVE],
        actions=tuple(actions),
        budget_exceeded=budget_exceeded,
        value_history=tuple(history),
    )


# --- Decision heuristic and lookup cache ------------------------------------------


DEFAULT_TRIGGER_BAND = (0.35, 0.40)


def slip_ratio(belief: Belief) -> float:
    """Mass on the recoverable-slip class relative to the largest class."""
    b = belief.as_array()
    return float(b[2] / b.max())


def decide_pomdp(
    belief: Belief,
    spec: PomdpSpec,
    model,
    cache: "LookupTable | LazySolveCache | None" = None,
    band: tuple[float, float] = DEFAULT_TRIGGER_BAND,
    **solver_kwargs,
) -> RoutingAction:
    """Trigger-band heuristic: when the slip-to-max belief ratio falls inside
    ``band``, act on a policy solved from the current belief (via the lookup
    cache when provided, else a fresh solve); otherwise default to CONTINUE.
    """
    ratio = slip_ratio(belief)
    if not band[0] <= ratio <= band[1]:
        return RoutingAction.CONTINUE
    if cache is not None:
        return cache.action(belief)
    policy = solve(spec, model, init_belief=belief, **solver_kwargs)
    return policy.action(belief)


def _lattice_points(resolution: int):
    for i in range(resolution + 1):
        for j in range(resolution + 1 - i):
            yield (i, j, resolution - i - j)


def nearest_lattice(probs: np.ndarray, resolution: int) -> tuple[int, int, int]:
    """Closest simplex lattice coordinate to a probability triple."""
    scaled = np.asarray(probs, dtype=float) * resolution
    base = np.floor(scaled).astype(int)
    short = resolution - int(base.sum())
    if short > 0:
        order = np.argsort(-(scaled - base))
        for k in range(short):
            base[order[k % 3]] += 1
    return tuple(int(v) for v in base)


@dataclass
class LookupTable:
    """Precomputed simplex-grid map from belief to action."""

    resolution: int
    actions: dict[tuple[int, int, int], RoutingAction]
    failed_cells: tuple[tuple[int, int, int], ...] = ()

    def action(self, belief: Belief | Sequence[float]) -> RoutingAction:
        b = belief.as_array() if isinstance(belief, Belief) else np.asarray(belief, dtype=float)
        return self.actions[nearest_lattice(b, self.resolution)]

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "actions": {",".join(map(str, k)): v.value for k, v in self.actions.items()},
            "failed_cells": [list(c) for c in self.failed_cells],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "LookupTable":
        actions = {
            tuple(int(p) for p in key.split(",")): RoutingAction(val)
            for key, val in obj["actions"].items()
        }
        return cls(
            resolution=int(obj["resolution"]),
            actions=actions,
            failed_cells=tuple(tuple(c) for c in obj.get("failed_cells", [])),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LookupTable":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def precompute_lookup(
    spec: PomdpSpec, model, grid_resolution: int, **solver_kwargs
) -> LookupTable:
    """Solve from every simplex lattice belief and record the action.  Cells
    whose solve hits the budget cap fall back to CONTINUE and are recorded.
    """
    if grid_resolution < 2:
        raise InvariantViolation("grid_resolution", "must be at least 2")
    disc = discretize(model, solver_kwargs.pop("obs_grid", 8)) if isinstance(model, ObservationModel) else model
    actions: dict[tuple[int, int, int], RoutingAction] = {}
    failed: list[tuple[int, int, int]] = []
    r = grid_resolution
    for coords in _lattice_points(r):
        b = np.array(coords, dtype=float) / r
        policy = solve(spec, disc, init_belief=b, **solver_kwargs)
        if policy.budget_exceeded:
            failed.append(coords)
            actions[coords] = RoutingAction.CONTINUE
        else:
            actions[coords] = policy.action(b)
    return LookupTable(resolution=r, actions=actions, failed_cells=tuple(failed))


class LazySolveCache:
    """Lookup-table semantics with on-demand solving: beliefs snap to the
    nearest lattice point; each lattice point is solved once and memoized."""

    def __init__(self, spec: PomdpSpec, disc: DiscreteObservationModel, resolution: int = 40, **solver_kwargs):
        self.spec = spec
        self.disc = disc
        self.resolution = resolution
        self.solver_kwargs = solver_kwargs
        self._cache: dict[tuple[int, int, int], RoutingAction] = {}

    def action(self, belief: Belief | Sequence[float]) -> RoutingAction:
        b = belief.as_array() if isinstance(belief, Belief) else np.asarray(belief, dtype=float)
        key = nearest_lattice(b, self.resolution)
        hit = self._cache.get(key)
        if hit is None:
            lattice_b = np.array(key, dtype=float) / self.resolution
            policy = solve(self.spec, self.disc, init_belief=lattice_b, **self.solver_kwargs)
            hit = RoutingAction.CONTINUE if policy.budget_exceeded else policy.action(lattice_b)
            self._cache[key] = hit
        return hit


# --- Accuracy estimation and corpus labeling ---------------------------------------


def estimate_accuracies(traces: Sequence[TraceState]) -> tuple[float, float]:
    """Empirical step-level accuracy per generator origin over labeled traces."""
    counts = {Origin.WEAK: [0, 0], Origin.STRONG: [0, 0]}
    for trace in traces:
        for step in trace.steps:
            if step.truth is None:
                continue
            bucket = counts[step.origin]
            bucket[1] += 1
            if step.truth is Truth.CORRECT:
                bucket[0] += 1
    if counts[Origin.WEAK][1] == 0:
        raise NoSamples("weak")
    if counts[Origin.STRONG][1] == 0:
        raise NoSamples("strong")
    return (
        counts[Origin.WEAK][0] / counts[Origin.WEAK][1],
        counts[Origin.STRONG][0] / counts[Origin.STRONG][1],
    )


def latent_classes_from_truth(trace: TraceState) -> list[LatentClass]:
    """Reconstruct the latent class after each step from per-step truth
    labels under the irrecoverability reading: a correct step lands
    ON_TRACK; an incorrect step lands SLIPPED if the trace was still
    recoverable (and, for a regeneration, if the prefix was), else DERAILED.
    """
    out: list[LatentClass] = []
    cls = LatentClass.ON_TRACK
    for step in trace.steps:
        if step.truth is None:
            raise InvariantViolation("truth", "trace lacks step truth labels")
        if step.truth is Truth.CORRECT:
            cls = LatentClass.ON_TRACK
        elif cls is LatentClass.DERAILED:
            cls = LatentClass.DERAILED
        elif step.origin is Origin.STRONG:
            cls = LatentClass.SLIPPED  # failed regeneration keeps the prefix intact
        else:
            cls = LatentClass.SLIPPED if cls is LatentClass.ON_TRACK else LatentClass.DERAILED
        out.append(cls)
    return out


def labeled_rows_from_traces(
    traces: Sequence[TraceState],
) -> list[tuple[float, float, LatentClass]]:
    """(min_prev, current, class) rows for observation-model fitting."""
    rows = []
    for trace in traces:
        classes = latent_classes_from_truth(trace)
        min_prev = 1.0
        for step, cls in zip(trace.steps, classes):
            rows.append((min_prev, step.score, cls))
            min_prev = min(min_prev, step.score)
    return rows


def filter_trace(
    trace: TraceState,
    spec: PomdpSpec,
    model,
    initial: Belief | None = None,
) -> Belief:
    """Replay a completed trace through the belief filter: each accepted step
    is absorbed under the action that produced it (weak origin = CONTINUE,
    strong origin = REGENERATE) with its (min_prev, current) observation."""
    belief = initial or Belief((1.0, 0.0, 0.0), step_index=0)
    min_prev = 1.0
    for step in trace.steps:
        action = RoutingAction.REGENERATE if step.origin is Origin.STRONG else RoutingAction.CONTINUE
        belief = belief_update(belief, action, (min_prev, step.score), spec, model)
        min_prev = min(min_prev, step.score)
    return belief


# --- Router estimator ----------------------------------------------------------------


class PomdpRouter(BaseEstimator):
    """Belief-filtering router with the trigger-band planning heuristic.

    ``fit(X, y)`` learns the observation model from labeled observation
    pairs (rows of (min_prev, current)) and class labels.  Episode callbacks
    maintain the belief recursively, correcting it whenever a regenerated
    step replaced the proposal the filter had already absorbed.
    """

    def __init__(
        self,
        p_weak: float = 0.6,
        p_strong: float = 0.95,
        lam: float = 3e-4,
        task_reward: float = 1.0,
        expected_strong_tokens: float = 30.0,
        termination_prob: float = 1.0 / 18.0,
        max_steps: int = 30,
        band: tuple[float, float] = DEFAULT_TRIGGER_BAND,
        obs_grid: int = 8,
        lookup_resolution: int = 40,
        n_beliefs: int = 64,
        max_iterations: int = 300,
        min_per_class: int = 10,
        bandwidth: float | None = None,
        likelihood_grid: int = 512,
    ):
        self.p_weak = p_weak
        self.p_strong = p_strong
        self.lam = lam
        self.task_reward = task_reward
        self.expected_strong_tokens = expected_strong_tokens
        self.termination_prob = termination_prob
        self.max_steps = max_steps
        self.band = band
        self.obs_grid = obs_grid
        self.lookup_resolution = lookup_resolution
        self.n_beliefs = n_beliefs
        self.max_iterations = max_iterations
        self.min_per_class = min_per_class
        self.bandwidth = bandwidth
        self.likelihood_grid = likelihood_grid

    def spec(self) -> PomdpSpec:
        return PomdpSpec(
            p_weak=self.p_weak,
            p_strong=self.p_strong,
            lam=self.lam,
            task_reward=self.task_reward,
            expected_strong_tokens=self.expected_strong_tokens,
            max_steps=self.max_steps,
            termination_prob_per_step=self.termination_prob,
        )

    def fit(self, X, y) -> "PomdpRouter":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        rows = [(float(mp), float(cur), label) for (mp, cur), label in zip(X, y)]
        model = fit_observation_model(
            rows, bandwidth=self.bandwidth, min_per_class=self.min_per_class
        )
        return self.set_observation_model(model)

    def set_observation_model(self, model: ObservationModel) -> "PomdpRouter":
        self.model_ = model
        self.disc_ = discretize(model, self.obs_grid)
        self.filter_model_ = (
            GriddedLikelihood(model, self.likelihood_grid) if self.likelihood_grid else model
        )
        self.cache_ = LazySolveCache(
            self.spec(),
            self.disc_,
            resolution=self.lookup_resolution,
            n_beliefs=self.n_beliefs,
            max_iterations=self.max_iterations,
        )
        return self

    def _require_model(self) -> ObservationModel:
        if not hasattr(self, "model_"):
            raise NotFittedError("PomdpRouter has no observation model; call fit first")
        return self.model_

    def decide(self, belief: Belief) -> RoutingAction:
        self._require_model()
        return decide_pomdp(belief, self.spec(), self.disc_, cache=self.cache_, band=self.band)

    def episode_policy(self) -> Callable[[AggFeatures, TraceState], RoutingAction]:
        self._require_model()
        return _EpisodeFilter(self)


class _EpisodeFilter:
    """Stateful per-episode callback: recursive belief filtering with
    regeneration reconciliation.

    The filter absorbs each accepted step exactly once.  A CONTINUE decision
    caches the already-computed proposal posterior; when a step was
    regenerated, the accepted strong step's observation is re-filtered from
    the pre-proposal belief under the REGENERATE transition, discarding the
    rejected proposal's evidence.
    """

    def __init__(self, router: PomdpRouter):
        self.router = router
        self.spec = router.spec()
        self.model = getattr(router, "filter_model_", None) or router.model_
        self.belief = Belief((1.0, 0.0, 0.0), step_index=0)
        self.n_seen = 0
        self.min_seen = 1.0
        self._pending: Optional[tuple[int, Belief, float]] = None

    def _absorb(self, step, obs) -> None:
        action = RoutingAction.REGENERATE if step.origin is Origin.STRONG else RoutingAction.CONTINUE
        self.belief = belief_update(self.belief, action, obs, self.spec, self.model)

    def __call__(self, feats: AggFeatures, trace: TraceState) -> RoutingAction:
        accepted = trace.steps[:-1]
        while self.n_seen < len(accepted):
            step = accepted[self.n_seen]
            if (
                self._pending is not None
                and self._pending[0] == self.n_seen
                and step.origin is Origin.WEAK
                and step.score == self._pending[2]
            ):
                self.belief = self._pending[1]
            else:
                self._absorb(step, (self.min_seen, step.score))
            self._pending = None
            self.min_seen = min(self.min_seen, step.score)
            self.n_seen += 1

        proposal_belief = belief_update(
            self.belief, RoutingAction.CONTINUE, feats.observation(), self.spec, self.model
        )
        action = self.router.decide(proposal_belief)
        if action is RoutingAction.CONTINUE:
            self._pending = (self.n_seen, proposal_belief, feats.current_score)
        else:
            self._pending = None
        return action
