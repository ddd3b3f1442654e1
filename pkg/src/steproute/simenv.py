"""Ground-truth simulator of the step-routing decision process.

The latent state of a partial trace is one of three correctness classes
(indices fixed everywhere a belief triple appears):

- 0 ``ON_TRACK``: every accepted step so far is correct
- 1 ``DERAILED``: an earlier step was wrong; the trace is unrecoverable
- 2 ``SLIPPED``: the latest step is wrong but the prefix is correct, so a
  regeneration can still recover

plus an absorbing ``DONE`` class once the episode ends.  The cheap generator
extends a correct trace correctly with probability ``p_weak``; a regeneration
lands correct with probability ``p_strong`` regardless of whether the latest
step had slipped.  A slipped step that is accepted derails the trace for good.

Scores are noisy class-conditional emissions: steps that land ``ON_TRACK``
draw from ``correct_dist``, all others from ``incorrect_dist``, optionally
corrupted by a configurable noise mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .distributions import Beta, DistSpec, UniformInt, parse_dist
from .errors import ConfigError, InvariantViolation, PolicyFailure, SteppedTerminal
from .seeding import substream
from .trace import (
    DEFAULT_MAX_STEPS,
    AggFeatures,
    CostLedger,
    Origin,
    RoutingAction,
    StepRecord,
    TraceState,
    Truth,
    aggregate_features,
)
from .validation import require_unit_interval


class LatentClass(Enum):
    """Hidden correctness class of the current trace."""

    ON_TRACK = 0
    DERAILED = 1
    SLIPPED = 2
    DONE = 3


#: Non-terminal classes in belief-vector index order.
ALIVE_CLASSES = (LatentClass.ON_TRACK, LatentClass.DERAILED, LatentClass.SLIPPED)


@dataclass(frozen=True)
class ScoreEmission:
    """Class-conditional score distributions on [0, 1]."""

    correct_dist: DistSpec
    incorrect_dist: DistSpec


@dataclass(frozen=True)
class NoiseSpec:
    """Optional corruption of emitted scores; results are clamped to [0, 1].

    ``extra_variance`` adds a zero-mean Gaussian of the given scale;
    ``miscalibration`` applies a constant shift.
    """

    mode: str = "none"
    scale: float = 0.0
    shift: float = 0.0

    def __post_init__(self):
        if self.mode not in ("none", "extra_variance", "miscalibration"):
            raise ConfigError("noise.mode", f"unknown mode {self.mode!r}")

    def apply(self, score: float, gauss: float) -> float:
        if self.mode == "extra_variance":
            score = score + self.scale * gauss
        elif self.mode == "miscalibration":
            score = score + self.shift
        return min(1.0, max(0.0, score))


@dataclass(frozen=True)
class EnvConfig:
    """Full simulator parameterization.

    ``p_strong >= p_weak`` is deliberately not required; the engine must
    behave sensibly when the expensive generator is the worse one.
    """

    p_weak: float
    p_strong: float
    horizon_dist: DistSpec = field(default_factory=lambda: UniformInt(6, 30))
    weak_token_dist: DistSpec = field(default_factory=lambda: UniformInt(10, 40))
    strong_token_dist: DistSpec = field(default_factory=lambda: UniformInt(15, 60))
    score_emission: ScoreEmission = field(
        default_factory=lambda: ScoreEmission(Beta(8, 2), Beta(2, 5))
    )
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    max_steps: int = DEFAULT_MAX_STEPS

    def __post_init__(self):
        require_unit_interval("p_weak", self.p_weak)
        require_unit_interval("p_strong", self.p_strong)
        if self.max_steps < 1:
            raise InvariantViolation("max_steps", "must be at least 1")

    @classmethod
    def from_dict(cls, obj: dict, path: str = "env") -> "EnvConfig":
        if not isinstance(obj, dict):
            raise ConfigError(path, "expected an object")
        for key in ("p_weak", "p_strong"):
            if key not in obj:
                raise ConfigError(f"{path}.{key}", "missing required field")
        kwargs: dict = {"p_weak": obj["p_weak"], "p_strong": obj["p_strong"]}
        if "horizon" in obj:
            kwargs["horizon_dist"] = parse_dist(obj["horizon"], f"{path}.horizon")
        if "weak_tokens" in obj:
            kwargs["weak_token_dist"] = parse_dist(obj["weak_tokens"], f"{path}.weak_tokens")
        if "strong_tokens" in obj:
            kwargs["strong_token_dist"] = parse_dist(obj["strong_tokens"], f"{path}.strong_tokens")
        if "emission" in obj:
            em = obj["emission"]
            if not isinstance(em, dict) or "correct" not in em or "incorrect" not in em:
                raise ConfigError(f"{path}.emission", 'expected {"correct": ..., "incorrect": ...}')
            kwargs["score_emission"] = ScoreEmission(
                parse_dist(em["correct"], f"{path}.emission.correct"),
                parse_dist(em["incorrect"], f"{path}.emission.incorrect"),
            )
        if "noise" in obj:
            nz = obj["noise"]
            if not isinstance(nz, dict) or "mode" not in nz:
                raise ConfigError(f"{path}.noise", 'expected {"mode": ...}')
            try:
                kwargs["noise"] = NoiseSpec(
                    mode=nz["mode"], scale=nz.get("scale", 0.0), shift=nz.get("shift", 0.0)
                )
            except ConfigError as exc:
                raise ConfigError(f"{path}.{exc.path}", str(exc)) from exc
        if "max_steps" in obj:
            kwargs["max_steps"] = int(obj["max_steps"])
        try:
            return cls(**kwargs)
        except InvariantViolation as exc:
            raise ConfigError(f"{path}.{exc.field}", str(exc)) from exc

    def to_dict(self) -> dict:
        out = {
            "p_weak": self.p_weak,
            "p_strong": self.p_strong,
            "horizon": self.horizon_dist.to_dict(),
            "weak_tokens": self.weak_token_dist.to_dict(),
            "strong_tokens": self.strong_token_dist.to_dict(),
            "emission": {
                "correct": self.score_emission.correct_dist.to_dict(),
                "incorrect": self.score_emission.incorrect_dist.to_dict(),
            },
            "max_steps": self.max_steps,
        }
        nz: dict = {"mode": self.noise.mode}
        if self.noise.mode == "extra_variance":
            nz["scale"] = self.noise.scale
        elif self.noise.mode == "miscalibration":
            nz["shift"] = self.noise.shift
        out["noise"] = nz
        return out


@dataclass(frozen=True)
class EpisodeResult:
    """Outcome of one simulated episode."""

    final_reward: int
    ledger: CostLedger
    trace: TraceState
    latent_path: tuple[LatentClass, ...]
    rl_return: float


def step_distribution(
    cls: LatentClass, action: RoutingAction, cfg: EnvConfig
) -> dict[LatentClass, float]:
    """One-step latent transition distribution (no termination mass;
    episode length is governed by the horizon draw)."""
    if cls is LatentClass.DONE:
        raise SteppedTerminal("no transitions out of the terminal class")
    if action is RoutingAction.REGENERATE:
        if cls is LatentClass.DERAILED:
            return {LatentClass.DERAILED: 1.0}
        return {LatentClass.ON_TRACK: cfg.p_strong, LatentClass.SLIPPED: 1.0 - cfg.p_strong}
    # CONTINUE
    if cls is LatentClass.ON_TRACK:
        return {LatentClass.ON_TRACK: cfg.p_weak, LatentClass.SLIPPED: 1.0 - cfg.p_weak}
    if cls is LatentClass.SLIPPED:
        return {LatentClass.DERAILED: 1.0}
    return {LatentClass.DERAILED: 1.0}


def latent_step(
    cls: LatentClass, action: RoutingAction, cfg: EnvConfig, rng: np.random.Generator
) -> LatentClass:
    """Sample the next latent class."""
    return _transition(cls, action, cfg, float(rng.random()))


def _transition(cls: LatentClass, action: RoutingAction, cfg: EnvConfig, u: float) -> LatentClass:
    """Deterministic transition given a pre-drawn uniform deviate ``u``."""
    if cls is LatentClass.DONE:
        raise SteppedTerminal("no transitions out of the terminal class")
    if action is RoutingAction.REGENERATE:
        if cls is LatentClass.DERAILED:
            return LatentClass.DERAILED
        return LatentClass.ON_TRACK if u < cfg.p_strong else LatentClass.SLIPPED
    if cls is LatentClass.ON_TRACK:
        return LatentClass.ON_TRACK if u < cfg.p_weak else LatentClass.SLIPPED
    return LatentClass.DERAILED


def emit_score(
    class_after_step: LatentClass,
    emission: ScoreEmission,
    noise: NoiseSpec,
    rng: np.random.Generator,
) -> float:
    """Sample a score for a step whose transition landed in ``class_after_step``."""
    if class_after_step is LatentClass.DONE:
        raise SteppedTerminal("terminal class emits no scores")
    if class_after_step is LatentClass.ON_TRACK:
        raw = emission.correct_dist.sample(rng)
    else:
        raw = emission.incorrect_dist.sample(rng)
    gauss = float(rng.standard_normal()) if noise.mode == "extra_variance" else 0.0
    return noise.apply(min(1.0, max(0.0, float(raw))), gauss)


@dataclass(frozen=True)
class _EpisodeTape:
    """Pre-drawn per-step randomness.

    Indexing every draw by step position (not by draw order) means two
    policies run on the same seed see identical proposals, token counts, and
    scores at each step until their decisions diverge, and identical draws
    at any step they both regenerate.
    """

    horizon: int
    u_weak: np.ndarray
    u_strong: np.ndarray
    weak_tokens: np.ndarray
    strong_tokens: np.ndarray
    weak_correct: np.ndarray
    weak_incorrect: np.ndarray
    strong_correct: np.ndarray
    strong_incorrect: np.ndarray
    gauss_weak: np.ndarray
    gauss_strong: np.ndarray


def _draw_tape(cfg: EnvConfig, rng: np.random.Generator) -> _EpisodeTape:
    horizon = min(int(cfg.horizon_dist.sample(rng)), cfg.max_steps)
    n = cfg.max_steps
    em = cfg.score_emission
    return _EpisodeTape(
        horizon=max(1, horizon),
        u_weak=rng.random(n),
        u_strong=rng.random(n),
        weak_tokens=cfg.weak_token_dist.sample_many(rng, n),
        strong_tokens=cfg.strong_token_dist.sample_many(rng, n),
        weak_correct=np.clip(em.correct_dist.sample_many(rng, n), 0.0, 1.0),
        weak_incorrect=np.clip(em.incorrect_dist.sample_many(rng, n), 0.0, 1.0),
        strong_correct=np.clip(em.correct_dist.sample_many(rng, n), 0.0, 1.0),
        strong_incorrect=np.clip(em.incorrect_dist.sample_many(rng, n), 0.0, 1.0),
        gauss_weak=rng.standard_normal(n),
        gauss_strong=rng.standard_normal(n),
    )


PolicyCallback = Callable[[AggFeatures, TraceState], RoutingAction]


def run_episode(
    policy: PolicyCallback,
    cfg: EnvConfig,
    lam: float = 0.0,
    rng: np.random.Generator | None = None,
    query_id: str = "sim",
) -> EpisodeResult:
    """Run one routed episode against the simulator.

    Each step: the cheap generator proposes (latent transition under
    CONTINUE, tokens, emitted score); the policy sees the aggregated features
    of the trace including the proposal and decides.  On REGENERATE the
    proposal is discarded and replaced by an expensive-generator step whose
    latent transition branches from the pre-proposal class, so the discarded
    step leaves no trace.  The episode ends at the sampled horizon; the task
    reward is 1 iff the final latent class is ON_TRACK.
    """
    if lam < 0:
        raise InvariantViolation("lam", "cost weight must be nonnegative")
    if rng is None:
        rng = np.random.default_rng()
    tape = _draw_tape(cfg, rng)
    noise = cfg.noise

    trace = TraceState(query_id=query_id, max_steps=cfg.max_steps)
    cls = LatentClass.ON_TRACK
    latent_path: list[LatentClass] = []
    weak_tok = 0
    strong_tok = 0
    regens = 0

    for i in range(tape.horizon):
        pre_class = cls
        prop_class = _transition(pre_class, RoutingAction.CONTINUE, cfg, tape.u_weak[i])
        prop_correct = prop_class is LatentClass.ON_TRACK
        raw = tape.weak_correct[i] if prop_correct else tape.weak_incorrect[i]
        prop_score = noise.apply(float(raw), float(tape.gauss_weak[i]))
        proposal = StepRecord(
            score=prop_score,
            token_count=int(tape.weak_tokens[i]),
            origin=Origin.WEAK,
            truth=Truth.CORRECT if prop_correct else Truth.INCORRECT,
        )
        candidate = trace.append(proposal)
        feats = aggregate_features(candidate)
        try:
            action = policy(feats, candidate)
        except Exception as exc:
            raise PolicyFailure(f"policy raised at step {i + 1}") from exc
        if not isinstance(action, RoutingAction):
            raise PolicyFailure(f"policy returned {action!r}, not a RoutingAction")

        weak_tok += int(tape.weak_tokens[i])
        if action is RoutingAction.CONTINUE:
            trace = candidate
            cls = prop_class
        else:
            new_class = _transition(pre_class, RoutingAction.REGENERATE, cfg, tape.u_strong[i])
            new_correct = new_class is LatentClass.ON_TRACK
            raw = tape.strong_correct[i] if new_correct else tape.strong_incorrect[i]
            score = noise.apply(float(raw), float(tape.gauss_strong[i]))
            step = StepRecord(
                score=score,
                token_count=int(tape.strong_tokens[i]),
                origin=Origin.STRONG,
                truth=Truth.CORRECT if new_correct else Truth.INCORRECT,
            )
            trace = trace.append(step)
            cls = new_class
            strong_tok += int(tape.strong_tokens[i])
            regens += 1
        latent_path.append(cls)

    trace = trace.terminate()
    reward = 1 if cls is LatentClass.ON_TRACK else 0
    ledger = CostLedger(strong_tokens=strong_tok, weak_tokens=weak_tok, regenerate_count=regens)
    return EpisodeResult(
        final_reward=reward,
        ledger=ledger,
        trace=trace,
        latent_path=tuple(latent_path),
        rl_return=reward - lam * strong_tok,
    )


def run_episodes(
    policy_factory: Callable[[], PolicyCallback],
    cfg: EnvConfig,
    n_episodes: int,
    master_seed: int,
    lam: float = 0.0,
    stream: str = "episodes",
) -> list[EpisodeResult]:
    """Run independent episodes with per-episode seeds derived from
    ``master_seed``; results do not depend on execution order."""
    results = []
    for i in range(n_episodes):
        rng = substream(master_seed, stream, i)
        results.append(run_episode(policy_factory(), cfg, lam=lam, rng=rng, query_id=f"q{i}"))
    return results


def always(action: RoutingAction) -> PolicyCallback:
    """Constant policy, useful as a baseline."""

    def _policy(feats: AggFeatures, trace: TraceState) -> RoutingAction:
        return action

    return _policy
