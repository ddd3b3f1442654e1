"""Command-line orchestration: sweeps, training, solving, fitting, and
evaluation, with reproducible artifact directories.

Every run consumes a JSON config (schema-checked with precise field paths),
derives all randomness from one master seed through named substreams, writes
artifacts to a staging directory, and promotes it atomically on success.
Each artifact directory carries a manifest (config, config hash, seed,
library versions) sufficient to reproduce it byte-for-byte.

Exit codes: 0 success, 1 config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import shutil
import sys
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError, SingleClass, SteprouteError
from .metrics import (
    SweepPoint,
    TradeoffCurve,
    metric_report,
    min_score_auc,
    read_curve_csv,
    write_curve_csv,
)
from .neural import NeuralRouter, PpoConfig, train_agg
from .pomdp import (
    ObservationModel,
    PomdpRouter,
    estimate_accuracies,
    fit_observation_model,
    labeled_rows_from_traces,
)
from .seeding import substream
from .simenv import EnvConfig, EpisodeResult, LatentClass, always, run_episode
from .threshold import ThresholdRouter
from .trace import (
    Origin,
    RoutingAction,
    StepRecord,
    TraceState,
    Truth,
    aggregate_features,
    replay_load,
)


class RunMode(Enum):
    SIM_SWEEP = "sweep-thr"
    TRAIN_AGG = "train-agg"
    SOLVE_POMDP = "solve-pomdp"
    FIT_OBS_MODEL = "fit-obs"
    EVAL = "eval"
    REPLAY = "replay"


@dataclasses.dataclass
class RunConfig:
    mode: RunMode
    raw: dict
    out: Path
    seed: int
    force: bool = False


# --- config access helpers ----------------------------------------------------


def _get(cfg: dict, key: str, types, path: str, required: bool = True, default=None):
    full = f"{path}.{key}" if path else key
    if key not in cfg:
        if required:
            raise ConfigError(full, "missing required field")
        return default
    value = cfg[key]
    if types is not None and not isinstance(value, types):
        raise ConfigError(full, f"expected {getattr(types, '__name__', types)}, got {type(value).__name__}")
    return value


def _get_number(cfg: dict, key: str, path: str, required: bool = True, default=None):
    value = _get(cfg, key, (int, float), path, required, default)
    if isinstance(value, bool):
        raise ConfigError(f"{path}.{key}", "expected a number, got a boolean")
    return value


def _ladder(cfg: dict, key: str, path: str) -> list[float]:
    raw = _get(cfg, key, (list, dict), path)
    if isinstance(raw, dict):
        lo = _get_number(raw, "lo", f"{path}.{key}")
        hi = _get_number(raw, "hi", f"{path}.{key}")
        count = _get(raw, "count", int, f"{path}.{key}")
        if lo <= 0 or hi <= 0:
            raise ConfigError(f"{path}.{key}", "geometric ladders need positive endpoints")
        return list(np.geomspace(lo, hi, count))
    if not raw or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
        raise ConfigError(f"{path}.{key}", "expected a nonempty numeric array")
    return [float(v) for v in raw]


# --- evaluation machinery -------------------------------------------------------


@dataclasses.dataclass
class PolicyEval:
    """Matched-seed evaluation summary for one policy."""

    accuracy: float
    mean_strong_tokens: float
    total_strong_tokens: int
    n_episodes: int
    rewards: np.ndarray
    strong_tokens: np.ndarray
    regen_rate: float


def evaluate_policy(
    policy_factory: Callable[[], Callable],
    env: EnvConfig,
    n_episodes: int,
    master_seed: int,
    stream: str = "eval",
) -> PolicyEval:
    rewards = np.zeros(n_episodes)
    tokens = np.zeros(n_episodes, dtype=int)
    steps = 0
    regens = 0
    for i in range(n_episodes):
        res = run_episode(
            policy_factory(), env, rng=substream(master_seed, stream, i), query_id=f"q{i}"
        )
        rewards[i] = res.final_reward
        tokens[i] = res.ledger.strong_tokens
        steps += len(res.trace.steps)
        regens += res.ledger.regenerate_count
    return PolicyEval(
        accuracy=float(rewards.mean()),
        mean_strong_tokens=float(tokens.mean()),
        total_strong_tokens=int(tokens.sum()),
        n_episodes=n_episodes,
        rewards=rewards,
        strong_tokens=tokens,
        regen_rate=regens / steps if steps else 0.0,
    )


def sweep_endpoints(
    env: EnvConfig, n_episodes: int, master_seed: int
) -> tuple[PolicyEval, PolicyEval]:
    """Weak-only and strong-only endpoint runs under matched seeds."""
    weak = evaluate_policy(lambda: always(RoutingAction.CONTINUE), env, n_episodes, master_seed)
    strong = evaluate_policy(
        lambda: always(RoutingAction.REGENERATE), env, n_episodes, master_seed
    )
    return weak, strong


def sweep_points(
    controls: Sequence[float], evals: Sequence[PolicyEval], strong: PolicyEval
) -> list[SweepPoint]:
    denom = strong.total_strong_tokens
    return [
        SweepPoint(
            control=float(c),
            mean_strong_tokens=e.mean_strong_tokens,
            normalized_cost=e.total_strong_tokens / denom if denom else 0.0,
            accuracy=e.accuracy,
            n_queries=e.n_episodes,
        )
        for c, e in zip(controls, evals)
    ]


def assemble_curve(
    controls: Sequence[float],
    evals: Sequence[PolicyEval],
    weak: PolicyEval,
    strong: PolicyEval,
) -> TradeoffCurve:
    return TradeoffCurve(
        points=tuple(sweep_points(controls, evals, strong)),
        r_weak=weak.accuracy,
        r_strong=strong.accuracy,
        mean_strong_only_tokens=strong.mean_strong_tokens,
    )


def sweep_threshold(
    env: EnvConfig, ladder: Sequence[float], episodes_per_point: int, master_seed: int
) -> TradeoffCurve:
    """One sweep point per threshold, endpoints measured under matched seeds."""
    for k in ladder:
        if not 0.0 <= k <= 1.0:
            raise ConfigError("ladder", f"threshold {k} outside [0, 1]")
    weak, strong = sweep_endpoints(env, episodes_per_point, master_seed)
    evals = [
        evaluate_policy(ThresholdRouter(k=float(k)).episode_policy, env, episodes_per_point, master_seed)
        for k in ladder
    ]
    return assemble_curve(list(ladder), evals, weak, strong)


def sweep_lambda(
    env: EnvConfig,
    ladder: Sequence[float],
    build_policy: Callable[[float], Callable[[], Callable]],
    eval_episodes: int,
    master_seed: int,
) -> TradeoffCurve:
    """Sweep a cost-weight ladder: ``build_policy`` turns each lambda into a
    per-episode policy factory (a trained net, a solved planner, ...); every
    policy is evaluated on the same matched-seed episode set."""
    for lam in ladder:
        if lam < 0:
            raise ConfigError("lambda_ladder", f"lambda {lam} is negative")
    weak, strong = sweep_endpoints(env, eval_episodes, master_seed)
    evals = [
        evaluate_policy(build_policy(float(lam)), env, eval_episodes, master_seed)
        for lam in ladder
    ]
    return assemble_curve(list(ladder), evals, weak, strong)


def collect_labeled_corpus(
    env: EnvConfig, n_episodes: int, master_seed: int, regen_prob: float = 0.15
) -> list[TraceState]:
    """Behavior corpus for observation-model fitting: random escalations so
    both generator origins and all latent classes appear."""
    traces = []
    for i in range(n_episodes):
        act_rng = substream(master_seed, "corpus-act", i)

        def policy(feats, trace):
            return (
                RoutingAction.REGENERATE
                if act_rng.random() < regen_prob
                else RoutingAction.CONTINUE
            )

        res = run_episode(policy, env, rng=substream(master_seed, "corpus-env", i), query_id=f"c{i}")
        traces.append(res.trace)
    return traces


# --- replay-based offline evaluation -----------------------------------------------


def replay_episode(
    trace: TraceState,
    policy: Callable,
    env: EnvConfig,
    rng: np.random.Generator,
    lam: float = 0.0,
) -> EpisodeResult:
    """Evaluate a routing policy against a recorded weak-only trace.

    The recorded steps play the weak proposals (scores and truth labels are
    reused, treating per-step difficulty as intrinsic to the query);
    regenerations are synthesized from the environment's strong-model
    parameters.  Traces must carry truth labels.
    """
    from .trace import CostLedger

    work = TraceState(query_id=trace.query_id, max_steps=max(trace.max_steps, len(trace.steps)))
    cls = LatentClass.ON_TRACK
    latent_path = []
    weak_tok = 0
    strong_tok = 0
    regens = 0
    for step in trace.steps:
        if step.truth is None:
            raise SteprouteError(f"trace {trace.query_id!r} lacks truth labels; cannot replay")
        candidate = work.append(step)
        action = policy(aggregate_features(candidate), candidate)
        weak_tok += step.token_count
        if action is RoutingAction.CONTINUE:
            work = candidate
            if step.truth is Truth.CORRECT:
                cls = LatentClass.ON_TRACK
            elif cls is LatentClass.ON_TRACK:
                cls = LatentClass.SLIPPED
            else:
                cls = LatentClass.DERAILED
        else:
            success = cls is not LatentClass.DERAILED and rng.random() < env.p_strong
            if success:
                cls = LatentClass.ON_TRACK
            elif cls is LatentClass.DERAILED:
                cls = LatentClass.DERAILED
            else:
                cls = LatentClass.SLIPPED
            dist = (
                env.score_emission.correct_dist
                if cls is LatentClass.ON_TRACK
                else env.score_emission.incorrect_dist
            )
            score = env.noise.apply(
                min(1.0, max(0.0, float(dist.sample(rng)))), float(rng.standard_normal())
            )
            tokens = int(env.strong_token_dist.sample(rng))
            synth = StepRecord(
                score=score,
                token_count=tokens,
                origin=Origin.STRONG,
                truth=Truth.CORRECT if cls is LatentClass.ON_TRACK else Truth.INCORRECT,
            )
            work = work.append(synth)
            strong_tok += tokens
            regens += 1
        latent_path.append(cls)
    reward = 1 if cls is LatentClass.ON_TRACK else 0
    if not latent_path:
        reward = 0
    ledger = CostLedger(strong_tokens=strong_tok, weak_tokens=weak_tok, regenerate_count=regens)
    return EpisodeResult(
        final_reward=reward,
        ledger=ledger,
        trace=work.terminate(),
        latent_path=tuple(latent_path),
        rl_return=reward - lam * strong_tok,
    )


def replay_evaluate(
    traces: Sequence[TraceState],
    policy_factory: Callable[[], Callable],
    env: EnvConfig,
    master_seed: int,
    stream: str = "replay",
) -> PolicyEval:
    rewards = np.zeros(len(traces))
    tokens = np.zeros(len(traces), dtype=int)
    steps = 0
    regens = 0
    for i, trace in enumerate(traces):
        res = replay_episode(trace, policy_factory(), env, substream(master_seed, stream, i))
        rewards[i] = res.final_reward
        tokens[i] = res.ledger.strong_tokens
        steps += len(res.trace.steps)
        regens += res.ledger.regenerate_count
    return PolicyEval(
        accuracy=float(rewards.mean()) if len(traces) else 0.0,
        mean_strong_tokens=float(tokens.mean()) if len(traces) else 0.0,
        total_strong_tokens=int(tokens.sum()),
        n_episodes=len(traces),
        rewards=rewards,
        strong_tokens=tokens,
        regen_rate=regens / steps if steps else 0.0,
    )


# --- mode implementations -----------------------------------------------------------


def _load_env(cfg: dict, path: str = "env") -> EnvConfig:
    return EnvConfig.from_dict(_get(cfg, "env", dict, ""), path)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _curve_artifacts(out: Path, curve: TradeoffCurve, raw_points=None) -> None:
    write_curve_csv(raw_points if raw_points is not None else curve.points, out / "curve.csv")
    _write_json(
        out / "curve_meta.json",
        {
            "r_weak": curve.r_weak,
            "r_strong": curve.r_strong,
            "mean_strong_only_tokens": curve.mean_strong_only_tokens,
        },
    )
    _write_json(out / "report.json", metric_report(curve))


def _emit_curve(out: Path, controls, evals, weak: PolicyEval, strong: PolicyEval) -> None:
    """One CSV row per control point (even degenerate duplicates); metrics
    are computed on the deduplicated curve."""
    raw = sweep_points(controls, evals, strong)
    curve = assemble_curve(controls, evals, weak, strong)
    _curve_artifacts(out, curve, raw_points=raw)


def _run_sim_sweep(cfg: dict, out: Path, seed: int) -> None:
    env = _load_env(cfg)
    ladder = _ladder(cfg, "ladder", "")
    episodes = int(_get_number(cfg, "episodes_per_point", ""))
    for k in ladder:
        if not 0.0 <= k <= 1.0:
            raise ConfigError("ladder", f"threshold {k} outside [0, 1]")
    weak, strong = sweep_endpoints(env, episodes, seed)
    evals = [
        evaluate_policy(ThresholdRouter(k=float(k)).episode_policy, env, episodes, seed)
        for k in ladder
    ]
    _emit_curve(out, list(ladder), evals, weak, strong)


def _run_train_agg(cfg: dict, out: Path, seed: int) -> None:
    env = _load_env(cfg)
    ladder = _ladder(cfg, "lambda_ladder", "")
    ppo_cfg_raw = _get(cfg, "ppo", dict, "", required=False, default={}) or {}
    try:
        ppo = PpoConfig(**ppo_cfg_raw)
    except TypeError as exc:
        raise ConfigError("ppo", str(exc)) from exc
    n_iterations = int(_get_number(cfg, "n_iterations", "", required=False, default=100))
    hidden = tuple(_get(cfg, "hidden", list, "", required=False, default=[128, 128]))
    eval_episodes = int(_get_number(cfg, "eval_episodes", ""))

    weak, strong = sweep_endpoints(env, eval_episodes, seed)
    evals = []
    for i, lam in enumerate(ladder):
        net, run = train_agg(
            env, lam, ppo, seed=seed + i, n_iterations=n_iterations, hidden=hidden
        )
        router = NeuralRouter(lambda_cost=lam, hidden=hidden)
        router.net_ = net
        router.max_steps_ = env.max_steps
        router.save(out / f"checkpoint_{i}.json")
        run.write_csv(out / f"train_{i}.csv")
        evals.append(evaluate_policy(router.episode_policy, env, eval_episodes, seed))
    _emit_curve(out, ladder, evals, weak, strong)


def _pomdp_router_from_cfg(cfg: dict, env: EnvConfig, obs_model: ObservationModel, lam: float) -> PomdpRouter:
    pcfg = _get(cfg, "pomdp", dict, "", required=False, default={}) or {}
    router = PomdpRouter(
        p_weak=float(pcfg.get("p_weak", env.p_weak)),
        p_strong=float(pcfg.get("p_strong", env.p_strong)),
        lam=lam,
        expected_strong_tokens=float(
            pcfg.get("expected_strong_tokens", env.strong_token_dist.mean())
        ),
        termination_prob=float(pcfg.get("termination_prob", 1.0 / 18.0)),
        max_steps=env.max_steps,
        band=tuple(pcfg.get("band", (0.35, 0.40))),
        obs_grid=int(pcfg.get("obs_grid", 8)),
        lookup_resolution=int(pcfg.get("lookup_resolution", 40)),
        n_beliefs=int(pcfg.get("n_beliefs", 96)),
        max_iterations=int(pcfg.get("max_iterations", 150)),
    )
    router.set_observation_model(obs_model)
    return router


def _obs_model_from_cfg(cfg: dict, env: EnvConfig, seed: int) -> ObservationModel:
    if "obs_model" in cfg:
        return ObservationModel.load(_get(cfg, "obs_model", str, ""))
    fit_cfg = _get(cfg, "fit_from_env", dict, "")
    episodes = int(_get_number(fit_cfg, "episodes", "fit_from_env", required=False, default=400))
    regen_prob = float(
        _get_number(fit_cfg, "regen_prob", "fit_from_env", required=False, default=0.15)
    )
    corpus = collect_labeled_corpus(env, episodes, substream_seed(seed, "fit-obs"), regen_prob)
    return fit_observation_model(labeled_rows_from_traces(corpus))


def substream_seed(master_seed: int, label: str) -> int:
    """Derive a child integer seed for components that take seeds, not rngs."""
    return int(substream(master_seed, label).integers(0, 2**63 - 1))


def _run_solve_pomdp(cfg: dict, out: Path, seed: int) -> None:
    env = _load_env(cfg)
    ladder = _ladder(cfg, "lambda_ladder", "")
    eval_episodes = int(_get_number(cfg, "eval_episodes", ""))
    obs_model = _obs_model_from_cfg(cfg, env, seed)
    obs_model.save(out / "obs_model.json")

    weak, strong = sweep_endpoints(env, eval_episodes, seed)
    evals = []
    for lam in ladder:
        router = _pomdp_router_from_cfg(cfg, env, obs_model, float(lam))
        evals.append(evaluate_policy(router.episode_policy, env, eval_episodes, seed))
    _emit_curve(out, ladder, evals, weak, strong)


def _run_fit_obs(cfg: dict, out: Path, seed: int) -> None:
    if "labeled_jsonl" in cfg:
        rows = []
        src = Path(_get(cfg, "labeled_jsonl", str, ""))
        if not src.exists():
            raise ConfigError("labeled_jsonl", f"no such file: {src}")
        with open(src, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                for key in ("min_prev", "current", "class"):
                    if key not in obj:
                        raise ConfigError(
                            "labeled_jsonl", f"line {lineno}: missing field {key!r}"
                        )
                rows.append((obj["min_prev"], obj["current"], obj["class"]))
        model = fit_observation_model(rows)
    else:
        env = _load_env(cfg)
        episodes = int(_get_number(cfg, "episodes", "", required=False, default=400))
        regen_prob = float(_get_number(cfg, "regen_prob", "", required=False, default=0.15))
        corpus = collect_labeled_corpus(env, episodes, seed, regen_prob)
        model = fit_observation_model(labeled_rows_from_traces(corpus))
    model.save(out / "obs_model.json")
    _write_json(
        out / "fit_summary.json",
        {
            "sample_counts": {k.name.lower(): v for k, v in model.sample_counts.items()},
            "bandwidths": {k.name.lower(): v for k, v in model.bandwidths.items()},
        },
    )


def _policy_factories_from_cfg(
    cfg: dict, env: EnvConfig, seed: int
) -> tuple[list[float], list[Callable[[], Callable]]]:
    pol = _get(cfg, "policy", dict, "")
    kind = _get(pol, "kind", str, "policy")
    if kind == "threshold":
        ladder = _ladder(pol, "ladder", "policy")
        return ladder, [ThresholdRouter(k=k).episode_policy for k in ladder]
    if kind == "checkpoint":
        router = NeuralRouter.load(_get(pol, "path", str, "policy"))
        return [router.lambda_cost], [router.episode_policy]
    if kind == "pomdp":
        obs_model = _obs_model_from_cfg(cfg, env, seed)
        ladder = _ladder(pol, "lambda_ladder", "policy")
        factories = []
        for lam in ladder:
            router = _pomdp_router_from_cfg(cfg, env, obs_model, float(lam))
            factories.append(router.episode_policy)
        return ladder, factories
    raise ConfigError("policy.kind", f"unknown policy kind {kind!r}")


def _run_eval(cfg: dict, out: Path, seed: int) -> None:
    if "curve" in cfg:
        points = read_curve_csv(_get(cfg, "curve", str, ""))
        meta = json.loads(Path(_get(cfg, "meta", str, "")).read_text(encoding="utf-8"))
        curve = TradeoffCurve(
            points=tuple(points),
            r_weak=meta["r_weak"],
            r_strong=meta["r_strong"],
            mean_strong_only_tokens=meta["mean_strong_only_tokens"],
        )
        _curve_artifacts(out, curve)
        return
    corpus_path = _get(cfg, "corpus", str, "")
    env = _load_env(cfg)
    traces = replay_load(corpus_path)
    if not traces:
        raise ConfigError("corpus", "corpus is empty")
    controls, factories = _policy_factories_from_cfg(cfg, env, seed)
    weak = replay_evaluate(traces, lambda: always(RoutingAction.CONTINUE), env, seed)
    strong = replay_evaluate(traces, lambda: always(RoutingAction.REGENERATE), env, seed)
    evals = [replay_evaluate(traces, f, env, seed) for f in factories]
    _emit_curve(out, controls, evals, weak, strong)


def _run_replay(cfg: dict, out: Path, seed: int) -> None:
    corpus_path = _get(cfg, "corpus", str, "")
    traces = replay_load(corpus_path)
    labeled = [t for t in traces if t.steps and all(s.truth is not None for s in t.steps)]
    summary: dict = {
        "n_traces": len(traces),
        "n_steps": sum(len(t.steps) for t in traces),
        "weak_tokens": sum(
            s.token_count for t in traces for s in t.steps if s.origin is Origin.WEAK
        ),
        "strong_tokens": sum(
            s.token_count for t in traces for s in t.steps if s.origin is Origin.STRONG
        ),
        "n_fully_labeled": len(labeled),
    }
    if labeled:
        finals = [t.steps[-1].truth is Truth.CORRECT for t in labeled]
        summary["accuracy"] = float(np.mean(finals))
        try:
            summary["min_score_auc"] = min_score_auc(labeled)
        except SingleClass:
            summary["min_score_auc"] = None
        try:
            p_w, p_s = estimate_accuracies(labeled)
            summary["p_weak_hat"] = p_w
            summary["p_strong_hat"] = p_s
        except SteprouteError:
            pass
    _write_json(out / "replay_summary.json", summary)


_MODE_RUNNERS = {
    RunMode.SIM_SWEEP: _run_sim_sweep,
    RunMode.TRAIN_AGG: _run_train_agg,
    RunMode.SOLVE_POMDP: _run_solve_pomdp,
    RunMode.FIT_OBS_MODEL: _run_fit_obs,
    RunMode.EVAL: _run_eval,
    RunMode.REPLAY: _run_replay,
}


def run(config: RunConfig) -> Path:
    """Execute a validated run config; returns the promoted artifact dir."""
    out = config.out
    if out.exists():
        if not config.force:
            raise ConfigError("out", f"{out} already exists (use --force to overwrite)")
        shutil.rmtree(out)
    staging = out.parent / f".{out.name}.staging-{os.getpid()}"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    try:
        _MODE_RUNNERS[config.mode](config.raw, staging, config.seed)
        manifest = {
            "mode": config.mode.value,
            "seed": config.seed,
            "seed_streams": [
                "episodes",
                "eval",
                "replay",
                "rollout-env",
                "rollout-act",
                "corpus-env",
                "corpus-act",
                "policy-init",
                "shuffle",
                "fit-obs",
            ],
            "config": config.raw,
            "config_sha256": hashlib.sha256(
                json.dumps(config.raw, sort_keys=True).encode()
            ).hexdigest(),
            "versions": {
                "steproute": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": sys.version.split()[0],
            },
        }
        _write_json(staging / "manifest.json", manifest)
        os.rename(staging, out)
    finally:
        if staging.exists():
            shutil.rmtree(staging)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="steproute",
        description="Step-level weak/strong routing: simulate, train, solve, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for mode in RunMode:
        p = sub.add_parser(mode.value, help=f"run the {mode.value} pipeline")
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--out", default=None, help="artifact directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
        p.add_argument("--episodes", type=int, default=None, help="episode-count override")
        p.add_argument("--force", action="store_true", help="overwrite the artifact directory")
    return parser


def parse_run_config(args: argparse.Namespace) -> RunConfig:
    mode = RunMode(args.command)
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise ConfigError("config", f"no such file: {cfg_path}")
    try:
        raw = json.loads(cfg_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    if args.episodes is not None:
        defaults = {
            RunMode.SIM_SWEEP: "episodes_per_point",
            RunMode.TRAIN_AGG: "eval_episodes",
            RunMode.SOLVE_POMDP: "eval_episodes",
            RunMode.FIT_OBS_MODEL: "episodes",
        }
        hit = False
        for key in ("episodes_per_point", "eval_episodes", "episodes"):
            if key in raw:
                raw[key] = args.episodes
                hit = True
        if not hit and mode in defaults:
            raw[defaults[mode]] = args.episodes
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed", "must be an integer")
    out = args.out if args.out is not None else raw.get("out")
    if out is None:
        raise ConfigError("out", "missing: set in config or pass --out")
    return RunConfig(mode=mode, raw=raw, out=Path(out), seed=seed, force=args.force)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = parse_run_config(args)
        out = run(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except SteprouteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface anything unexpected as runtime failure
        print(f"unexpected error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
