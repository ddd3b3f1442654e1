"""Learned router: a small actor-critic MLP over aggregated step features,
trained with clipped-surrogate policy optimization and generalized advantage
estimation against the simulator.

The network is plain numpy with hand-written backprop; gradients are
validated against central finite differences in the test suite.  Rewards are
undiscounted and advantages are used unnormalized.  The per-episode return is
the terminal task reward minus ``lam`` times every strong token spent, with
the token penalty charged at the step that incurred it.
"""

from __future__ import annotations

import base64
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import (
    InvariantViolation,
    LengthMismatch,
    NonFiniteGradient,
    NonFiniteInput,
)
from .seeding import substream
from .simenv import EnvConfig, EpisodeResult, run_episode
from .trace import AggFeatures, Origin, RoutingAction, TraceState

INPUT_DIM = 4
N_ACTIONS = 2  # index 0 = CONTINUE, 1 = REGENERATE

_ACTIONS = (RoutingAction.CONTINUE, RoutingAction.REGENERATE)


def normalize_features(
    feats: AggFeatures, token_scale: float = 100.0, max_steps: int = 30
) -> np.ndarray:
    """Map raw features into a bounded range for the tanh trunk: scores pass
    through, token counts are divided by ``token_scale``, the step index by
    ``max_steps``."""
    return np.array(
        [
            feats.current_score,
            feats.min_prev_score,
            feats.current_tokens / token_scale,
            feats.step_index / max_steps,
        ],
        dtype=float,
    )


def _layer_shapes(hidden: Sequence[int]) -> list[tuple[int, int]]:
    dims = [INPUT_DIM, *hidden]
    shapes = [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
    return shapes


class PolicyNet:
    """Actor-critic MLP: tanh hidden layers, a 2-logit actor head and a
    scalar critic head off the shared trunk.  Parameters live in one flat
    float64 vector with a fixed layout so checkpoints and optimizer state
    are unambiguous."""

    def __init__(self, hidden: Sequence[int] = (128, 128), params: Optional[np.ndarray] = None):
        self.hidden = tuple(int(h) for h in hidden)
        if any(h < 1 for h in self.hidden) or not self.hidden:
            raise InvariantViolation("hidden", "need at least one positive hidden width")
        self._offsets = self._build_offsets()
        if params is None:
            self.params = np.zeros(self.n_params, dtype=float)
        else:
            params = np.asarray(params, dtype=float).ravel()
            if params.size != self.n_params:
                raise InvariantViolation(
                    "params", f"expected {self.n_params} parameters, got {params.size}"
                )
            self.params = params.copy()

    def _build_offsets(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        offsets: dict[str, tuple[int, tuple[int, ...]]] = {}
        cursor = 0

        def add(name: str, shape: tuple[int, ...]):
            nonlocal cursor
            offsets[name] = (cursor, shape)
            cursor += int(np.prod(shape))

        for i, (fan_in, fan_out) in enumerate(_layer_shapes(self.hidden)):
            add(f"W{i}", (fan_in, fan_out))
            add(f"b{i}", (fan_out,))
        last = self.hidden[-1]
        add("W_actor", (last, N_ACTIONS))
        add("b_actor", (N_ACTIONS,))
        add("W_critic", (last, 1))
        add("b_critic", (1,))
        self.n_params = cursor
        return offsets

    def get(self, name: str, params: Optional[np.ndarray] = None) -> np.ndarray:
        start, shape = self._offsets[name]
        src = self.params if params is None else params
        return src[start : start + int(np.prod(shape))].reshape(shape)

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.hidden, self.params)

    @classmethod
    def initialized(cls, hidden: Sequence[int] = (128, 128), rng: np.random.Generator | None = None) -> "PolicyNet":
        """Orthogonal init for the trunk, small-gain orthogonal heads."""
        net = cls(hidden)
        rng = rng or np.random.default_rng()

        def orthogonal(shape, gain):
            a = rng.standard_normal(shape)
            q, r = np.linalg.qr(a if shape[0] >= shape[1] else a.T)
            q = q * np.sign(np.diag(r))
            if shape[0] < shape[1]:
                q = q.T
            return gain * q[: shape[0], : shape[1]]

        for i, (fan_in, fan_out) in enumerate(_layer_shapes(net.hidden)):
            net.get(f"W{i}")[...] = orthogonal((fan_in, fan_out), np.sqrt(2.0))
        net.get("W_actor")[...] = orthogonal((net.hidden[-1], N_ACTIONS), 0.01)
        net.get("W_critic")[...] = orthogonal((net.hidden[-1], 1), 1.0)
        return net

    def forward(self, x: np.ndarray, params: Optional[np.ndarray] = None):
        """Batch forward pass; returns (logits (B, 2), values (B,), hiddens).

        ``hiddens`` holds the post-activation of every layer for backprop.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not np.all(np.isfinite(x)):
            raise NonFiniteInput("network input contains NaN or infinity")
        if x.shape[1] != INPUT_DIM:
            raise InvariantViolation("x", f"expected {INPUT_DIM} features, got {x.shape[1]}")
        hs = [x]
        h = x
        for i in range(len(self.hidden)):
            h = np.tanh(h @ self.get(f"W{i}", params) + self.get(f"b{i}", params))
            hs.append(h)
        logits = h @ self.get("W_actor", params) + self.get("b_actor", params)
        values = (h @ self.get("W_critic", params) + self.get("b_critic", params))[:, 0]
        return logits, values, hs

    def policy_value(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(action probabilities, values) for a batch of feature rows."""
        logits, values, _ = self.forward(x)
        return softmax(logits), values


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def net_forward(net: PolicyNet, feats: AggFeatures, token_scale: float = 100.0, max_steps: int = 30):
    """Single-observation forward pass: ((logit pair), value)."""
    x = normalize_features(feats, token_scale=token_scale, max_steps=max_steps)
    logits, values, _ = net.forward(x[None, :])
    return (float(logits[0, 0]), float(logits[0, 1])), float(values[0])


@dataclass(frozen=True)
class PpoConfig:
    """Optimization hyperparameters.  Defaults: learning rate 1e-4, clip 0.2,
    entropy coefficient 0.01, GAE 0.95, undiscounted rewards, unnormalized
    advantages."""

    learning_rate: float = 1e-4
    clip: float = 0.2
    entropy_coef: float = 0.01
    gae_lambda: float = 0.95
    discount: float = 1.0
    normalize_advantages: bool = False
    value_coef: float = 0.5
    epochs_per_batch: int = 4
    minibatch_size: int = 256
    rollout_episodes: int = 64

    def __post_init__(self):
        if self.clip <= 0:
            raise InvariantViolation("clip", "must be positive")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise InvariantViolation("gae_lambda", "must lie in [0, 1]")


def compute_gae(
    rewards: Sequence[float],
    values: Sequence[float],
    terminal_value: float,
    gae_lambda: float,
    discount: float,
) -> np.ndarray:
    """Generalized advantage estimation.

    delta_t = r_t + discount * V_{t+1} - V_t (V after the last step is
    ``terminal_value``); A_t = delta_t + discount * gae_lambda * A_{t+1}.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape != v.shape or r.ndim != 1:
        raise LengthMismatch(f"rewards {r.shape} vs values {v.shape}")
    n = len(r)
    adv = np.zeros(n, dtype=float)
    next_value = float(terminal_value)
    next_adv = 0.0
    for t in range(n - 1, -1, -1):
        delta = r[t] + discount * next_value - v[t]
        next_adv = delta + discount * gae_lambda * next_adv
        adv[t] = next_adv
        next_value = v[t]
    return adv


@dataclass
class RolloutBatch:
    """Flattened on-policy experience."""

    features: np.ndarray  # (B, 4), already normalized
    actions: np.ndarray  # (B,), int in {0, 1}
    old_logps: np.ndarray  # (B,)
    advantages: np.ndarray  # (B,)
    returns: np.ndarray  # (B,)

    def __post_init__(self):
        n = len(self.actions)
        for name in ("features", "old_logps", "advantages", "returns"):
            if len(getattr(self, name)) != n:
                raise LengthMismatch(f"{name} length != actions length")

    def __len__(self) -> int:
        return len(self.actions)


def ppo_loss_and_grad(
    net: PolicyNet, params: np.ndarray, batch: RolloutBatch, cfg: PpoConfig
) -> tuple[float, np.ndarray]:
    """Full clipped-surrogate loss (policy + value + entropy) and its exact
    gradient with respect to ``params``."""
    x = batch.features
    n = len(batch)
    logits, values, hs = net.forward(x, params)
    logp = log_softmax(logits)
    p = np.exp(logp)
    idx = np.arange(n)
    logp_a = logp[idx, batch.actions]
    ratio = np.exp(logp_a - batch.old_logps)
    adv = batch.advantages
    if cfg.normalize_advantages:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    lo, hi = 1.0 - cfg.clip, 1.0 + cfg.clip
    clipped = np.clip(ratio, lo, hi)
    surr1 = ratio * adv
    surr2 = clipped * adv
    use_unclipped = surr1 <= surr2
    pg_loss = -np.mean(np.minimum(surr1, surr2))

    entropy = -np.sum(p * logp, axis=1)
    ent_loss = -cfg.entropy_coef * entropy.mean()

    v_err = values - batch.returns
    v_loss = 0.5 * cfg.value_coef * np.mean(v_err**2)

    loss = pg_loss + ent_loss + v_loss

    # d loss / d logp_a through the surrogate (zero where the clip is active
    # and binding).
    inside_clip = (ratio > lo) & (ratio < hi)
    active = np.where(use_unclipped, True, inside_clip)
    dlogp_a = np.where(active, -(adv * ratio) / n, 0.0)

    dlogits = dlogp_a[:, None] * (np.eye(N_ACTIONS)[batch.actions] - p)
    # Entropy term: d(-c * mean H)/d logits = (c / n) * p * (logp + H).
    dlogits += (cfg.entropy_coef / n) * p * (logp + entropy[:, None])
    dvalues = cfg.value_coef * v_err / n

    grad = np.zeros_like(params)
    h_last = hs[-1]
    dW_actor = h_last.T @ dlogits
    db_actor = dlogits.sum(axis=0)
    dW_critic = h_last.T @ dvalues[:, None]
    db_critic = np.array([dvalues.sum()])

    def put(name, value):
        start, shape = net._offsets[name]
        grad[start : start + int(np.prod(shape))] = value.ravel()

    put("W_actor", dW_actor)
    put("b_actor", db_actor)
    put("W_critic", dW_critic)
    put("b_critic", db_critic)

    dh = dlogits @ net.get("W_actor", params).T + dvalues[:, None] @ net.get("W_critic", params).T
    for i in range(len(net.hidden) - 1, -1, -1):
        da = dh * (1.0 - hs[i + 1] ** 2)
        put(f"W{i}", hs[i].T @ da)
        put(f"b{i}", da.sum(axis=0))
        if i > 0:
            dh = da @ net.get(f"W{i}", params).T
    return float(loss), grad


class Adam:
    """Adaptive-moment estimation over a flat parameter vector."""

    def __init__(self, n_params: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def ppo_update(
    net: PolicyNet,
    batch: RolloutBatch,
    cfg: PpoConfig,
    opt: Optional[Adam] = None,
    rng: np.random.Generator | None = None,
) -> PolicyNet:
    """One optimization phase over a rollout batch: ``epochs_per_batch``
    passes of minibatched updates.  Returns a new net; the input is left
    untouched."""
    if len(batch) == 0:
        raise InvariantViolation("batch", "empty rollout batch")
    if not np.all(np.isfinite(batch.old_logps)):
        raise NonFiniteInput("old log-probs contain NaN or infinity")
    out = net.copy()
    opt = opt or Adam(out.n_params, cfg.learning_rate)
    n = len(batch)
    mb = min(cfg.minibatch_size, n)
    for _ in range(cfg.epochs_per_batch):
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, mb):
            sel = order[start : start + mb]
            sub = RolloutBatch(
                features=batch.features[sel],
                actions=batch.actions[sel],
                old_logps=batch.old_logps[sel],
                advantages=batch.advantages[sel],
                returns=batch.returns[sel],
            )
            _, grad = ppo_loss_and_grad(out, out.params, sub, cfg)
            if not np.all(np.isfinite(grad)):
                raise NonFiniteGradient("aborting update: non-finite gradient")
            out.params = opt.step(out.params, grad)
    return out


@dataclass
class TrainRun:
    """Per-iteration training log."""

    lambda_cost: float
    seed: int
    optimizer: str = "adam(b1=0.9,b2=0.999,eps=1e-8)"
    rows: list[dict] = field(default_factory=list)

    def log(self, iteration: int, mean_return: float, accuracy: float, mean_strong_tokens: float, regen_rate: float):
        self.rows.append(
            {
                "iteration": iteration,
                "mean_return": mean_return,
                "accuracy": accuracy,
                "mean_strong_tokens": mean_strong_tokens,
                "regen_rate": regen_rate,
            }
        )

    def write_csv(self, path: str | Path) -> None:
        cols = ["iteration", "mean_return", "accuracy", "mean_strong_tokens", "regen_rate"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in self.rows:
                writer.writerow([row[c] if c == "iteration" else repr(float(row[c])) for c in cols])


def _episode_rewards(result: EpisodeResult, lam: float) -> np.ndarray:
    """Per-decision rewards: the token penalty lands on regenerated steps,
    the terminal task reward on the final step."""
    rewards = np.array(
        [-lam * s.token_count if s.origin is Origin.STRONG else 0.0 for s in result.trace.steps],
        dtype=float,
    )
    rewards[-1] += result.final_reward
    return rewards


def collect_rollouts(
    net: PolicyNet,
    env: EnvConfig,
    lam: float,
    n_episodes: int,
    master_seed: int,
    iteration: int,
    cfg: PpoConfig,
    token_scale: float = 100.0,
) -> tuple[RolloutBatch, list[EpisodeResult]]:
    """Run ``n_episodes`` with stochastic action sampling, recording exactly
    what the policy saw at each decision (rewards are reconstructed from the
    accepted trace, whose steps map 1:1 to decisions)."""
    feats_all: list[np.ndarray] = []
    actions_all: list[int] = []
    logps_all: list[float] = []
    adv_all: list[np.ndarray] = []
    ret_all: list[np.ndarray] = []
    results: list[EpisodeResult] = []

    for ep in range(n_episodes):
        env_rng = substream(master_seed, "rollout-env", iteration * n_episodes + ep)
        act_rng = substream(master_seed, "rollout-act", iteration * n_episodes + ep)
        ep_feats: list[np.ndarray] = []
        ep_actions: list[int] = []
        ep_logps: list[float] = []
        ep_values: list[float] = []

        def policy(feats: AggFeatures, trace: TraceState) -> RoutingAction:
            x = normalize_features(feats, token_scale=token_scale, max_steps=env.max_steps)
            logits, values, _ = net.forward(x[None, :])
            logp = log_softmax(logits)[0]
            a = int(act_rng.choice(N_ACTIONS, p=np.exp(logp)))
            ep_feats.append(x)
            ep_actions.append(a)
            ep_logps.append(float(logp[a]))
            ep_values.append(float(values[0]))
            return _ACTIONS[a]

        result = run_episode(policy, env, lam=lam, rng=env_rng, query_id=f"it{iteration}-ep{ep}")
        results.append(result)
        rewards = _episode_rewards(result, lam)
        values = np.asarray(ep_values)
        adv = compute_gae(rewards, values, 0.0, cfg.gae_lambda, cfg.discount)
        adv_all.append(adv)
        ret_all.append(adv + values)
        feats_all.extend(ep_feats)
        actions_all.extend(ep_actions)
        logps_all.extend(ep_logps)

    batch = RolloutBatch(
        features=np.vstack(feats_all),
        actions=np.asarray(actions_all, dtype=int),
        old_logps=np.asarray(logps_all, dtype=float),
        advantages=np.concatenate(adv_all),
        returns=np.concatenate(ret_all),
    )
    return batch, results


def train_agg(
    env: EnvConfig,
    lambda_cost: float,
    cfg: PpoConfig | None = None,
    seed: int = 0,
    n_iterations: int = 100,
    hidden: Sequence[int] = (128, 128),
    token_scale: float = 100.0,
) -> tuple[PolicyNet, TrainRun]:
    """Train the aggregated-feature router against the simulator and return
    the final net together with its iteration log."""
    if lambda_cost < 0:
        raise InvariantViolation("lambda_cost", "must be nonnegative")
    cfg = cfg or PpoConfig()
    net = PolicyNet.initialized(hidden, substream(seed, "policy-init"))
    opt = Adam(net.n_params, cfg.learning_rate)
    run = TrainRun(lambda_cost=lambda_cost, seed=seed)
    for it in range(n_iterations):
        batch, results = collect_rollouts(
            net, env, lambda_cost, cfg.rollout_episodes, seed, it, cfg, token_scale
        )
        steps = sum(len(r.trace.steps) for r in results)
        regens = sum(r.ledger.regenerate_count for r in results)
        run.log(
            iteration=it,
            mean_return=float(np.mean([r.rl_return for r in results])),
            accuracy=float(np.mean([r.final_reward for r in results])),
            mean_strong_tokens=float(np.mean([r.ledger.strong_tokens for r in results])),
            regen_rate=regens / steps if steps else 0.0,
        )
        net = ppo_update(net, batch, cfg, opt=opt, rng=substream(seed, "shuffle", it))
    return net, run


class NeuralRouter(BaseEstimator):
    """Estimator wrapper around the trained policy net.

    ``fit`` trains against a simulator config; ``decide`` acts greedily
    (argmax) for reproducible evaluation.
    """

    def __init__(
        self,
        lambda_cost: float = 3e-4,
        hidden: tuple = (128, 128),
        n_iterations: int = 100,
        learning_rate: float = 1e-4,
        clip: float = 0.2,
        entropy_coef: float = 0.01,
        gae_lambda: float = 0.95,
        epochs_per_batch: int = 4,
        minibatch_size: int = 256,
        rollout_episodes: int = 64,
        token_scale: float = 100.0,
    ):
        self.lambda_cost = lambda_cost
        self.hidden = hidden
        self.n_iterations = n_iterations
        self.learning_rate = learning_rate
        self.clip = clip
        self.entropy_coef = entropy_coef
        self.gae_lambda = gae_lambda
        self.epochs_per_batch = epochs_per_batch
        self.minibatch_size = minibatch_size
        self.rollout_episodes = rollout_episodes
        self.token_scale = token_scale

    def _ppo_config(self) -> PpoConfig:
        return PpoConfig(
            learning_rate=self.learning_rate,
            clip=self.clip,
            entropy_coef=self.entropy_coef,
            gae_lambda=self.gae_lambda,
            epochs_per_batch=self.epochs_per_batch,
            minibatch_size=self.minibatch_size,
            rollout_episodes=self.rollout_episodes,
        )

    def fit(self, env: EnvConfig, seed: int = 0) -> "NeuralRouter":
        self.net_, self.train_run_ = train_agg(
            env,
            self.lambda_cost,
            self._ppo_config(),
            seed=seed,
            n_iterations=self.n_iterations,
            hidden=self.hidden,
            token_scale=self.token_scale,
        )
        self.max_steps_ = env.max_steps
        return self

    def _require_net(self) -> PolicyNet:
        if not hasattr(self, "net_"):
            raise NotFittedError("NeuralRouter has no trained net; call fit or load")
        return self.net_

    def decide(self, feats: AggFeatures) -> RoutingAction:
        net = self._require_net()
        x = normalize_features(feats, self.token_scale, getattr(self, "max_steps_", 30))
        logits, _, _ = net.forward(x[None, :])
        return _ACTIONS[int(np.argmax(logits[0]))]

    def episode_policy(self) -> Callable[[AggFeatures, TraceState], RoutingAction]:
        def _policy(feats: AggFeatures, trace: TraceState) -> RoutingAction:
            return self.decide(feats)

        return _policy

    # --- checkpointing -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        net = self._require_net()
        blob = {
            "format": "steproute-policy",
            "version": 1,
            "arch": {"input": INPUT_DIM, "hidden": list(net.hidden), "actions": N_ACTIONS},
            "normalization": {
                "token_scale": self.token_scale,
                "max_steps": getattr(self, "max_steps_", 30),
            },
            "lambda_cost": self.lambda_cost,
            "dtype": "<f8",
            "params": base64.b64encode(net.params.astype("<f8").tobytes()).decode("ascii"),
        }
        Path(path).write_text(json.dumps(blob), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "NeuralRouter":
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
        if blob.get("format") != "steproute-policy" or blob.get("version") != 1:
            raise InvariantViolation("format", "not a version-1 policy checkpoint")
        hidden = tuple(blob["arch"]["hidden"])
        raw = np.frombuffer(base64.b64decode(blob["params"]), dtype="<f8")
        router = cls(
            lambda_cost=blob.get("lambda_cost", 0.0),
            hidden=hidden,
            token_scale=blob["normalization"]["token_scale"],
        )
        router.net_ = PolicyNet(hidden, raw)  # validates the parameter count
        router.max_steps_ = blob["normalization"]["max_steps"]
        return router
