import math

import numpy as np
import pytest

from steproute.distributions import Beta, Point, parse_dist
from steproute.errors import ConfigError, PolicyFailure, SteppedTerminal
from steproute.seeding import substream
from steproute.simenv import (
    EnvConfig,
    LatentClass,
    NoiseSpec,
    ScoreEmission,
    always,
    emit_score,
    latent_step,
    run_episode,
    run_episodes,
    step_distribution,
)
from steproute.trace import Origin, RoutingAction

CONTINUE = RoutingAction.CONTINUE
REGENERATE = RoutingAction.REGENERATE


def env(p_weak, p_strong, **kw):
    return EnvConfig(p_weak=p_weak, p_strong=p_strong, **kw)


class TestDistributions:
    def test_parse_round_trip(self):
        for obj in (
            {"kind": "beta", "a": 8, "b": 2},
            {"kind": "point", "value": 12},
            {"kind": "uniform_int", "lo": 6, "hi": 30},
            {"kind": "lognormal_int", "mu": 3.0, "sigma": 0.5, "min": 1},
        ):
            assert parse_dist(obj).to_dict() == obj

    def test_parse_errors_carry_path(self):
        with pytest.raises(ConfigError) as exc:
            parse_dist({"kind": "gamma"}, "env.horizon")
        assert "env.horizon" in str(exc.value)

    def test_beta_mean_monte_carlo(self):
        rng = np.random.default_rng(7)
        draws = Beta(8, 2).sample_many(rng, 100_000)
        assert abs(draws.mean() - 0.8) < 0.01

    def test_lognormal_int_support(self):
        rng = np.random.default_rng(0)
        from steproute.distributions import LogNormalInt

        draws = LogNormalInt(0.0, 2.0, min=1).sample_many(rng, 10_000)
        assert draws.min() >= 1


class TestLatentStep:
    def test_derailed_absorbing(self):
        rng = np.random.default_rng(1)
        cfg = env(0.5, 0.5)
        for action in (CONTINUE, REGENERATE):
            for _ in range(50):
                assert latent_step(LatentClass.DERAILED, action, cfg, rng) is LatentClass.DERAILED

    def test_regen_certain_success(self):
        rng = np.random.default_rng(2)
        cfg = env(0.5, 1.0)
        for _ in range(50):
            assert latent_step(LatentClass.SLIPPED, REGENERATE, cfg, rng) is LatentClass.ON_TRACK

    def test_terminal_rejected(self):
        with pytest.raises(SteppedTerminal):
            latent_step(LatentClass.DONE, CONTINUE, env(0.5, 0.5), np.random.default_rng(0))

    def test_monte_carlo_calibration(self):
        # Empirical continue-success frequency must match p_weak within 3 SE.
        cfg = env(0.8, 0.9)
        rng = np.random.default_rng(3)
        n = 100_000
        hits = sum(
            latent_step(LatentClass.ON_TRACK, CONTINUE, cfg, rng) is LatentClass.ON_TRACK
            for _ in range(n)
        )
        se = math.sqrt(0.8 * 0.2 / n)
        assert abs(hits / n - 0.8) < max(3 * se, 1e-4)
        assert abs(hits / n - 0.8) < 0.01

    def test_rows_sum_to_one(self):
        cfg = env(0.37, 0.81)
        for cls in (LatentClass.ON_TRACK, LatentClass.DERAILED, LatentClass.SLIPPED):
            for action in (CONTINUE, REGENERATE):
                row = step_distribution(cls, action, cfg)
                assert abs(sum(row.values()) - 1.0) < 1e-12
                assert all(p >= 0 for p in row.values())

    def test_slipped_continue_derails(self):
        row = step_distribution(LatentClass.SLIPPED, CONTINUE, env(0.9, 0.9))
        assert row == {LatentClass.DERAILED: 1.0}


class TestEmitScore:
    def test_point_mass_correct(self):
        em = ScoreEmission(Point(1.0), Point(0.0))
        rng = np.random.default_rng(0)
        assert emit_score(LatentClass.ON_TRACK, em, NoiseSpec(), rng) == 1.0

    def test_point_mass_incorrect(self):
        em = ScoreEmission(Point(1.0), Point(0.0))
        rng = np.random.default_rng(0)
        assert emit_score(LatentClass.SLIPPED, em, NoiseSpec(), rng) == 0.0
        assert emit_score(LatentClass.DERAILED, em, NoiseSpec(), rng) == 0.0

    def test_beta_mean(self):
        em = ScoreEmission(Beta(8, 2), Beta(2, 5))
        rng = np.random.default_rng(11)
        draws = [emit_score(LatentClass.ON_TRACK, em, NoiseSpec(), rng) for _ in range(100_000)]
        assert abs(np.mean(draws) - 0.8) < 0.01

    def test_noise_clamped(self):
        em = ScoreEmission(Point(0.99), Point(0.0))
        noise = NoiseSpec(mode="extra_variance", scale=5.0)
        rng = np.random.default_rng(5)
        draws = [emit_score(LatentClass.ON_TRACK, em, noise, rng) for _ in range(500)]
        assert max(draws) <= 1.0 and min(draws) >= 0.0
        assert len(set(draws)) > 10  # noise actually perturbs

    def test_miscalibration_shift(self):
        em = ScoreEmission(Point(0.5), Point(0.0))
        noise = NoiseSpec(mode="miscalibration", shift=0.2)
        rng = np.random.default_rng(5)
        assert emit_score(LatentClass.ON_TRACK, em, noise, rng) == pytest.approx(0.7)


class TestRunEpisode:
    def test_perfect_weak_always_continue(self):
        cfg = env(1.0, 0.5)
        res = run_episode(always(CONTINUE), cfg, rng=np.random.default_rng(0))
        assert res.final_reward == 1
        assert res.ledger.strong_tokens == 0
        assert res.ledger.regenerate_count == 0

    def test_perfect_strong_always_regen(self):
        cfg = env(0.0, 1.0)
        res = run_episode(always(REGENERATE), cfg, lam=0.0, rng=np.random.default_rng(1))
        assert res.final_reward == 1
        assert res.ledger.strong_tokens > 0

    def test_no_correct_step_possible(self):
        cfg = env(0.0, 0.0)
        for policy in (always(CONTINUE), always(REGENERATE)):
            res = run_episode(policy, cfg, rng=np.random.default_rng(2))
            assert res.final_reward == 0

    def test_ledger_matches_trace(self, canonical_env):
        router_rng = np.random.default_rng(3)

        def coin_policy(feats, trace):
            return REGENERATE if router_rng.random() < 0.3 else CONTINUE

        res = run_episode(coin_policy, canonical_env, rng=np.random.default_rng(4))
        strong_sum = sum(s.token_count for s in res.trace.steps if s.origin is Origin.STRONG)
        assert res.ledger.strong_tokens == strong_sum
        assert res.ledger.regenerate_count == sum(
            1 for s in res.trace.steps if s.origin is Origin.STRONG
        )

    def test_derailed_stays_derailed(self, canonical_env):
        # Irrecoverability at episode level: once DERAILED appears in the
        # latent path of a continue-only run, everything after is DERAILED.
        for seed in range(30):
            res = run_episode(always(CONTINUE), canonical_env, rng=np.random.default_rng(seed))
            seen = False
            for cls in res.latent_path:
                if cls is LatentClass.DERAILED:
                    seen = True
                elif seen:
                    pytest.fail("left the derailed class")

    def test_reward_iff_final_on_track(self, canonical_env):
        for seed in range(30):
            res = run_episode(always(CONTINUE), canonical_env, rng=np.random.default_rng(seed))
            assert res.final_reward == int(res.latent_path[-1] is LatentClass.ON_TRACK)

    def test_seeded_determinism(self, canonical_env):
        def policy(feats, trace):
            return REGENERATE if feats.current_score < 0.5 else CONTINUE

        a = run_episode(policy, canonical_env, lam=1e-4, rng=substream(77, "ep", 0))
        b = run_episode(policy, canonical_env, lam=1e-4, rng=substream(77, "ep", 0))
        assert a == b

    def test_policy_failure_propagates(self, canonical_env):
        def broken(feats, trace):
            raise ValueError("boom")

        with pytest.raises(PolicyFailure):
            run_episode(broken, canonical_env, rng=np.random.default_rng(0))

    def test_rl_return(self):
        cfg = env(0.0, 1.0, weak_token_dist=Point(10), strong_token_dist=Point(20),
                  horizon_dist=Point(4))
        res = run_episode(always(REGENERATE), cfg, lam=0.01, rng=np.random.default_rng(0))
        assert res.ledger.strong_tokens == 80
        assert res.rl_return == pytest.approx(1 - 0.01 * 80)

    def test_truth_labels_present(self, canonical_env):
        res = run_episode(always(CONTINUE), canonical_env, rng=np.random.default_rng(9))
        assert all(s.truth is not None for s in res.trace.steps)

    def test_run_episodes_order_independent(self, canonical_env):
        def factory():
            return always(CONTINUE)

        results = run_episodes(factory, canonical_env, 5, master_seed=123)
        # Re-running a single episode by index reproduces the batch entry.
        solo = run_episode(
            always(CONTINUE), canonical_env, rng=substream(123, "episodes", 3), query_id="q3"
        )
        assert results[3] == solo


class TestEnvConfigJson:
    def test_round_trip(self, canonical_env):
        d = canonical_env.to_dict()
        again = EnvConfig.from_dict(d)
        assert again.to_dict() == d

    def test_error_paths(self):
        with pytest.raises(ConfigError) as exc:
            EnvConfig.from_dict({"p_weak": 0.5, "p_strong": 0.9, "emission": {"correct": {"kind": "beta", "a": -1, "b": 2}, "incorrect": {"kind": "beta", "a": 2, "b": 5}}})
        assert "emission.correct" in str(exc.value)

    def test_missing_field(self):
        with pytest.raises(ConfigError) as exc:
            EnvConfig.from_dict({"p_weak": 0.5})
        assert "p_strong" in str(exc.value)
