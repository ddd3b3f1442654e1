import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from steproute.errors import EmptyDataset
from steproute.seeding import substream
from steproute.simenv import run_episode
from steproute.threshold import (
    BinnedClassifier,
    BinnedRouter,
    OutcomeClass,
    ThresholdRouter,
    decide_binned,
    decide_threshold,
    fit_outcome_bins,
)
from steproute.trace import AggFeatures, RoutingAction

CONTINUE = RoutingAction.CONTINUE
REGENERATE = RoutingAction.REGENERATE


def feats(score, min_prev=1.0, tokens=10, step=1):
    return AggFeatures(score, min_prev, tokens, step)


class TestDecideThreshold:
    def test_below_threshold_regenerates(self):
        assert decide_threshold(0.5, feats(0.3)) is REGENERATE

    def test_boundary_is_strict(self):
        assert decide_threshold(0.5, feats(0.5)) is CONTINUE

    def test_zero_threshold_never_regenerates(self):
        for score in np.linspace(0, 1, 11):
            assert decide_threshold(0.0, feats(float(score))) is CONTINUE

    def test_takeover_latches(self):
        policy = ThresholdRouter(k=0.5, takeover=True)
        assert policy.decide(feats(0.9), escalated_before=True) is REGENERATE
        assert policy.decide(feats(0.9), escalated_before=False) is CONTINUE

    @given(
        st.floats(min_value=0.0, max_value=1.0),
        st.floats(min_value=0.0, max_value=1.0),
    )
    def test_regenerating_k_set_is_interval(self, score, k):
        # The set of thresholds that regenerate a fixed score is (score, 1].
        action = decide_threshold(k, feats(score))
        assert (action is REGENERATE) == (k > score)

    def test_get_params(self):
        assert ThresholdRouter(k=0.3).get_params() == {"k": 0.3, "takeover": False}


class TestAutomixFit:
    def test_single_class_data(self):
        clf = fit_outcome_bins([(0.9, OutcomeClass.WEAK_SOLVABLE)] * 4, n_bins=2)
        assert np.allclose(clf.bin_dist[1], [1, 0, 0])
        # Empty low bin inherits the (single-class) marginal.
        assert np.allclose(clf.bin_dist[0], [1, 0, 0])

    def test_half_split_within_bin(self):
        labeled = [(0.1, OutcomeClass.WEAK_SOLVABLE), (0.15, OutcomeClass.UNSOLVABLE)] * 5
        clf = fit_outcome_bins(labeled, n_bins=2)
        assert np.allclose(clf.bin_dist[0], [0.5, 0.5, 0.0])

    def test_single_bin_is_marginal(self):
        labeled = [
            (0.1, OutcomeClass.WEAK_SOLVABLE),
            (0.5, OutcomeClass.UNSOLVABLE),
            (0.9, OutcomeClass.STRONG_ONLY),
            (0.95, OutcomeClass.STRONG_ONLY),
        ]
        clf = fit_outcome_bins(labeled, n_bins=1)
        assert np.allclose(clf.bin_dist[0], [0.25, 0.25, 0.5])

    def test_empty_dataset(self):
        with pytest.raises(EmptyDataset):
            fit_outcome_bins([], n_bins=4)

    @given(
        st.lists(
            st.tuples(
                st.floats(min_value=0.0, max_value=1.0),
                st.integers(min_value=0, max_value=2),
            ),
            min_size=1,
            max_size=60,
        ),
        st.integers(min_value=1, max_value=12),
    )
    def test_rows_always_sum_to_one(self, labeled, n_bins):
        clf = fit_outcome_bins(labeled, n_bins=n_bins)
        assert np.allclose(clf.bin_dist.sum(axis=1), 1.0, atol=1e-9)

    def test_score_one_lands_in_top_bin(self):
        clf = fit_outcome_bins([(1.0, OutcomeClass.STRONG_ONLY)] * 3, n_bins=10)
        assert clf.bin_index(1.0) == 9


class TestDecideAutomix:
    def _clf(self, triple):
        return BinnedClassifier(n_bins=1, bin_dist=np.array([triple]))

    def test_no_gain_continues(self):
        assert decide_binned(self._clf([1, 0, 0]), 0.5, lam=0.1, expected_strong_tokens=30) is CONTINUE

    def test_pure_gain_free_regenerates(self):
        assert decide_binned(self._clf([0, 0, 1]), 0.5, lam=0.0, expected_strong_tokens=30) is REGENERATE

    def test_greedy_margin(self):
        clf = self._clf([0.5, 0.0, 0.5])
        # gain 0.5 vs cost 0.4
        assert decide_binned(clf, 0.5, lam=0.02, expected_strong_tokens=20) is REGENERATE
        # gain 0.5 vs cost 0.6
        assert decide_binned(clf, 0.5, lam=0.03, expected_strong_tokens=20) is CONTINUE

    def test_router_fit_decide(self):
        router = BinnedRouter(n_bins=2, lam=0.0).fit(
            [0.1, 0.2, 0.9, 0.8], [2, 2, 0, 0]
        )
        assert router.decide(0.1) is REGENERATE
        assert router.decide(0.9) is CONTINUE

    def test_classifier_json_round_trip(self, tmp_path):
        clf = fit_outcome_bins([(0.2, 1), (0.7, 0), (0.9, 2)], n_bins=4)
        path = tmp_path / "bins.json"
        clf.save(path)
        again = BinnedClassifier.load(path)
        assert again.n_bins == clf.n_bins
        assert np.array_equal(again.bin_dist, clf.bin_dist)


class TestSimulatorLevel:
    def test_takeover_dominates_cost_episode_by_episode(self, canonical_env):
        plain = ThresholdRouter(k=0.6, takeover=False)
        takeover = ThresholdRouter(k=0.6, takeover=True)
        for ep in range(200):
            rng_a = substream(42, "episodes", ep)
            rng_b = substream(42, "episodes", ep)
            cost_plain = run_episode(plain.episode_policy(), canonical_env, rng=rng_a).ledger
            cost_take = run_episode(takeover.episode_policy(), canonical_env, rng=rng_b).ledger
            assert cost_take.strong_tokens >= cost_plain.strong_tokens

    def test_cost_monotone_in_threshold(self, canonical_env):
        # Statistical check at module scale; the acceptance suite runs the
        # full-size version.
        ladder = [0.0, 0.3, 0.6, 0.9]
        means = []
        for k in ladder:
            router = ThresholdRouter(k=k)
            tokens = [
                run_episode(
                    router.episode_policy(), canonical_env, rng=substream(7, "episodes", ep)
                ).ledger.strong_tokens
                for ep in range(400)
            ]
            means.append((np.mean(tokens), np.std(tokens) / np.sqrt(len(tokens))))
        for (m0, s0), (m1, s1) in zip(means, means[1:]):
            assert m1 - m0 > -3 * np.hypot(s0, s1)
