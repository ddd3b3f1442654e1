"""steproute: step-level routing between a cheap and an expensive generator.

The engine decides, per reasoning step, whether to accept the cheap
generator's proposal or regenerate it with the expensive one, and evaluates
the resulting cost-performance trade-off.  Three policy families are
provided: score thresholding (plus a binned greedy baseline), a PPO-trained
feature policy, and a belief-filtering planner over latent correctness
classes.
"""

__version__ = "0.1.0"

from .errors import SteprouteError
from .metrics import (
    SweepPoint,
    TradeoffCurve,
    budgeted_accuracy,
    cpt,
    ibc_delta,
    metric_report,
    min_score_auc,
    pgr,
)
from .neural import (
    NeuralRouter,
    PolicyNet,
    PpoConfig,
    RolloutBatch,
    TrainRun,
    compute_gae,
    net_forward,
    ppo_update,
    train_agg,
)
from .pomdp import (
    AlphaPolicy,
    Belief,
    DiscreteObservationModel,
    LookupTable,
    ObservationModel,
    PomdpRouter,
    PomdpSpec,
    ReflectedKde2D,
    belief_update,
    decide_pomdp,
    discretize,
    estimate_accuracies,
    filter_trace,
    fit_observation_model,
    observation_likelihood,
    precompute_lookup,
    solve,
    transition_dist,
)
from .simenv import (
    EnvConfig,
    EpisodeResult,
    LatentClass,
    NoiseSpec,
    ScoreEmission,
    emit_score,
    latent_step,
    run_episode,
    run_episodes,
)
from .threshold import (
    BinnedClassifier,
    BinnedRouter,
    OutcomeClass,
    ThresholdRouter,
    decide_binned,
    decide_threshold,
    fit_outcome_bins,
)
from .trace import (
    AggFeatures,
    CostLedger,
    Origin,
    RoutingAction,
    StepRecord,
    TraceState,
    Truth,
    aggregate_features,
    append_step,
    replay_load,
    write_traces_jsonl,
)
