"""Belief- and choice-based measurement from token-level log-probabilities.

One generation run yields two readings of a model's decision among a fixed
alternative set: the sampled pivot token (its choice) and the recorded
probability mass over the alternatives at that pivot (its belief). This
package extracts both from runs, compares their statistical behavior as
estimators, and drives a logit demand study that quantifies how many runs
each measure needs. A scripted, fully-controlled stochastic language model
supplies exact ground truth for every statistical claim; an ingest layer
accepts real chat-completion logprob data through the same pipeline.
"""

from .beliefs import (
    AlternativeSet,
    AmbiguousPivotError,
    BeliefVector,
    MassTooSmallError,
    NoPivotError,
    PivotError,
    PivotResult,
    detect_pivot,
    extract_belief,
    extract_choice,
)
from .estimators import (
    CovMatrix,
    RunPool,
    RunRecord,
    ShareVector,
    chebyshev_run_count,
    empirical_belief_share,
    empirical_choice_share,
    equivalence_gap,
    loewner_gap,
    sample_covariance,
    sample_variance,
    write_share_table,
)
from .generation import (
    GenerationRun,
    LmSpecError,
    SamplingConfig,
    ScriptedLm,
    Template,
    build_scripted_lm,
    generate_run,
    sample_token,
    softmax_with_temperature,
    temper_probs,
)
from .ingest import (
    DEFAULT_PROMPT,
    PromptTemplate,
    RunFileError,
    WireRequest,
    WireSchemaError,
    build_request,
    load_runs,
    parse_response,
    persist_runs,
)
from .mnl import (
    FitResult,
    MnlDataset,
    MnlParams,
    Scenario,
    choice_probabilities,
    dataset_from_pool,
    fit_mle,
    log_likelihood,
    logit_shares,
    observed_information,
    param_order,
    predict_metrics,
    score,
    utilities,
)
from .study import (
    DEFAULT_CALIBRATION,
    AccuracyCurve,
    DrawSummary,
    MeasureComparison,
    ScenarioGrid,
    SplitSpec,
    SweepPoint,
    accuracy_curve,
    bootstrap_estimates,
    build_scenarios,
    collect_runs,
    default_alternatives,
    default_oracle,
    split_train_test,
    temperature_sweep,
    write_figure3_csv,
    write_figure4_csv,
    write_table2_csv,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
