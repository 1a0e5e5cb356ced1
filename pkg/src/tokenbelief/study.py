"""End-to-end demand-study harness over the scripted oracle or ingested runs.

Builds the price-scenario grid, collects runs into pools, resamples them into
bootstrap draws, fits the logit model under both response measures, and emits
the CSV tables behind the study figures. Every stochastic step is a pure
function of the user seed plus contextual indices, so whole studies rerun
bit-identically.
"""

from __future__ import annotations

import math
import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import _rng, ingest, mnl
from .beliefs import (
    AlternativeSet,
    AmbiguousPivotError,
    MassTooSmallError,
    PivotError,
    detect_pivot,
    extract_belief,
)
from .estimators import ExtractionDiagnostics, RunPool, _ScenarioBlock
from .generation import SamplingConfig, ScriptedLm, build_scripted_lm
from .mnl import MnlParams, Scenario, logit_shares, utilities

DEFAULT_RUN_GRID = (1, 2, 3, 5, 8, 13, 21, 34, 55, 89, 144, 233, 377, 610, 1000)

#: Calibration target for the bundled oracle: two brand intercepts and the
#: price slope that generate its per-scenario beliefs.
DEFAULT_CALIBRATION = MnlParams(alpha={"Pampers": 32.016, "Huggies": 29.444}, beta=-0.463)


def default_alternatives() -> AlternativeSet:
    """Alternative set of the bundled diaper study (focal brand carries two marker surface forms)."""
    return AlternativeSet.from_single_tokens(
        {"Pampers": ("P", "Pamp"), "Huggies": ("H",), "neither": ("N",)}
    )


@dataclass(frozen=True)
class ScenarioGrid:
    """Price grid: the focal brand's price sweeps, the competitor's stays fixed.

    The first alternative is the focal brand, the last is the outside option,
    and any in between take the competitor price.
    """

    focal_prices: tuple[float, ...] = tuple(float(p) for p in range(25, 41))
    competitor_price: float = 30.0
    alternatives: AlternativeSet = field(default_factory=default_alternatives)

    def __post_init__(self) -> None:
        if not self.focal_prices:
            raise ValueError("focal price list must be non-empty")
        if any(b <= a for a, b in zip(self.focal_prices, self.focal_prices[1:])):
            raise ValueError("focal prices must be strictly increasing")


def price_label(price: float) -> str:
    return f"{price:g}"


def build_scenarios(grid: ScenarioGrid) -> list[Scenario]:
    """One scenario per focal price; competitor fixed, outside at price zero."""
    names = grid.alternatives.alternatives
    focal, outside = names[0], names[-1]
    scenarios = []
    for price in grid.focal_prices:
        prices = {focal: float(price)}
        for mid in names[1:-1]:
            prices[mid] = float(grid.competitor_price)
        prices[outside] = 0.0
        scenarios.append(Scenario(scenario_id=price_label(price), prices=prices, outside=outside))
    return scenarios


@dataclass(frozen=True)
class SplitSpec:
    """Focal prices held out for out-of-sample evaluation."""

    test_prices: frozenset[float] = frozenset({28.0, 31.0, 37.0})


def split_train_test(
    scenarios: Sequence[Scenario], split: SplitSpec
) -> tuple[list[Scenario], list[Scenario]]:
    """Disjoint (train, test) partition of the grid by focal price."""
    if not scenarios:
        raise ValueError("scenario list is empty")
    focal = next(iter(scenarios[0].prices))
    grid_prices = {sc.prices[focal] for sc in scenarios}
    unknown = set(split.test_prices) - grid_prices
    if unknown:
        raise ValueError(f"test prices not on the grid: {sorted(unknown)}")
    train = [sc for sc in scenarios if sc.prices[focal] not in split.test_prices]
    test = [sc for sc in scenarios if sc.prices[focal] in split.test_prices]
    return train, test


def default_oracle(
    grid: ScenarioGrid | None = None,
    calibration: MnlParams = DEFAULT_CALIBRATION,
    tilt: float = 0.5,
    tilt_weight: float = 0.6,
) -> ScriptedLm:
    """Scripted oracle whose mean belief per scenario is exactly the calibrated logit model.

    Two templates with different prefix lengths make the pivot position vary
    across runs. The first template's beliefs are the calibrated shares tilted
    by ``tilt`` utility units toward the focal brand; the second template's
    beliefs absorb the residual so the weighted mixture reproduces the
    calibrated shares exactly, keeping the calibration the true generating
    value for both measures while beliefs still vary with the prefix.
    """
    grid = grid or ScenarioGrid()
    names = grid.alternatives.alternatives
    focal = names[0]
    w1 = tilt_weight
    tilted_rows: dict[str, dict[str, float]] = {}
    residual_rows: dict[str, dict[str, float]] = {}
    for sc in build_scenarios(grid):
        u = utilities(calibration, sc)
        base = logit_shares(u)
        tilted = logit_shares({a: v + (tilt if a == focal else 0.0) for a, v in u.items()})
        residual = {a: (base[a] - w1 * tilted[a]) / (1.0 - w1) for a in names}
        low = min(residual.values())
        if low < -1e-12:
            raise ValueError(
                f"tilt {tilt} with weight {w1} leaves a negative residual belief ({low}) "
                f"at scenario {sc.scenario_id}"
            )
        residual = {a: max(v, 0.0) for a, v in residual.items()}
        total = sum(residual.values())
        residual_rows[sc.scenario_id] = {a: v / total for a, v in residual.items()}
        tilted_rows[sc.scenario_id] = tilted
    spec = {
        "templates": [
            {
                "prefix": ["I", " would", " choose", " **"],
                "weight": w1,
                "pivot_beliefs": tilted_rows,
            },
            {
                "prefix": ["I", " would", " choose", " to", " buy", " **"],
                "weight": 1.0 - w1,
                "pivot_beliefs": residual_rows,
            },
        ],
        "markers": {alt: list(grid.alternatives.first_tokens(alt)) for alt in names},
    }
    return build_scripted_lm(spec)


# -- run collection ---------------------------------------------------------


def _scenario_ids(scenarios) -> list[str]:
    ids = []
    for sc in scenarios:
        ids.append(sc.scenario_id if isinstance(sc, Scenario) else str(sc))
    return ids


def _oracle_blocks(
    lm: ScriptedLm,
    scenario_ids: Sequence[str],
    n_runs: int,
    config: SamplingConfig,
    alternatives: AlternativeSet,
    diagnostics: ExtractionDiagnostics,
) -> dict[str, _ScenarioBlock]:
    """Vectorized oracle collection.

    Each run's uniforms come from its own counter block, so this path yields
    records identical to generating runs one at a time; the per-(template,
    marker) extraction results are computed once through the genuine
    detect/extract pipeline and then broadcast.
    """
    n_templates = len(lm.templates)
    blocks: dict[str, _ScenarioBlock] = {}
    for sid in scenario_ids:
        max_markers = max(len(lm._pivot[t][sid][0]) for t in range(n_templates))
        choice_table = np.full((n_templates, max_markers), -1, dtype=np.int64)
        belief_table = np.zeros((n_templates, len(alternatives.alternatives)))
        pivot_table = np.zeros(n_templates, dtype=np.int64)
        template_ok = np.zeros(n_templates, dtype=bool)
        truncated = np.zeros(n_templates, dtype=bool)
        for t in range(n_templates):
            tokens, probs, _ = lm._pivot[t][sid]
            try:
                sample = lm.assemble_run(t, tokens[0], sid, config, run_index=0)
                belief = extract_belief(sample, alternatives)
            except (MassTooSmallError, PivotError):
                continue
            template_ok[t] = True
            truncated[t] = bool(belief.truncation_flags)
            belief_table[t] = belief.as_array()
            for m, (token, p) in enumerate(zip(tokens, probs)):
                run = lm.assemble_run(t, token, sid, config, run_index=0)
                pivot = detect_pivot(run.tokens, alternatives)
                choice_table[t, m] = alternatives.index(pivot.alternative)
                pivot_table[t] = pivot.pivot_index

        if config.temperature == 0.0:
            t_idx, marker = lm.sample_outcome(sid, 0.0, 0.0, 0.0)
            template_idx = np.full(n_runs, t_idx, dtype=np.int64)
            local = lm._pivot[t_idx][sid][0].index(marker)
            marker_idx = np.full(n_runs, local, dtype=np.int64)
        else:
            uniforms = _rng.run_uniforms(config.seed, sid, n_runs)
            weights_cum, pivot_cums = lm._tempered_arrays(config.temperature)
            template_idx = np.minimum(
                np.searchsorted(weights_cum, uniforms[:, 0], side="right"), n_templates - 1
            )
            marker_idx = np.zeros(n_runs, dtype=np.int64)
            for t in range(n_templates):
                mask = template_idx == t
                if not mask.any():
                    continue
                cum = pivot_cums[t][sid]
                marker_idx[mask] = np.minimum(
                    np.searchsorted(cum, uniforms[mask, 1], side="right"), len(cum) - 1
                )

        keep = template_ok[template_idx]
        dropped = int(n_runs - keep.sum())
        n_truncated = int(truncated[template_idx[keep]].sum())
        if dropped or n_truncated:
            row = diagnostics.by_scenario.setdefault(
                sid, {"no_pivot": 0, "ambiguous_pivot": 0, "mass_too_small": 0, "truncated_runs": 0}
            )
            diagnostics.mass_too_small += dropped
            row["mass_too_small"] += dropped
            diagnostics.truncated_runs += n_truncated
            row["truncated_runs"] += n_truncated
        blocks[sid] = _ScenarioBlock(
            run_index=np.arange(n_runs, dtype=np.int64)[keep],
            choice_idx=choice_table[template_idx[keep], marker_idx[keep]],
            beliefs=belief_table[template_idx[keep]],
            pivot_index=pivot_table[template_idx[keep]],
        )
    return blocks


def _file_blocks(
    path,
    scenario_ids: Sequence[str] | None,
    runs_per_scenario: int | None,
    alternatives: AlternativeSet,
    diagnostics: ExtractionDiagnostics,
) -> dict[str, _ScenarioBlock]:
    runs = ingest.load_runs(path)
    grouped: dict[str, list] = {}
    for run in runs:
        grouped.setdefault(run.scenario_id, []).append(run)
    ids = list(scenario_ids) if scenario_ids is not None else list(grouped)
    blocks = {}
    for sid in ids:
        rows = []
        for run in grouped.get(sid, []):
            try:
                pivot = detect_pivot(run.tokens, alternatives)
                belief = extract_belief(run, alternatives)
            except MassTooSmallError:
                diagnostics.note(sid, "mass_too_small")
                continue
            except AmbiguousPivotError:
                diagnostics.note(sid, "ambiguous_pivot")
                continue
            except PivotError:
                diagnostics.note(sid, "no_pivot")
                continue
            if belief.truncation_flags:
                diagnostics.note(sid, "truncated_runs")
            rows.append((run.run_index, alternatives.index(pivot.alternative), belief.as_array(), pivot.pivot_index))
            if runs_per_scenario is not None and len(rows) == runs_per_scenario:
                break
        if runs_per_scenario is not None and len(rows) < runs_per_scenario:
            raise ValueError(
                f"scenario {sid!r} has only {len(rows)} usable runs, "
                f"{runs_per_scenario} requested"
            )
        blocks[sid] = _ScenarioBlock(
            run_index=np.array([r[0] for r in rows], dtype=np.int64),
            choice_idx=np.array([r[1] for r in rows], dtype=np.int64),
            beliefs=np.vstack([r[2] for r in rows]) if rows else np.zeros((0, len(alternatives.alternatives))),
            pivot_index=np.array([r[3] for r in rows], dtype=np.int64),
        )
    return blocks


def collect_runs(
    source,
    scenarios,
    runs_per_scenario: int | None,
    config: SamplingConfig,
    alternatives: AlternativeSet | None = None,
) -> RunPool:
    """Collect extraction records into a pool.

    ``source`` is either a :class:`ScriptedLm` (runs are simulated) or a path
    to a JSONL run file (runs are loaded and extracted; pass the alternative
    set explicitly). ``scenarios`` may hold Scenario objects or plain ids;
    ``None`` means every scenario the source knows. Runs that fail pivot or
    belief extraction are excluded and tallied in the pool diagnostics.
    """
    if runs_per_scenario is not None and runs_per_scenario < 1:
        raise ValueError("runs_per_scenario must be at least 1")
    diagnostics = ExtractionDiagnostics()
    if isinstance(source, ScriptedLm):
        if runs_per_scenario is None:
            raise ValueError("runs_per_scenario is required when simulating")
        if alternatives is None:
            alternatives = AlternativeSet.from_single_tokens(source.markers)
        ids = _scenario_ids(scenarios) if scenarios is not None else list(source.scenario_ids)
        blocks = _oracle_blocks(source, ids, runs_per_scenario, config, alternatives, diagnostics)
    else:
        if alternatives is None:
            raise ValueError("an AlternativeSet is required when reading a run file")
        ids = _scenario_ids(scenarios) if scenarios is not None else None
        blocks = _file_blocks(source, ids, runs_per_scenario, alternatives, diagnostics)
    return RunPool(alternatives, blocks, diagnostics)


# -- bootstrap machinery ----------------------------------------------------


@dataclass(frozen=True)
class ParamSummary:
    mean_estimate: float
    mean_se: float
    mean_p: float
    sd_over_draws: float


@dataclass(frozen=True)
class DrawSummary:
    """Aggregates of one measure's fits across bootstrap draws at a fixed run count."""

    measure: str
    runs_per_scenario: int
    n_draws: int
    params: dict[str, ParamSummary]
    mean_log_likelihood: float
    mean_rmse: float
    mean_mae: float
    rmse_diff: float
    mae_diff: float
    rmse_t_stat: float | None = None
    rmse_p_value: float | None = None
    mae_t_stat: float | None = None
    mae_p_value: float | None = None


@dataclass(frozen=True)
class MeasureComparison:
    """Paired bootstrap summaries for both measures plus the equality test of the price slope.

    The slope-equality test is a two-tailed Wald test of the two mean
    estimates scaled by their mean standard errors. A test against the
    across-draw spread would be inconsistent under pool resampling: the two
    measures' draws concentrate on their respective full-pool fits, whose gap
    is a fixed pool-level quantity, so any nonzero gap rejects once enough
    draws accumulate regardless of how close the estimates are.
    """

    choice: DrawSummary
    belief: DrawSummary
    beta_t_stat: float
    beta_p_value: float


def draw_indices(seed: int, draw: int, scenario_id: str, n_available: int, k: int) -> np.ndarray:
    """Record selection for one (draw, scenario): k indices with replacement.

    A pure function of (seed, draw, scenario), so any draw can be reproduced
    in isolation and both measures consume identical resamples.
    """
    gen = _rng.stream(seed, _rng.TAG_BOOTSTRAP, draw, _rng.key_for(scenario_id))
    return gen.integers(0, n_available, size=k)


def _paired_t(diffs: np.ndarray) -> tuple[float, float]:
    """One-tailed paired t-test that the mean difference is positive."""
    n = len(diffs)
    sd = float(np.std(diffs, ddof=1))
    mean = float(np.mean(diffs))
    if sd == 0.0:
        if mean > 0:
            return math.inf, 0.0
        return (0.0, 0.5) if mean == 0 else (-math.inf, 1.0)
    t_stat = mean / (sd / math.sqrt(n))
    return t_stat, float(stats.t.sf(t_stat, df=n - 1))


def _wald_equality(mean_a: float, se_a: float, mean_b: float, se_b: float) -> tuple[float, float]:
    """Two-tailed Wald test that two estimates are equal, scaled by their standard errors."""
    denom = math.sqrt(se_a**2 + se_b**2)
    if not math.isfinite(denom) or denom == 0.0:
        return 0.0, 1.0
    t_stat = (mean_a - mean_b) / denom
    return t_stat, float(2.0 * stats.norm.sf(abs(t_stat)))


class _StudyFitter:
    """Shared context for resampled fits: design matrices and the test-set ground truth."""

    def __init__(self, pool, train_scenarios, test_scenarios, max_iter=500, grad_tol=1e-8):
        self.pool = pool
        self.train = list(train_scenarios)
        self.test = list(test_scenarios)
        self.design = mnl._Design(self.train)
        self.test_design = mnl._Design(self.test)
        self.max_iter = max_iter
        self.grad_tol = grad_tol
        missing = [sc.scenario_id for sc in self.train + self.test if sc.scenario_id not in pool.scenarios()]
        if missing:
            raise ValueError(f"pool lacks scenarios: {missing}")
        self.observed_test = np.vstack(
            [
                pool.choice_indicators(sc.scenario_id).mean(axis=0)
                for sc in self.test
            ]
        )
        self._choice_idx = {sc.scenario_id: pool.choice_indices(sc.scenario_id) for sc in self.train}
        self._beliefs = {sc.scenario_id: pool.beliefs(sc.scenario_id) for sc in self.train}
        self.n_alts = len(pool.alternatives.alternatives)

    def weights_for(self, measure: str, selection: dict[str, np.ndarray]) -> np.ndarray:
        D = np.zeros((len(self.train), self.n_alts))
        for s, sc in enumerate(self.train):
            idx = selection[sc.scenario_id]
            if measure == "choice":
                D[s] = np.bincount(self._choice_idx[sc.scenario_id][idx], minlength=self.n_alts)
            else:
                D[s] = self._beliefs[sc.scenario_id][idx].sum(axis=0)
        return D

    def full_weights(self, measure: str) -> np.ndarray:
        selection = {
            sc.scenario_id: np.arange(len(self._choice_idx[sc.scenario_id]))
            for sc in self.train
        }
        return self.weights_for(measure, selection)

    def metrics_for(self, theta: np.ndarray) -> tuple[float, float]:
        predicted = np.exp(self.test_design.log_probs(theta))
        errors = (predicted - self.observed_test).ravel()
        return float(np.sqrt(np.mean(errors**2))), float(np.mean(np.abs(errors)))

    def fit(self, D: np.ndarray, init: np.ndarray) -> mnl.FitResult:
        return mnl._fit_design(
            self.design, D, max_iter=self.max_iter, grad_tol=self.grad_tol, init=init
        )

    def maximize(self, D: np.ndarray, init: np.ndarray) -> np.ndarray:
        return mnl._maximize(self.design, D, init, self.max_iter, self.grad_tol).theta


def _run_draws(n_draws: int, workers: int, task) -> None:
    if workers <= 1:
        for d in range(n_draws):
            task(d)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(task, range(n_draws)))


def bootstrap_estimates(
    pool: RunPool,
    train_scenarios: Sequence[Scenario],
    test_scenarios: Sequence[Scenario],
    runs_per_scenario: int,
    n_draws: int,
    measure: str,
    seed: int,
    max_iter: int = 500,
    workers: int = 1,
):
    """Resample the pool, refit per draw, and aggregate across draws.

    Each draw selects ``runs_per_scenario`` records per training scenario with
    replacement (the same records for both measures), fits from a random
    initial point shared across measures, and scores predictions on the full
    ground-truth choice shares of the test scenarios. ``rmse_diff``/``mae_diff``
    compare each measure's mean metric to the benchmark fit on the full
    training pool under the choice measure. With ``measure="both"`` the return
    value is a :class:`MeasureComparison` carrying one-tailed paired tests of
    the metric differences and a two-tailed Welch test of price-slope equality.
    """
    if runs_per_scenario < 1:
        raise ValueError("runs_per_scenario must be at least 1")
    if n_draws < 1:
        raise ValueError("n_draws must be at least 1")
    if measure not in ("choice", "belief", "both"):
        raise ValueError(f"measure must be 'choice', 'belief' or 'both', got {measure!r}")
    fitter = _StudyFitter(pool, train_scenarios, test_scenarios, max_iter=max_iter)
    measures = ("choice", "belief") if measure == "both" else (measure,)

    bench_init = _rng.stream(seed, _rng.TAG_BENCHMARK).uniform(-1.0, 1.0, len(fitter.design.param_names))
    bench_theta = fitter.maximize(fitter.full_weights("choice"), bench_init)
    bench_rmse, bench_mae = fitter.metrics_for(bench_theta)

    names = fitter.design.param_names
    counts = {sc.scenario_id: pool.n_runs(sc.scenario_id) for sc in fitter.train}
    results = {
        m: {
            "estimates": np.zeros((n_draws, len(names))),
            "ses": np.zeros((n_draws, len(names))),
            "ps": np.zeros((n_draws, len(names))),
            "ll": np.zeros(n_draws),
            "rmse": np.zeros(n_draws),
            "mae": np.zeros(n_draws),
        }
        for m in measures
    }

    def one_draw(d: int) -> None:
        selection = {
            sid: draw_indices(seed, d, sid, counts[sid], runs_per_scenario)
            for sid in counts
        }
        init = _rng.stream(seed, _rng.TAG_INIT, d).uniform(-1.0, 1.0, len(names))
        for m in measures:
            fit = fitter.fit(fitter.weights_for(m, selection), init)
            theta = fitter.design.theta_of(fit.params)
            rmse, mae = fitter.metrics_for(theta)
            slot = results[m]
            slot["estimates"][d] = theta
            slot["ses"][d] = [fit.std_errors[n] for n in names]
            slot["ps"][d] = [fit.p_values[n] for n in names]
            slot["ll"][d] = fit.log_likelihood
            slot["rmse"][d] = rmse
            slot["mae"][d] = mae

    _run_draws(n_draws, workers, one_draw)

    def summarize(m: str, extra: dict) -> DrawSummary:
        slot = results[m]
        params = {}
        for i, name in enumerate(names):
            params[name] = ParamSummary(
                mean_estimate=float(slot["estimates"][:, i].mean()),
                mean_se=float(slot["ses"][:, i].mean()),
                mean_p=float(slot["ps"][:, i].mean()),
                sd_over_draws=float(np.std(slot["estimates"][:, i], ddof=1)) if n_draws > 1 else 0.0,
            )
        return DrawSummary(
            measure=m,
            runs_per_scenario=runs_per_scenario,
            n_draws=n_draws,
            params=params,
            mean_log_likelihood=float(slot["ll"].mean()),
            mean_rmse=float(slot["rmse"].mean()),
            mean_mae=float(slot["mae"].mean()),
            rmse_diff=float(slot["rmse"].mean() - bench_rmse),
            mae_diff=float(slot["mae"].mean() - bench_mae),
            **extra,
        )

    if measure != "both":
        return summarize(measure, {})

    rmse_t, rmse_p = _paired_t(results["choice"]["rmse"] - results["belief"]["rmse"])
    mae_t, mae_p = _paired_t(results["choice"]["mae"] - results["belief"]["mae"])
    extra = {
        "rmse_t_stat": rmse_t,
        "rmse_p_value": rmse_p,
        "mae_t_stat": mae_t,
        "mae_p_value": mae_p,
    }
    choice_summary = summarize("choice", extra)
    belief_summary = summarize("belief", extra)
    beta_t, beta_p = _wald_equality(
        choice_summary.params["beta"].mean_estimate,
        choice_summary.params["beta"].mean_se,
        belief_summary.params["beta"].mean_estimate,
        belief_summary.params["beta"].mean_se,
    )
    return MeasureComparison(
        choice=choice_summary,
        belief=belief_summary,
        beta_t_stat=beta_t,
        beta_p_value=beta_p,
    )


@dataclass(frozen=True)
class AccuracyCurve:
    """Probability that the fitted price slope lands within tolerance, per run count."""

    measure: str
    tolerance_fraction: float
    confidence: float
    points: tuple[tuple[int, float], ...]
    min_runs_at_confidence: int | None


def accuracy_curve(
    pool: RunPool,
    train_scenarios: Sequence[Scenario],
    truth_beta: float,
    tolerance_fraction: float,
    confidence: float,
    measure: str,
    n_draws: int,
    seed: int,
    run_grid: Sequence[int] | None = None,
    max_iter: int = 500,
    workers: int = 1,
) -> AccuracyCurve:
    """Estimate Pr(|fitted slope - truth| <= tolerance_fraction*|truth|) per run count.

    Draws are pure functions of (seed, run count, draw, scenario), independent
    across grid points. ``min_runs_at_confidence`` is the smallest grid entry
    whose probability reaches ``confidence`` (None when none does).
    """
    if truth_beta == 0:
        raise ValueError("truth_beta must be nonzero")
    if measure not in ("choice", "belief"):
        raise ValueError(f"measure must be 'choice' or 'belief', got {measure!r}")
    if not (0 < confidence < 1):
        raise ValueError("confidence must lie in (0, 1)")
    grid = tuple(run_grid) if run_grid is not None else DEFAULT_RUN_GRID
    # Test scenarios are irrelevant here; reuse the train list to satisfy the fitter.
    fitter = _StudyFitter(pool, train_scenarios, train_scenarios, max_iter=max_iter)
    names = fitter.design.param_names
    counts = {sc.scenario_id: pool.n_runs(sc.scenario_id) for sc in fitter.train}
    tolerance = tolerance_fraction * abs(truth_beta)
    points = []
    for k in grid:
        hits = np.zeros(n_draws, dtype=bool)

        def one_draw(d: int, k: int = k, hits: np.ndarray = hits) -> None:
            selection = {
                sid: np.asarray(
                    _rng.stream(seed, _rng.TAG_CURVE, k, d, _rng.key_for(sid)).integers(
                        0, counts[sid], size=k
                    )
                )
                for sid in counts
            }
            init = _rng.stream(seed, _rng.TAG_INIT, k, d).uniform(-1.0, 1.0, len(names))
            theta = fitter.maximize(fitter.weights_for(measure, selection), init)
            hits[d] = abs(theta[-1] - truth_beta) <= tolerance

        _run_draws(n_draws, workers, one_draw)
        points.append((int(k), float(hits.mean())))
    min_runs = next((k for k, p in points if p >= confidence), None)
    return AccuracyCurve(
        measure=measure,
        tolerance_fraction=tolerance_fraction,
        confidence=confidence,
        points=tuple(points),
        min_runs_at_confidence=min_runs,
    )


@dataclass(frozen=True)
class SweepPoint:
    temperature: float
    measure: str
    mean: float
    sd: float


def temperature_sweep(
    lm: ScriptedLm,
    scenario_id: str,
    temperatures: Sequence[float],
    runs_per_point: int,
    seed: int,
    alternative: str | None = None,
) -> list[SweepPoint]:
    """Mean and standard deviation of one alternative's share under both measures, per temperature."""
    alternatives = AlternativeSet.from_single_tokens(lm.markers)
    target = alternative if alternative is not None else lm.alternatives[0]
    j = alternatives.index(target)
    rows = []
    for temp in temperatures:
        config = SamplingConfig(temperature=float(temp), seed=seed)
        pool = collect_runs(lm, [scenario_id], runs_per_point, config, alternatives)
        indicator = (pool.choice_indices(scenario_id) == j).astype(np.float64)
        belief = pool.beliefs(scenario_id)[:, j]
        for name, column in (("choice", indicator), ("belief", belief)):
            rows.append(
                SweepPoint(
                    temperature=float(temp),
                    measure=name,
                    mean=float(column.mean()),
                    sd=float(np.std(column, ddof=1)) if len(column) > 1 else 0.0,
                )
            )
    return rows


# -- CSV emitters -----------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_table2_csv(path, results: Sequence) -> None:
    """Bootstrap comparison table; one row per (run count, measure)."""
    summaries: list[tuple[DrawSummary, float | None, float | None]] = []
    for res in results:
        if isinstance(res, MeasureComparison):
            summaries.append((res.choice, res.beta_t_stat, res.beta_p_value))
            summaries.append((res.belief, res.beta_t_stat, res.beta_p_value))
        else:
            summaries.append((res, None, None))
    if not summaries:
        raise ValueError("no results to write")
    names = list(summaries[0][0].params)
    header = ["runs_per_scenario", "measure", "n_draws"]
    for name in names:
        header += [f"{name}_estimate", f"{name}_se", f"{name}_p", f"{name}_sd"]
    header += [
        "mean_log_likelihood",
        "mean_rmse",
        "mean_mae",
        "rmse_diff",
        "mae_diff",
        "rmse_diff_t_stat",
        "rmse_diff_p_value",
        "mae_diff_t_stat",
        "mae_diff_p_value",
        "beta_equality_t_stat",
        "beta_equality_p_value",
    ]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for summary, beta_t, beta_p in summaries:
            row = [summary.runs_per_scenario, summary.measure, summary.n_draws]
            for name in names:
                p = summary.params[name]
                row += [_fmt(p.mean_estimate), _fmt(p.mean_se), _fmt(p.mean_p), _fmt(p.sd_over_draws)]
            row += [
                _fmt(summary.mean_log_likelihood),
                _fmt(summary.mean_rmse),
                _fmt(summary.mean_mae),
                _fmt(summary.rmse_diff),
                _fmt(summary.mae_diff),
                _fmt(summary.rmse_t_stat),
                _fmt(summary.rmse_p_value),
                _fmt(summary.mae_t_stat),
                _fmt(summary.mae_p_value),
                _fmt(beta_t),
                _fmt(beta_p),
            ]
            writer.writerow(row)


def write_figure3_csv(path, curves: Sequence[AccuracyCurve]) -> None:
    """Accuracy-curve points; min_runs_at_confidence repeats on each row of its curve."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "measure",
                "tolerance_fraction",
                "confidence",
                "runs_per_scenario",
                "probability",
                "min_runs_at_confidence",
            ]
        )
        for curve in curves:
            for k, prob in curve.points:
                writer.writerow(
                    [
                        curve.measure,
                        _fmt(curve.tolerance_fraction),
                        _fmt(curve.confidence),
                        k,
                        _fmt(prob),
                        "" if curve.min_runs_at_confidence is None else curve.min_runs_at_confidence,
                    ]
                )


def write_figure4_csv(path, points: Sequence[SweepPoint]) -> None:
    """Temperature-sweep table: temperature, measure, mean, sd."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["temperature", "measure", "mean", "sd"])
        for point in points:
            writer.writerow([_fmt(point.temperature), point.measure, _fmt(point.mean), _fmt(point.sd)])
