"""Multinomial logit demand model with brand intercepts and a price slope.

Utilities are linear in parameters, the outside alternative is pinned to
utility zero, and the log likelihood accepts arbitrary nonnegative outcome
weights per (scenario, alternative) cell: one-hot rows for sampled choices,
fractional rows for extracted beliefs, or aggregated rows whose totals equal
run counts. Because the likelihood is linear in the weights, rows aggregate
by scenario before any evaluation.

Fitting uses damped Newton ascent with the analytic gradient and Hessian and
a ridge that grows on rejected steps, which degrades gracefully into damped
gradient ascent whenever the Hessian turns near-singular (saturated
probabilities, separated data).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import _rng
from .estimators import RunPool, ShareVector, empirical_choice_share

_LOG_FLOOR = math.log(1e-300)
_STEP_CAP = 50.0


@dataclass(frozen=True)
class Scenario:
    """One choice situation: per-alternative prices, outside option at price zero."""

    scenario_id: str
    prices: dict[str, float]
    outside: str = "neither"

    def __post_init__(self) -> None:
        if self.outside not in self.prices:
            raise ValueError(f"outside option {self.outside!r} missing from prices")
        if self.prices[self.outside] != 0:
            raise ValueError("outside option must have price 0")
        if any(not math.isfinite(p) for p in self.prices.values()):
            raise ValueError("prices must be finite")


@dataclass(frozen=True)
class MnlParams:
    """Brand intercepts plus one price coefficient; the outside option has no parameters."""

    alpha: dict[str, float]
    beta: float

    def __post_init__(self) -> None:
        values = list(self.alpha.values()) + [self.beta]
        if any(not math.isfinite(v) for v in values):
            raise ValueError("parameters must be finite")


@dataclass(frozen=True)
class MnlDataset:
    """Rows of (scenario_id, outcome weights per alternative)."""

    rows: tuple[tuple[str, dict[str, float]], ...]

    def __post_init__(self) -> None:
        for sid, weights in self.rows:
            total = sum(weights.values())
            if any(w < 0 or not math.isfinite(w) for w in weights.values()):
                raise ValueError(f"row for {sid!r} has negative or non-finite weights")
            if total <= 0:
                raise ValueError(f"row for {sid!r} has no positive weight")


@dataclass(frozen=True)
class FitResult:
    params: MnlParams
    std_errors: dict[str, float]
    p_values: dict[str, float]
    log_likelihood: float
    converged: bool
    n_iterations: int
    n_observations: int
    degenerate_information: bool = False
    floor_hit: bool = False

    def to_json(self) -> str:
        brands = list(self.params.alpha)
        payload = {
            "estimates": {**{b: self.params.alpha[b] for b in brands}, "beta": self.params.beta},
            "std_errors": dict(self.std_errors),
            "p_values": dict(self.p_values),
            "log_likelihood": self.log_likelihood,
            "converged": self.converged,
            "n_iterations": self.n_iterations,
            "n_observations": self.n_observations,
            "degenerate_information": self.degenerate_information,
            "floor_hit": self.floor_hit,
        }
        return json.dumps(payload, indent=2)


class _Design:
    """Precompiled utility design for a fixed scenario list."""

    def __init__(self, scenarios: Sequence[Scenario]):
        if not scenarios:
            raise ValueError("at least one scenario is required")
        first = scenarios[0]
        self.alternatives = tuple(first.prices)
        self.outside = first.outside
        for sc in scenarios:
            if tuple(sc.prices) != self.alternatives or sc.outside != self.outside:
                raise ValueError("scenarios must share one alternative set and outside option")
        self.brands = tuple(a for a in self.alternatives if a != self.outside)
        self.param_names = self.brands + ("beta",)
        self.scenario_ids = tuple(sc.scenario_id for sc in scenarios)
        self._row_of = {sid: i for i, sid in enumerate(self.scenario_ids)}
        if len(self._row_of) != len(scenarios):
            raise ValueError("duplicate scenario ids")
        S, J, P = len(scenarios), len(self.alternatives), len(self.param_names)
        X = np.zeros((S, J, P))
        for s, sc in enumerate(scenarios):
            for j, alt in enumerate(self.alternatives):
                if alt == self.outside:
                    continue
                X[s, j, self.brands.index(alt)] = 1.0
                X[s, j, P - 1] = sc.prices[alt]
        self.X = X

    def theta_of(self, params: MnlParams) -> np.ndarray:
        missing = set(self.brands) - set(params.alpha)
        if missing:
            raise ValueError(f"parameters missing brands: {sorted(missing)}")
        return np.array([params.alpha[b] for b in self.brands] + [params.beta])

    def params_of(self, theta: np.ndarray) -> MnlParams:
        return MnlParams(
            alpha={b: float(theta[i]) for i, b in enumerate(self.brands)},
            beta=float(theta[-1]),
        )

    def weights_matrix(self, dataset: MnlDataset) -> np.ndarray:
        """Aggregate dataset rows into an (S, J) weight matrix."""
        D = np.zeros((len(self.scenario_ids), len(self.alternatives)))
        for sid, weights in dataset.rows:
            if sid not in self._row_of:
                raise ValueError(f"dataset references unknown scenario {sid!r}")
            unknown = set(weights) - set(self.alternatives)
            if unknown:
                raise ValueError(f"dataset row names unknown alternatives: {sorted(unknown)}")
            s = self._row_of[sid]
            for j, alt in enumerate(self.alternatives):
                D[s, j] += weights.get(alt, 0.0)
        return D

    def log_probs(self, theta: np.ndarray) -> np.ndarray:
        u = self.X @ theta
        m = u.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(u - m).sum(axis=1, keepdims=True))
        return u - lse

    def loglik(self, theta: np.ndarray, D: np.ndarray) -> float:
        logp = np.maximum(self.log_probs(theta), _LOG_FLOOR)
        return float(np.sum(np.where(D > 0, D * logp, 0.0)))

    def floor_hit(self, theta: np.ndarray, D: np.ndarray) -> bool:
        return bool(np.any((D > 0) & (self.log_probs(theta) < _LOG_FLOOR)))

    def score(self, theta: np.ndarray, D: np.ndarray) -> np.ndarray:
        P = np.exp(self.log_probs(theta))
        resid = D - D.sum(axis=1, keepdims=True) * P
        return np.einsum("sj,sjp->p", resid, self.X)

    def information(self, theta: np.ndarray, D: np.ndarray) -> np.ndarray:
        """Observed information (negative Hessian): sum_s D_s * Cov_s(x under P_s)."""
        P = np.exp(self.log_probs(theta))
        totals = D.sum(axis=1)
        xbar = np.einsum("sj,sjp->sp", P, self.X)
        second = np.einsum("s,sj,sjp,sjq->pq", totals, P, self.X, self.X)
        first = np.einsum("s,sp,sq->pq", totals, xbar, xbar)
        info = second - first
        return (info + info.T) / 2.0


def utilities(params: MnlParams, scenario: Scenario) -> dict[str, float]:
    """Deterministic utilities: intercept plus slope times price; outside exactly 0."""
    missing = {a for a in scenario.prices if a != scenario.outside} - set(params.alpha)
    if missing:
        raise ValueError(f"parameters missing brands: {sorted(missing)}")
    out = {}
    for alt, price in scenario.prices.items():
        out[alt] = 0.0 if alt == scenario.outside else params.alpha[alt] + params.beta * price
    return out


def logit_shares(utility_values: Mapping[str, float]) -> dict[str, float]:
    """Softmax over utilities with max-subtraction; invariant to adding a constant to all."""
    alts = list(utility_values)
    u = np.array([utility_values[a] for a in alts], dtype=np.float64)
    w = np.exp(u - u.max())
    p = w / w.sum()
    return dict(zip(alts, p.tolist()))


def choice_probabilities(params: MnlParams, scenario: Scenario) -> ShareVector:
    """Logit choice probabilities for one scenario."""
    shares = logit_shares(utilities(params, scenario))
    return ShareVector(tuple(scenario.prices), shares)


def log_likelihood(params: MnlParams, dataset: MnlDataset, scenarios: Sequence[Scenario]) -> float:
    """Weighted log likelihood; cells with zero weight contribute exactly zero."""
    design = _Design(scenarios)
    return design.loglik(design.theta_of(params), design.weights_matrix(dataset))


def score(params: MnlParams, dataset: MnlDataset, scenarios: Sequence[Scenario]) -> np.ndarray:
    """Analytic gradient of the log likelihood, ordered (brand intercepts..., beta)."""
    design = _Design(scenarios)
    return design.score(design.theta_of(params), design.weights_matrix(dataset))


def observed_information(
    params: MnlParams, dataset: MnlDataset, scenarios: Sequence[Scenario]
) -> np.ndarray:
    """Negative Hessian of the log likelihood at the given parameters."""
    design = _Design(scenarios)
    return design.information(design.theta_of(params), design.weights_matrix(dataset))


def param_order(scenarios: Sequence[Scenario]) -> tuple[str, ...]:
    """Order of entries in score/information vectors for these scenarios."""
    return _Design(scenarios).param_names


@dataclass
class _RawFit:
    theta: np.ndarray
    loglik: float
    converged: bool
    n_iterations: int


def _maximize(design: _Design, D: np.ndarray, theta0: np.ndarray, max_iter: int, grad_tol: float) -> _RawFit:
    """Newton ascent with backtracking; falls back to gradient steps on a singular Hessian."""
    theta = theta0.astype(np.float64).copy()
    L = design.loglik(theta, D)
    eye = np.eye(len(theta))
    converged = False
    iterations = 0
    while True:
        g = design.score(theta, D)
        if np.max(np.abs(g)) < grad_tol:
            converged = True
            break
        if iterations >= max_iter:
            break
        iterations += 1
        info = design.information(theta, D)
        step = None
        for ridge in (0.0, 1e-10 * (1.0 + np.trace(info))):
            try:
                candidate_step = np.linalg.solve(info + ridge * eye, g)
            except np.linalg.LinAlgError:
                continue
            if np.all(np.isfinite(candidate_step)) and candidate_step @ g > 0:
                step = candidate_step
                break
        newton_step = step is not None
        if step is None:
            step = g / np.max(np.abs(g))
        # Once probabilities saturate, the log floor flattens the likelihood
        # along weakly-identified directions and a Newton step can carry an
        # arbitrarily large drift component that rides along a genuine
        # improvement elsewhere. Capping the step keeps such drift bounded
        # per iteration without affecting well-conditioned convergence.
        largest = np.max(np.abs(step))
        if largest > _STEP_CAP:
            step = step * (_STEP_CAP / largest)
        scale = 1.0
        improved = False
        for _ in range(60):
            L_new = design.loglik(theta + scale * step, D)
            if L_new > L:
                theta = theta + scale * step
                L = L_new
                improved = True
                break
            scale *= 0.5
        if not improved:
            # A Newton polishing step whose predicted gain sits below the
            # floating-point resolution of L cannot register as an increase;
            # take it anyway when it is tiny, since near the optimum the
            # iteration contracts. Anything else is a genuine stall.
            resolution = 8.0 * np.finfo(float).eps * (1.0 + abs(L))
            tiny = np.max(np.abs(step)) <= 1e-3 * (1.0 + np.max(np.abs(theta)))
            if newton_step and tiny and 0.5 * float(g @ step) <= resolution:
                theta = theta + step
                L = design.loglik(theta, D)
            else:
                break
    return _RawFit(theta=theta, loglik=L, converged=converged, n_iterations=iterations)


def _fit_design(
    design: _Design,
    D: np.ndarray,
    init_seed: int = 0,
    max_iter: int = 500,
    grad_tol: float = 1e-8,
    init: np.ndarray | None = None,
) -> FitResult:
    if init is None:
        rng = _rng.stream(init_seed, _rng.TAG_INIT)
        init = rng.uniform(-1.0, 1.0, size=len(design.param_names))
    raw = _maximize(design, D, np.asarray(init, dtype=np.float64), max_iter, grad_tol)
    info = design.information(raw.theta, D)
    names = design.param_names
    degenerate = False
    try:
        chol = np.linalg.cholesky(info)
        inv = np.linalg.inv(chol)
        cov = inv.T @ inv
        ses = np.sqrt(np.diag(cov))
    except np.linalg.LinAlgError:
        degenerate = True
        ses = np.full(len(names), np.inf)
    if not np.all(np.isfinite(ses)):
        degenerate = True
        ses = np.where(np.isfinite(ses), ses, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(ses > 0, raw.theta / ses, np.inf)
    ps = 2.0 * stats.norm.sf(np.abs(zs))
    n_obs = int(round(D.sum())) * len(design.alternatives)
    return FitResult(
        params=design.params_of(raw.theta),
        std_errors=dict(zip(names, ses.tolist())),
        p_values=dict(zip(names, ps.tolist())),
        log_likelihood=raw.loglik,
        converged=raw.converged,
        n_iterations=raw.n_iterations,
        n_observations=n_obs,
        degenerate_information=degenerate,
        floor_hit=design.floor_hit(raw.theta, D),
    )


def fit_mle(
    dataset: MnlDataset,
    scenarios: Sequence[Scenario],
    init_seed: int = 0,
    max_iter: int = 500,
    grad_tol: float = 1e-8,
    init: MnlParams | None = None,
) -> FitResult:
    """Maximum-likelihood fit of the logit model.

    Initial parameters are drawn uniformly from [-1, 1] under ``init_seed``
    unless ``init`` is given. Standard errors come from the inverse observed
    information at the optimum (reported as +inf with a degeneracy flag when
    the information is singular) and p-values from a two-sided normal
    reference. The convergence flag reports whether the gradient infinity
    norm actually fell below ``grad_tol``.
    """
    design = _Design(scenarios)
    D = design.weights_matrix(dataset)
    used = {sid for sid, _ in dataset.rows}
    price_rows = {
        tuple(sc.prices.values()) for sc in scenarios if sc.scenario_id in used
    }
    if len(price_rows) < 2:
        raise ValueError("price coefficient needs at least two distinct price scenarios")
    theta0 = design.theta_of(init) if init is not None else None
    return _fit_design(design, D, init_seed=init_seed, max_iter=max_iter, grad_tol=grad_tol, init=theta0)


def dataset_from_pool(
    pool: RunPool,
    measure: str,
    scenario_ids: Sequence[str] | None = None,
    aggregate: bool = True,
) -> MnlDataset:
    """Build outcome weights from a pool: counts for choice, belief sums for belief.

    With ``aggregate`` (the default) each scenario becomes one row whose
    weight total equals its run count; otherwise one row per run.
    """
    if measure not in ("choice", "belief"):
        raise ValueError(f"measure must be 'choice' or 'belief', got {measure!r}")
    ids = tuple(scenario_ids) if scenario_ids is not None else pool.scenarios()
    alts = pool.alternatives.alternatives
    rows = []
    for sid in ids:
        if aggregate:
            if measure == "choice":
                counts = np.bincount(pool.choice_indices(sid), minlength=len(alts))
                weights = dict(zip(alts, counts.astype(float).tolist()))
            else:
                weights = dict(zip(alts, pool.beliefs(sid).sum(axis=0).tolist()))
            rows.append((sid, weights))
        else:
            matrix = (
                pool.choice_indicators(sid) if measure == "choice" else pool.beliefs(sid)
            )
            for row in matrix:
                rows.append((sid, dict(zip(alts, row.tolist()))))
    return MnlDataset(rows=tuple(rows))


def predict_metrics(
    params: MnlParams, test_scenarios: Sequence[Scenario], ground_truth: RunPool
) -> dict[str, float]:
    """RMSE and MAE of predicted probabilities against empirical choice shares.

    One error cell per (test scenario, alternative), equally weighted.
    """
    if not test_scenarios:
        raise ValueError("test scenario list is empty")
    errors = []
    for sc in test_scenarios:
        predicted = choice_probabilities(params, sc)
        observed = empirical_choice_share(ground_truth, sc.scenario_id)
        for alt in sc.prices:
            errors.append(predicted.values[alt] - observed.values[alt])
    errors = np.array(errors)
    return {
        "rmse": float(np.sqrt(np.mean(errors**2))),
        "mae": float(np.mean(np.abs(errors))),
    }
