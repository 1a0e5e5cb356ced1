"""Empirical share, variance, and covariance estimators over pools of runs.

A RunPool stores per-run extraction results column-wise per scenario, which
keeps the estimators simple array reductions even at hundreds of thousands of
runs. The two measures are always aligned: "choice" turns each run into a
one-hot indicator vector, "belief" uses the extracted probability vector.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Literal, Mapping

import numpy as np

from .beliefs import AlternativeSet, BeliefVector

Measure = Literal["choice", "belief"]


def _check_measure(measure: str) -> None:
    if measure not in ("choice", "belief"):
        raise ValueError(f"measure must be 'choice' or 'belief', got {measure!r}")


@dataclass(frozen=True)
class RunRecord:
    """Extraction result of a single run."""

    scenario_id: str
    run_index: int
    choice: str
    belief: BeliefVector
    pivot_index: int


@dataclass(frozen=True)
class ShareVector:
    """A point on the probability simplex over the alternatives."""

    alternatives: tuple[str, ...]
    values: dict[str, float]
    n_runs: int | None = None

    def __post_init__(self) -> None:
        total = sum(self.values.values())
        if any(v < 0 for v in self.values.values()):
            raise ValueError("shares must be nonnegative")
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"shares sum to {total!r}, expected 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.values[a] for a in self.alternatives], dtype=np.float64)


@dataclass(frozen=True)
class CovMatrix:
    """Symmetric covariance matrix over the alternatives."""

    alternatives: tuple[str, ...]
    entries: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.entries, dtype=np.float64)
        if m.shape != (len(self.alternatives),) * 2:
            raise ValueError("covariance shape must match the alternatives")
        if np.max(np.abs(m - m.T), initial=0.0) > 1e-12:
            raise ValueError("covariance matrix must be symmetric")
        if np.any(np.diag(m) < -1e-15):
            raise ValueError("covariance diagonal must be nonnegative")
        object.__setattr__(self, "entries", m)


@dataclass
class ExtractionDiagnostics:
    """Counts of runs excluded or flagged during extraction."""

    no_pivot: int = 0
    ambiguous_pivot: int = 0
    mass_too_small: int = 0
    truncated_runs: int = 0
    by_scenario: dict[str, dict[str, int]] = field(default_factory=dict)

    def note(self, scenario_id: str, kind: str) -> None:
        setattr(self, kind, getattr(self, kind) + 1)
        row = self.by_scenario.setdefault(
            scenario_id,
            {"no_pivot": 0, "ambiguous_pivot": 0, "mass_too_small": 0, "truncated_runs": 0},
        )
        row[kind] += 1


@dataclass(frozen=True)
class _ScenarioBlock:
    run_index: np.ndarray  # (N,) int64
    choice_idx: np.ndarray  # (N,) int64, index into alternatives
    beliefs: np.ndarray  # (N, J) float64, rows on the simplex
    pivot_index: np.ndarray  # (N,) int64


class RunPool:
    """Per-scenario columns of (run index, choice, belief, pivot position)."""

    def __init__(
        self,
        alternatives: AlternativeSet,
        blocks: Mapping[str, _ScenarioBlock],
        diagnostics: ExtractionDiagnostics | None = None,
    ):
        self.alternatives = alternatives
        self._blocks = dict(blocks)
        self.diagnostics = diagnostics or ExtractionDiagnostics()
        for sid, block in self._blocks.items():
            if len(set(block.run_index.tolist())) != len(block.run_index):
                raise ValueError(f"duplicate run_index within scenario {sid!r}")

    @classmethod
    def from_records(cls, records: Iterable[RunRecord], alternatives: AlternativeSet) -> "RunPool":
        grouped: dict[str, list[RunRecord]] = {}
        for rec in records:
            grouped.setdefault(rec.scenario_id, []).append(rec)
        blocks = {}
        for sid, recs in grouped.items():
            blocks[sid] = _ScenarioBlock(
                run_index=np.array([r.run_index for r in recs], dtype=np.int64),
                choice_idx=np.array(
                    [alternatives.index(r.choice) for r in recs], dtype=np.int64
                ),
                beliefs=np.vstack([r.belief.as_array() for r in recs]),
                pivot_index=np.array([r.pivot_index for r in recs], dtype=np.int64),
            )
        return cls(alternatives, blocks)

    def scenarios(self) -> tuple[str, ...]:
        return tuple(self._blocks)

    def n_runs(self, scenario_id: str) -> int:
        return len(self._block(scenario_id).run_index)

    def _block(self, scenario_id: str) -> _ScenarioBlock:
        try:
            return self._blocks[scenario_id]
        except KeyError:
            raise KeyError(f"scenario {scenario_id!r} not in pool") from None

    def choice_indices(self, scenario_id: str) -> np.ndarray:
        return self._block(scenario_id).choice_idx

    def beliefs(self, scenario_id: str) -> np.ndarray:
        return self._block(scenario_id).beliefs

    def pivot_indices(self, scenario_id: str) -> np.ndarray:
        return self._block(scenario_id).pivot_index

    def choice_indicators(self, scenario_id: str) -> np.ndarray:
        """(N, J) one-hot rows for the chosen alternatives."""
        idx = self._block(scenario_id).choice_idx
        out = np.zeros((len(idx), len(self.alternatives.alternatives)))
        out[np.arange(len(idx)), idx] = 1.0
        return out

    def records(self, scenario_id: str) -> Iterator[RunRecord]:
        block = self._block(scenario_id)
        alts = self.alternatives.alternatives
        for i in range(len(block.run_index)):
            values = dict(zip(alts, block.beliefs[i].tolist()))
            yield RunRecord(
                scenario_id=scenario_id,
                run_index=int(block.run_index[i]),
                choice=alts[int(block.choice_idx[i])],
                belief=BeliefVector(alternatives=alts, values=values),
                pivot_index=int(block.pivot_index[i]),
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RunPool):
            return NotImplemented
        if self.alternatives.alternatives != other.alternatives.alternatives:
            return False
        if set(self._blocks) != set(other._blocks):
            return False
        for sid, a in self._blocks.items():
            b = other._blocks[sid]
            if not (
                np.array_equal(a.run_index, b.run_index)
                and np.array_equal(a.choice_idx, b.choice_idx)
                and np.array_equal(a.beliefs, b.beliefs)
                and np.array_equal(a.pivot_index, b.pivot_index)
            ):
                return False
        return True


def _measure_matrix(pool: RunPool, scenario_id: str, measure: Measure) -> np.ndarray:
    _check_measure(measure)
    if measure == "choice":
        return pool.choice_indicators(scenario_id)
    return pool.beliefs(scenario_id)


def empirical_choice_share(pool: RunPool, scenario_id: str) -> ShareVector:
    """Fraction of runs choosing each alternative."""
    idx = pool.choice_indices(scenario_id)
    if len(idx) == 0:
        raise ValueError(f"no runs recorded for scenario {scenario_id!r}")
    alts = pool.alternatives.alternatives
    counts = np.bincount(idx, minlength=len(alts)).astype(np.float64)
    shares = counts / len(idx)
    return ShareVector(alts, dict(zip(alts, shares.tolist())), n_runs=len(idx))


def empirical_belief_share(pool: RunPool, scenario_id: str) -> ShareVector:
    """Mean extracted belief per alternative."""
    beliefs = pool.beliefs(scenario_id)
    if len(beliefs) == 0:
        raise ValueError(f"no runs recorded for scenario {scenario_id!r}")
    alts = pool.alternatives.alternatives
    shares = beliefs.mean(axis=0)
    # Averaging hundreds of thousands of simplex rows accumulates enough
    # rounding error to drift past the simplex tolerance; renormalize.
    shares = shares / shares.sum()
    return ShareVector(alts, dict(zip(alts, shares.tolist())), n_runs=len(beliefs))


def sample_variance(pool: RunPool, scenario_id: str, alternative: str, measure: Measure) -> float:
    """Unbiased (n-1 denominator) variance of the per-run scalar for one alternative."""
    data = _measure_matrix(pool, scenario_id, measure)
    if len(data) < 2:
        raise ValueError("sample variance needs at least two runs")
    column = data[:, pool.alternatives.index(alternative)]
    return float(np.var(column, ddof=1))


def sample_covariance(pool: RunPool, scenario_id: str, measure: Measure) -> CovMatrix:
    """Unbiased sample covariance of the per-run vectors (one-hot or belief)."""
    data = _measure_matrix(pool, scenario_id, measure)
    if len(data) < 2:
        raise ValueError("sample covariance needs at least two runs")
    cov = np.cov(data, rowvar=False, ddof=1)
    cov = (cov + cov.T) / 2.0
    return CovMatrix(pool.alternatives.alternatives, cov)


def loewner_gap(sigma_c: CovMatrix, sigma_b: CovMatrix) -> float:
    """Smallest eigenvalue of sigma_c - sigma_b.

    A value no smaller than a small negative tolerance certifies that the
    first matrix dominates the second in the Loewner order up to sampling
    noise. Both inputs are validated; the arguments are not interchangeable.
    """
    if sigma_c.entries.shape != sigma_b.entries.shape:
        raise ValueError("covariance dimensions differ")
    diff = sigma_c.entries - sigma_b.entries
    return float(np.linalg.eigvalsh((diff + diff.T) / 2.0).min())


def chebyshev_run_count(variance: float, epsilon: float, delta: float) -> int:
    """Runs guaranteeing accuracy epsilon at confidence 1 - delta for the given variance.

    ceil(variance / (epsilon^2 * delta)), floored at one run.
    """
    if not math.isfinite(variance) or variance < 0:
        raise ValueError("variance must be finite and nonnegative")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not (0 < delta < 1):
        raise ValueError("delta must lie in (0, 1)")
    return max(1, math.ceil(variance / (epsilon * epsilon * delta)))


def equivalence_gap(pool: RunPool, scenario_id: str) -> dict[str, float]:
    """Componentwise |mean belief - choice share| for one scenario."""
    belief = empirical_belief_share(pool, scenario_id)
    choice = empirical_choice_share(pool, scenario_id)
    return {
        alt: abs(belief.values[alt] - choice.values[alt])
        for alt in pool.alternatives.alternatives
    }


def write_share_table(pool: RunPool, path) -> None:
    """CSV of per-scenario shares and variances for both measures.

    Columns: scenario, alternative, measure, share, variance, n_effective.
    The variance column is empty for scenarios with a single run.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "alternative", "measure", "share", "variance", "n_effective"])
        for sid in pool.scenarios():
            n = pool.n_runs(sid)
            shares = {
                "choice": empirical_choice_share(pool, sid),
                "belief": empirical_belief_share(pool, sid),
            }
            for alt in pool.alternatives.alternatives:
                for measure in ("choice", "belief"):
                    variance = (
                        repr(sample_variance(pool, sid, alt, measure)) if n >= 2 else ""
                    )
                    writer.writerow(
                        [sid, alt, measure, repr(shares[measure].values[alt]), variance, n]
                    )
