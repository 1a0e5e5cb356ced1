"""Temperature-controlled token sampling and a scripted stochastic language model.

The scripted model is a weighted mixture of response templates. Each template
owns a fixed token prefix and, per scenario, a probability distribution over
the marker tokens that settle the choice. Sampling one run means drawing a
template (weights tempered by the sampling temperature), emitting its prefix,
then drawing a single marker token from the tempered pivot distribution.

Recorded log-probabilities are always the *untempered* conditional next-token
distributions given the emitted prefix, the way chat-completion endpoints
report them: temperature changes what gets sampled, never what gets logged.
That separation is what lets downstream code study how tempering distorts
sampled choices relative to the logged probabilities.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import _rng


class LmSpecError(ValueError):
    """Raised when a scripted-model specification violates its invariants."""


_SUM_TOL = 1e-12


@dataclass(frozen=True)
class SamplingConfig:
    """Knobs for one batch of generation runs.

    ``temperature`` 0 means greedy decoding. ``top_k_recorded`` caps how many
    log-probabilities are kept per position; a position whose distribution
    puts positive probability on fewer tokens than the cap records only
    those, the way live endpoints saturate when the request asks for more
    alternatives than exist.
    """

    temperature: float = 1.0
    top_k_recorded: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError("temperature must be finite and >= 0")
        if self.top_k_recorded < 1:
            raise ValueError("top_k_recorded must be a positive integer")


@dataclass(frozen=True)
class GenerationRun:
    """One sampled token sequence plus the per-position recorded top-K logprobs.

    ``top_logprobs[p]`` is a tuple of (token, logprob) pairs for position p,
    sorted by descending probability with ties broken by vocabulary index.
    ``text`` optionally retains the raw textual output for audit.
    """

    scenario_id: str
    tokens: tuple[str, ...]
    top_logprobs: tuple[tuple[tuple[str, float], ...], ...]
    seed: int
    temperature: float
    run_index: int = 0
    text: str | None = None


def validate_run(run: GenerationRun) -> None:
    """Check the structural invariants of a GenerationRun; raise ValueError on violation."""
    if len(run.top_logprobs) != len(run.tokens):
        raise ValueError("top_logprobs must have one entry list per token")
    for position, entries in enumerate(run.top_logprobs):
        if not entries:
            raise ValueError(f"position {position} records no logprobs")
        lps = [lp for _, lp in entries]
        if any(lps[i] < lps[i + 1] for i in range(len(lps) - 1)):
            raise ValueError(f"position {position} logprobs are not non-increasing")
        if sum(math.exp(lp) for lp in lps) > 1 + 1e-9:
            raise ValueError(f"position {position} probabilities sum past 1")


def softmax_with_temperature(logits: Mapping[str, float], temperature: float) -> dict[str, float]:
    """Turn unnormalized scores into a probability distribution, tempered.

    For temperature > 0 the mass of token v is proportional to
    exp(logits[v] / temperature). Temperature 0 is greedy: all mass lands on
    the argmax, with ties won by the earliest entry in mapping order.
    """
    if not logits:
        raise ValueError("logits must be non-empty")
    if not math.isfinite(temperature) or temperature < 0:
        raise ValueError("temperature must be finite and >= 0")
    tokens = list(logits)
    values = np.array([logits[t] for t in tokens], dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("logits must be finite")
    if temperature == 0.0:
        winner = int(np.argmax(values))
        return {tok: (1.0 if i == winner else 0.0) for i, tok in enumerate(tokens)}
    scaled = (values - values.max()) / temperature
    weights = np.exp(scaled)
    probs = weights / weights.sum()
    return dict(zip(tokens, probs.tolist()))


def _validate_probs(probs: Mapping[str, float]) -> tuple[list[str], np.ndarray]:
    if not probs:
        raise ValueError("probability vector must be non-empty")
    tokens = list(probs)
    values = np.array([probs[t] for t in tokens], dtype=np.float64)
    if np.any(values < 0):
        raise ValueError("probabilities must be nonnegative")
    if abs(values.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must sum to 1")
    return tokens, values


def _pick_index(cumulative: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(cumulative, u, side="right"))
    return min(idx, len(cumulative) - 1)


def sample_token(probs: Mapping[str, float], rng: np.random.Generator) -> str:
    """Draw one token with exactly the given probabilities.

    Uses a single uniform draw and the inverse CDF in mapping order, so the
    outcome is a deterministic function of the generator state.
    """
    tokens, values = _validate_probs(probs)
    cumulative = np.cumsum(values)
    return tokens[_pick_index(cumulative, rng.random())]


def temper_probs(probs: np.ndarray, temperature: float) -> np.ndarray:
    """Rescale a probability vector as p**(1/T), renormalized; T=0 is one-hot greedy."""
    if temperature == 1.0:
        return probs
    if temperature == 0.0:
        out = np.zeros_like(probs)
        out[int(np.argmax(probs))] = 1.0
        return out
    scaled = np.power(probs, 1.0 / temperature)
    return scaled / scaled.sum()


@dataclass(frozen=True)
class Template:
    """One response pattern: fixed prefix, selection weight, per-scenario pivot beliefs."""

    prefix: tuple[str, ...]
    weight: float
    pivot_beliefs: dict[str, dict[str, float]] = field(hash=False)


_TEMPLATE_KEYS = {"prefix", "weight", "pivot_beliefs"}
_SPEC_KEYS = {"templates", "markers"}


class ScriptedLm:
    """Validated scripted language model, compiled for fast sampling.

    Construction performs all invariant checks and precomputes, per template
    and scenario, the pivot-token distribution (an alternative's belief mass
    divides evenly across its marker tokens) and the untempered conditional
    next-token law at every prefix position.
    """

    def __init__(self, templates: Sequence[Template], markers: Mapping[str, Sequence[str]]):
        if not templates:
            raise LmSpecError("at least one template is required")
        if len(markers) < 2:
            raise LmSpecError("at least two alternatives are required")
        self.templates = tuple(templates)
        self.alternatives = tuple(markers)
        self.markers = {alt: tuple(toks) for alt, toks in markers.items()}

        seen: dict[str, str] = {}
        for alt, toks in self.markers.items():
            if not toks:
                raise LmSpecError(f"alternative {alt!r} has no marker tokens")
            for tok in toks:
                if not isinstance(tok, str) or not tok:
                    raise LmSpecError("marker tokens must be non-empty strings")
                if tok in seen:
                    raise LmSpecError(f"marker token {tok!r} assigned to both {seen[tok]!r} and {alt!r}")
                seen[tok] = alt
        self._alt_of_marker = seen

        total = 0.0
        for t in self.templates:
            if not (0.0 < t.weight <= 1.0):
                raise LmSpecError("template weights must lie in (0, 1]")
            total += t.weight
            for tok in t.prefix:
                if not isinstance(tok, str) or not tok:
                    raise LmSpecError("prefix tokens must be non-empty strings")
                if tok in seen:
                    raise LmSpecError(f"marker token {tok!r} appears inside a template prefix")
        if abs(total - 1.0) > _SUM_TOL:
            raise LmSpecError(f"template weights sum to {total!r}, expected 1")

        scenario_ids = tuple(self.templates[0].pivot_beliefs)
        if not scenario_ids:
            raise LmSpecError("templates must define pivot beliefs for at least one scenario")
        for t in self.templates:
            if set(t.pivot_beliefs) != set(scenario_ids):
                raise LmSpecError("all templates must cover the same scenario ids")
            for sid, row in t.pivot_beliefs.items():
                row_sum = 0.0
                for alt, p in row.items():
                    if alt not in self.markers:
                        raise LmSpecError(f"belief row for {sid!r} names unknown alternative {alt!r}")
                    if p < 0:
                        raise LmSpecError("beliefs must be nonnegative")
                    row_sum += p
                if abs(row_sum - 1.0) > _SUM_TOL:
                    raise LmSpecError(f"belief row for scenario {sid!r} sums to {row_sum!r}, expected 1")
        self.scenario_ids = scenario_ids

        vocab: list[str] = []
        index: dict[str, int] = {}
        for t in self.templates:
            for tok in t.prefix:
                if tok not in index:
                    index[tok] = len(vocab)
                    vocab.append(tok)
        for alt in self.alternatives:
            for tok in self.markers[alt]:
                index[tok] = len(vocab)
                vocab.append(tok)
        if len(vocab) < 2:
            raise LmSpecError("vocabulary must contain at least two tokens")
        self.vocabulary = tuple(vocab)
        self._vocab_index = index

        self._weights = np.array([t.weight for t in self.templates], dtype=np.float64)
        self._weights_cum = np.cumsum(self._weights)
        # Pivot-token distributions in vocabulary order, one per (template, scenario).
        self._pivot: list[dict[str, tuple[tuple[str, ...], np.ndarray, np.ndarray]]] = []
        for t in self.templates:
            per_scenario = {}
            for sid in scenario_ids:
                row = t.pivot_beliefs[sid]
                entries = []
                for alt in self.alternatives:
                    mass = row.get(alt, 0.0)
                    toks = self.markers[alt]
                    for tok in toks:
                        entries.append((index[tok], tok, mass / len(toks)))
                entries.sort(key=lambda e: e[0])
                toks = tuple(e[1] for e in entries)
                probs = np.array([e[2] for e in entries], dtype=np.float64)
                per_scenario[sid] = (toks, probs, np.cumsum(probs))
            self._pivot.append(per_scenario)

        self._tempered: dict[float, tuple[np.ndarray, list[dict[str, np.ndarray]]]] = {}
        self._conditional_cache: dict[str, list[list[list[tuple[str, float]]]]] = {}
        self._topk_cache: dict[tuple[int, str, int], tuple[tuple[tuple[str, float], ...], ...]] = {}

    @classmethod
    def from_json(cls, path) -> "ScriptedLm":
        with open(path, "r", encoding="utf-8") as fh:
            return build_scripted_lm(json.load(fh))

    def template_index_of_prefix(self, tokens: Sequence[str]) -> int:
        """Index of the template whose prefix the token sequence starts with."""
        for i, t in enumerate(self.templates):
            if tuple(tokens[: len(t.prefix)]) == t.prefix:
                return i
        raise ValueError("token sequence matches no template prefix")

    # -- compiled lookups ---------------------------------------------------

    def _tempered_arrays(self, temperature: float):
        cached = self._tempered.get(temperature)
        if cached is None:
            if temperature == 1.0:
                # Reuse the raw cumulative arrays so tempering at 1 is bit-exact.
                pivots = [{sid: cum for sid, (_, _, cum) in per.items()} for per in self._pivot]
                cached = (self._weights_cum, pivots)
            else:
                weights = temper_probs(self._weights, temperature)
                pivots = []
                for per in self._pivot:
                    pivots.append(
                        {sid: np.cumsum(temper_probs(probs, temperature)) for sid, (_, probs, _) in per.items()}
                    )
                cached = (np.cumsum(weights), pivots)
            self._tempered[temperature] = cached
        return cached

    def _conditional(self, scenario_id: str) -> list[list[list[tuple[str, float]]]]:
        """Untempered next-token law at every position of every template.

        Entry [t][p] lists (token, probability) pairs, sorted by descending
        probability then vocabulary index, for position p given that the first
        p tokens of template t's prefix have been emitted. The final position
        of each template is its pivot.
        """
        cached = self._conditional_cache.get(scenario_id)
        if cached is not None:
            return cached
        if scenario_id not in set(self.scenario_ids):
            raise KeyError(f"unknown scenario {scenario_id!r}")
        table = []
        for t in self.templates:
            rows = []
            for p in range(len(t.prefix) + 1):
                head = t.prefix[:p]
                mass: dict[str, float] = {}
                total = 0.0
                for u_idx, other in enumerate(self.templates):
                    if len(other.prefix) < p or other.prefix[:p] != head:
                        continue
                    total += other.weight
                    if len(other.prefix) > p:
                        tok = other.prefix[p]
                        mass[tok] = mass.get(tok, 0.0) + other.weight
                    else:
                        toks, probs, _ = self._pivot[u_idx][scenario_id]
                        for tok, q in zip(toks, probs):
                            if q > 0.0:
                                mass[tok] = mass.get(tok, 0.0) + other.weight * q
                row = [(tok, m / total) for tok, m in mass.items()]
                row.sort(key=lambda e: (-e[1], self._vocab_index[e[0]]))
                rows.append(row)
            table.append(rows)
        self._conditional_cache[scenario_id] = table
        return table

    def recorded_topk(self, template_index: int, scenario_id: str, k: int):
        """Per-position top-k (token, logprob) tuples for runs of one template."""
        key = (template_index, scenario_id, k)
        cached = self._topk_cache.get(key)
        if cached is None:
            rows = self._conditional(scenario_id)[template_index]
            cached = tuple(
                tuple((tok, math.log(p)) for tok, p in row[:k]) for row in rows
            )
            self._topk_cache[key] = cached
        return cached

    def assemble_run(
        self,
        template_index: int,
        marker_token: str,
        scenario_id: str,
        config: SamplingConfig,
        run_index: int,
    ) -> GenerationRun:
        """Materialize the GenerationRun for a known (template, marker) outcome."""
        template = self.templates[template_index]
        return GenerationRun(
            scenario_id=scenario_id,
            tokens=template.prefix + (marker_token,),
            top_logprobs=self.recorded_topk(template_index, scenario_id, config.top_k_recorded),
            seed=config.seed,
            temperature=config.temperature,
            run_index=run_index,
        )

    def sample_outcome(
        self, scenario_id: str, temperature: float, u_template: float, u_marker: float
    ) -> tuple[int, str]:
        """Map two uniforms to (template index, marker token) at the given temperature."""
        weights_cum, pivot_cums = self._tempered_arrays(temperature)
        if temperature == 0.0:
            t_idx = int(np.argmax(self._weights))
            toks, probs, _ = self._pivot[t_idx][scenario_id]
            return t_idx, toks[int(np.argmax(probs))]
        t_idx = _pick_index(weights_cum, u_template)
        toks, _, _ = self._pivot[t_idx][scenario_id]
        return t_idx, toks[_pick_index(pivot_cums[t_idx][scenario_id], u_marker)]

    def asymptotic_shares(self, scenario_id: str, temperature: float = 1.0) -> dict[str, dict[str, float]]:
        """Exact large-run means of both measures at the given temperature.

        The belief mean averages each template's extracted belief (the
        marker-restricted, renormalized recorded law at its pivot position)
        under the tempered template weights; the choice mean additionally
        tempers each pivot distribution. At temperature 1 the two coincide.
        """
        table = self._conditional(scenario_id)
        weights = temper_probs(self._weights, temperature)
        belief = dict.fromkeys(self.alternatives, 0.0)
        choice = dict.fromkeys(self.alternatives, 0.0)
        for t_idx in range(len(self.templates)):
            pivot_row = table[t_idx][-1]
            marker_mass = dict.fromkeys(self.alternatives, 0.0)
            for tok, p in pivot_row:
                alt = self._alt_of_marker.get(tok)
                if alt is not None:
                    marker_mass[alt] += p
            total = sum(marker_mass.values())
            for alt in self.alternatives:
                belief[alt] += weights[t_idx] * marker_mass[alt] / total
            toks, probs, _ = self._pivot[t_idx][scenario_id]
            tempered = temper_probs(probs, temperature)
            for tok, q in zip(toks, tempered):
                choice[self._alt_of_marker[tok]] += weights[t_idx] * q
        return {
            "belief": {a: float(v) for a, v in belief.items()},
            "choice": {a: float(v) for a, v in choice.items()},
        }


def build_scripted_lm(spec: Mapping) -> ScriptedLm:
    """Validate a raw specification mapping and compile it into a ScriptedLm.

    Expected shape::

        {"templates": [{"prefix": [...tokens], "weight": w,
                        "pivot_beliefs": {scenario: {alternative: p, ...}}}, ...],
         "markers": {alternative: [token, ...], ...}}

    Unknown fields are rejected.
    """
    if not isinstance(spec, Mapping):
        raise LmSpecError("specification must be a mapping")
    unknown = set(spec) - _SPEC_KEYS
    if unknown:
        raise LmSpecError(f"unknown specification fields: {sorted(unknown)}")
    if "templates" not in spec or "markers" not in spec:
        raise LmSpecError("specification requires 'templates' and 'markers'")
    templates = []
    for i, raw in enumerate(spec["templates"]):
        if not isinstance(raw, Mapping):
            raise LmSpecError(f"template {i} must be a mapping")
        unknown = set(raw) - _TEMPLATE_KEYS
        if unknown:
            raise LmSpecError(f"template {i} has unknown fields: {sorted(unknown)}")
        try:
            prefix = tuple(raw["prefix"])
            weight = float(raw["weight"])
            beliefs = {
                str(sid): {str(alt): float(p) for alt, p in row.items()}
                for sid, row in raw["pivot_beliefs"].items()
            }
        except (KeyError, TypeError, AttributeError) as exc:
            raise LmSpecError(f"template {i} is malformed: {exc}") from exc
        templates.append(Template(prefix=prefix, weight=weight, pivot_beliefs=beliefs))
    markers = spec["markers"]
    if not isinstance(markers, Mapping):
        raise LmSpecError("'markers' must map alternatives to token lists")
    return ScriptedLm(templates, {str(alt): list(toks) for alt, toks in markers.items()})


def generate_run(
    lm: ScriptedLm,
    scenario_id: str,
    config: SamplingConfig,
    rng: np.random.Generator | None = None,
    run_index: int = 0,
) -> GenerationRun:
    """Sample one generation run from the scripted model.

    With no explicit ``rng`` the run draws from its own counter block derived
    from (config.seed, scenario_id, run_index); passing a generator consumes
    two uniforms from it (none under greedy decoding).
    """
    if scenario_id not in set(lm.scenario_ids):
        raise KeyError(f"unknown scenario {scenario_id!r}")
    if config.temperature == 0.0:
        t_idx, marker = lm.sample_outcome(scenario_id, 0.0, 0.0, 0.0)
    else:
        if rng is None:
            rng = _rng.run_stream(config.seed, scenario_id, run_index)
        u_template = rng.random()
        u_marker = rng.random()
        t_idx, marker = lm.sample_outcome(scenario_id, config.temperature, u_template, u_marker)
    return lm.assemble_run(t_idx, marker, scenario_id, config, run_index)
