"""Pivot detection and choice/belief extraction from generation runs.

A run's pivot is the earliest position where the emitted tokens commit to
exactly one alternative's marker. The choice is that alternative; the belief
is the recorded probability mass at the pivot position restricted to the
alternatives' marker tokens and renormalized over them, so filler tokens
never enter the denominator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .generation import GenerationRun


class PivotError(ValueError):
    """Base class for pivot-detection failures."""


class NoPivotError(PivotError):
    """No marker sequence occurs anywhere in the run (off-task response)."""


class AmbiguousPivotError(PivotError):
    """A window matches markers of several alternatives and the run ends unresolved."""


class MassTooSmallError(ValueError):
    """Marker mass at the pivot position is negligible, signaling a misdetected pivot."""


_ALTSET_KEYS = {"alternatives", "markers"}

# Minimum pre-normalization marker mass at the pivot; below this the pivot is
# considered misdetected rather than merely truncated.
MIN_PIVOT_MASS = 1e-9


@dataclass(frozen=True)
class PivotResult:
    pivot_index: int
    alternative: str
    matched_marker: tuple[str, ...]


@dataclass(frozen=True)
class BeliefVector:
    """Normalized belief over the alternatives, plus which ones were truncated.

    ``truncation_flags`` names the alternatives whose marker tokens were all
    absent from the recorded top-K at the pivot position; such alternatives
    carry zero mass and the rest renormalize over what was recorded.
    """

    alternatives: tuple[str, ...]
    values: dict[str, float]
    truncation_flags: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        total = sum(self.values.values())
        if any(v < 0 for v in self.values.values()):
            raise ValueError("belief values must be nonnegative")
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"belief values sum to {total!r}, expected 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.values[a] for a in self.alternatives], dtype=np.float64)


class AlternativeSet:
    """Ordered alternatives and their marker token sequences.

    Marker sequences may span several tokens; across alternatives no marker
    may be a prefix of another alternative's marker, which is what makes the
    shortest-unique-prefix walk in :func:`detect_pivot` well defined. Matching
    is exact on token text unless ``case_fold`` is set.
    """

    def __init__(
        self,
        alternatives: Sequence[str],
        markers: Mapping[str, Sequence[Sequence[str]]],
        case_fold: bool = False,
    ):
        self.alternatives = tuple(alternatives)
        self.case_fold = bool(case_fold)
        if len(self.alternatives) < 2:
            raise ValueError("at least two alternatives are required")
        if set(markers) != set(self.alternatives):
            raise ValueError("markers must cover exactly the listed alternatives")
        norm = self._norm
        self.markers: dict[str, tuple[tuple[str, ...], ...]] = {}
        for alt in self.alternatives:
            seqs = []
            for seq in markers[alt]:
                seq = tuple(seq)
                if not seq or any(not isinstance(t, str) or not t for t in seq):
                    raise ValueError(f"markers for {alt!r} must be non-empty token sequences")
                if seq in seqs:
                    raise ValueError(f"duplicate marker {seq!r} for {alt!r}")
                seqs.append(seq)
            if not seqs:
                raise ValueError(f"alternative {alt!r} has no markers")
            self.markers[alt] = tuple(seqs)
        flat = [
            (alt, tuple(norm(t) for t in seq), seq)
            for alt in self.alternatives
            for seq in self.markers[alt]
        ]
        for a1, m1, _ in flat:
            for a2, m2, _ in flat:
                if a1 != a2 and len(m1) <= len(m2) and m2[: len(m1)] == m1:
                    raise ValueError(
                        f"marker {m1!r} of {a1!r} is a prefix of marker {m2!r} of {a2!r}"
                    )
        self._flat = tuple(flat)

    def _norm(self, token: str) -> str:
        return token.casefold() if self.case_fold else token

    def index(self, alternative: str) -> int:
        return self.alternatives.index(alternative)

    def first_tokens(self, alternative: str) -> tuple[str, ...]:
        """Distinct first tokens of the alternative's markers (normalized)."""
        seen: list[str] = []
        for seq in self.markers[alternative]:
            tok = self._norm(seq[0])
            if tok not in seen:
                seen.append(tok)
        return tuple(seen)

    @classmethod
    def from_single_tokens(cls, markers: Mapping[str, Sequence[str]], case_fold: bool = False):
        """Build from one-token markers, e.g. a scripted model's marker map."""
        return cls(
            alternatives=tuple(markers),
            markers={alt: [[tok] for tok in toks] for alt, toks in markers.items()},
            case_fold=case_fold,
        )

    @classmethod
    def from_json(cls, path) -> "AlternativeSet":
        """Load {"alternatives": [...], "markers": {alt: [[token, ...], ...]}}; unknown fields rejected."""
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError("alternative-set file must hold a JSON object")
        unknown = set(raw) - _ALTSET_KEYS
        if unknown:
            raise ValueError(f"unknown alternative-set fields: {sorted(unknown)}")
        return cls(alternatives=raw["alternatives"], markers=raw["markers"])


def _match_at(tokens: Sequence[str], start: int, alts: AlternativeSet):
    """Walk forward from ``start``. Returns ("hit", alt, marker), ("dead",) or ("ambiguous",)."""
    norm = alts._norm
    live = list(alts._flat)
    depth = 0
    while True:
        pos = start + depth
        if pos >= len(tokens):
            return ("ambiguous",) if len({a for a, _, _ in live}) >= 2 else ("dead",)
        tok = norm(tokens[pos])
        depth += 1
        live = [entry for entry in live if len(entry[1]) >= depth and entry[1][depth - 1] == tok]
        if not live:
            return ("dead",)
        live_alts = {a for a, _, _ in live}
        completed = [entry for entry in live if len(entry[1]) == depth]
        if completed and len(live_alts) == 1:
            alt, _, raw = min(completed, key=lambda entry: len(entry[1]))
            return ("hit", alt, raw)


def detect_pivot(tokens: Sequence[str], alts: AlternativeSet) -> PivotResult:
    """Find the earliest position whose token window resolves to exactly one alternative.

    Multi-token markers must match contiguously from the pivot position; the
    returned ``pivot_index`` points at the first token of the match. Raises
    :class:`NoPivotError` when no marker occurs, and :class:`AmbiguousPivotError`
    when a window consistent with two or more alternatives runs off the end of
    the sequence without resolving.
    """
    if not tokens:
        raise ValueError("token sequence must be non-empty")
    saw_ambiguous = False
    for start in range(len(tokens)):
        result = _match_at(tokens, start, alts)
        if result[0] == "hit":
            return PivotResult(pivot_index=start, alternative=result[1], matched_marker=result[2])
        if result[0] == "ambiguous":
            saw_ambiguous = True
    if saw_ambiguous:
        raise AmbiguousPivotError("marker window matched several alternatives and never resolved")
    raise NoPivotError("no alternative marker occurs in the token sequence")


def extract_choice(run: GenerationRun, alts: AlternativeSet) -> str:
    """The alternative resolved at the run's pivot."""
    return detect_pivot(run.tokens, alts).alternative


def extract_belief(run: GenerationRun, alts: AlternativeSet) -> BeliefVector:
    """Belief over the alternatives from the recorded top-K at the pivot position.

    Each alternative's mass sums exp(logprob) over its distinct marker first
    tokens present in the top-K (multi-token markers contribute their first
    token's probability only). Alternatives entirely absent from the top-K get
    zero mass and a truncation flag; the rest renormalize over recorded mass.
    """
    pivot = detect_pivot(run.tokens, alts)
    entries = run.top_logprobs[pivot.pivot_index]
    prob_of: dict[str, float] = {}
    for tok, lp in entries:
        tok = alts._norm(tok)
        if tok not in prob_of:
            prob_of[tok] = math.exp(lp)
    masses: dict[str, float] = {}
    flags = []
    for alt in alts.alternatives:
        firsts = alts.first_tokens(alt)
        present = [prob_of[t] for t in firsts if t in prob_of]
        if not present:
            masses[alt] = 0.0
            flags.append(alt)
        else:
            masses[alt] = sum(present)
    total = sum(masses.values())
    if total < MIN_PIVOT_MASS:
        raise MassTooSmallError(
            f"marker mass {total!r} at pivot position {pivot.pivot_index} is too small"
        )
    values = {alt: masses[alt] / total for alt in alts.alternatives}
    return BeliefVector(
        alternatives=alts.alternatives, values=values, truncation_flags=frozenset(flags)
    )
