"""Chat-completions logprob client plus durable JSONL persistence of runs.

Real model data and scripted-oracle data flow through one pipeline: a wire
response parses into the same GenerationRun structure the oracle emits, and
runs persist as one JSON object per line so collections append, stream, and
resume. The live-call path is optional, gated by an environment variable,
and never touched by the test suite.
"""

from __future__ import annotations

import json
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

from .generation import GenerationRun, SamplingConfig

SCHEMA_VERSION = 1

DEFAULT_MODEL = "gpt-4o-2024-11-20"

API_KEY_ENV = "TOKENBELIEF_API_KEY"
API_URL_ENV = "TOKENBELIEF_API_URL"
DEFAULT_API_URL = "https://api.openai.com/v1/chat/completions"

_RECORD_KEYS = {"v", "scenario", "run", "tokens", "top_logprobs", "temperature", "seed"}
_OPTIONAL_KEYS = {"text"}


class WireSchemaError(ValueError):
    """A wire response does not carry the fields the logprob pipeline needs."""


class RunFileError(ValueError):
    """A persisted run file is corrupt or has an unsupported schema version."""


class TruncatedTopKWarning(UserWarning):
    """A parsed position carried fewer recorded alternatives than expected."""


@dataclass(frozen=True)
class PromptTemplate:
    """System and user text; the user text holds exactly one ``{price}`` slot."""

    system_text: str
    user_text_with_slot: str

    def __post_init__(self) -> None:
        if self.user_text_with_slot.count("{price}") != 1:
            raise ValueError("user text must contain exactly one {price} slot")


DEFAULT_PROMPT = PromptTemplate(
    system_text=(
        "You are visiting a store to buy baby diapers. Decide whether you would "
        "buy one of the brands on the shelf, and if so which one. Name at most "
        "one brand."
    ),
    user_text_with_slot=(
        "The store carries two baby diaper brands: Pampers and Huggies. Pampers "
        "diapers are soft and include a wetness indicator. Huggies diapers fit "
        "snugly and help prevent leaks. The unit prices are {price} cents per "
        "Pampers diaper and 30 cents per Huggies diaper. You may pick one brand "
        'to buy, or answer "neither" if you would pick a different brand. '
        "Question: Would you choose to buy Pampers, Huggies, or neither?"
    ),
)


@dataclass(frozen=True)
class WireRequest:
    """One chat-completions call with token logprobs enabled."""

    model_name: str
    messages: tuple[tuple[str, str], ...]
    logprobs_enabled: bool = True
    top_logprobs: int = 20
    max_completion_tokens: int = 200
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if not self.logprobs_enabled:
            raise ValueError("logprobs must stay enabled; the pipeline needs them")
        if not (1 <= self.top_logprobs <= 20):
            raise ValueError("top_logprobs must lie in [1, 20]")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")

    def body(self) -> dict:
        return {
            "model": self.model_name,
            "messages": [{"role": role, "content": content} for role, content in self.messages],
            "logprobs": True,
            "top_logprobs": self.top_logprobs,
            "max_completion_tokens": self.max_completion_tokens,
            "temperature": self.temperature,
        }

    def to_json(self) -> str:
        return json.dumps(self.body())


def build_request(
    template: PromptTemplate,
    focal_price: float,
    config: SamplingConfig,
    model_name: str = DEFAULT_MODEL,
) -> WireRequest:
    """Render the prompt at one focal price and wrap it in a request body.

    Prices render as integer cents; anything fractional is rejected.
    """
    if float(focal_price) != int(focal_price):
        raise ValueError(f"focal price must be whole cents, got {focal_price!r}")
    user_text = template.user_text_with_slot.replace("{price}", str(int(focal_price)))
    return WireRequest(
        model_name=model_name,
        messages=(("system", template.system_text), ("user", user_text)),
        top_logprobs=config.top_k_recorded,
        temperature=config.temperature,
    )


def parse_response(
    raw: bytes | str,
    scenario_id: str = "",
    run_index: int = 0,
    seed: int = -1,
    temperature: float = 1.0,
) -> GenerationRun:
    """Turn a chat-completions JSON body into a GenerationRun.

    Tokens and per-position top-K alternatives come from
    ``choices[0].logprobs.content``; the textual output is retained on the run
    for audit. Positions whose top-K list is missing fall back to the sampled
    token's own logprob and raise a :class:`TruncatedTopKWarning`. Recorded
    probabilities are never invented: downstream belief extraction sees
    exactly what the endpoint returned.
    """
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise WireSchemaError(f"response is not valid JSON: {exc}") from exc
    choices = payload.get("choices")
    if not choices:
        raise WireSchemaError("response carries no choices")
    choice = choices[0]
    logprobs = choice.get("logprobs")
    if not logprobs or logprobs.get("content") is None:
        raise WireSchemaError(
            "response has no logprobs content; was the request sent with logprobs enabled?"
        )
    tokens: list[str] = []
    positions: list[tuple[tuple[str, float], ...]] = []
    truncated = False
    for i, entry in enumerate(logprobs["content"]):
        try:
            token = entry["token"]
            logprob = float(entry["logprob"])
        except (KeyError, TypeError) as exc:
            raise WireSchemaError(f"logprob entry {i} is malformed: {exc}") from exc
        top = entry.get("top_logprobs") or []
        pairs = []
        for alt in top:
            try:
                pairs.append((alt["token"], float(alt["logprob"])))
            except (KeyError, TypeError) as exc:
                raise WireSchemaError(f"top_logprobs entry at position {i} is malformed: {exc}") from exc
        if not pairs:
            truncated = True
            pairs = [(token, logprob)]
        if any(lp > 1e-12 for _, lp in pairs):
            raise WireSchemaError(f"position {i} carries a positive log-probability")
        pairs.sort(key=lambda p: -p[1])
        tokens.append(token)
        positions.append(tuple(pairs))
    if not tokens:
        raise WireSchemaError("response contains no generated tokens")
    if truncated:
        warnings.warn(
            "some positions lacked top-K alternatives; recorded the sampled token only",
            TruncatedTopKWarning,
            stacklevel=2,
        )
    message = choice.get("message") or {}
    return GenerationRun(
        scenario_id=scenario_id,
        tokens=tuple(tokens),
        top_logprobs=tuple(positions),
        seed=seed,
        temperature=temperature,
        run_index=run_index,
        text=message.get("content"),
    )


# -- JSONL persistence --------------------------------------------------------


def _record_of(run: GenerationRun) -> dict:
    record = {
        "v": SCHEMA_VERSION,
        "scenario": run.scenario_id,
        "run": run.run_index,
        "tokens": list(run.tokens),
        "top_logprobs": [[[tok, lp] for tok, lp in pos] for pos in run.top_logprobs],
        "temperature": run.temperature,
        "seed": run.seed,
    }
    if run.text is not None:
        record["text"] = run.text
    return record


def persist_runs(runs: Iterable[GenerationRun], path) -> int:
    """Append-friendly JSONL dump; returns the number of records written.

    Serialization is canonical (fixed key order, shortest round-trip floats),
    so identical runs produce byte-identical files.
    """
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for run in runs:
            fh.write(json.dumps(_record_of(run)) + "\n")
            count += 1
    return count


def load_runs(path) -> list[GenerationRun]:
    """Read a JSONL run file back; an empty file yields an empty list.

    Raises :class:`RunFileError` naming the offending line for corrupt rows
    and naming both versions on a schema-version mismatch.
    """
    runs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RunFileError(f"line {lineno}: corrupt record ({exc})") from exc
            if not isinstance(record, dict):
                raise RunFileError(f"line {lineno}: record must be a JSON object")
            version = record.get("v")
            if version != SCHEMA_VERSION:
                raise RunFileError(
                    f"line {lineno}: record version {version!r}, reader supports {SCHEMA_VERSION}"
                )
            unknown = set(record) - _RECORD_KEYS - _OPTIONAL_KEYS
            if unknown:
                raise RunFileError(f"line {lineno}: unknown fields {sorted(unknown)}")
            missing = _RECORD_KEYS - set(record)
            if missing:
                raise RunFileError(f"line {lineno}: missing fields {sorted(missing)}")
            try:
                runs.append(
                    GenerationRun(
                        scenario_id=record["scenario"],
                        tokens=tuple(record["tokens"]),
                        top_logprobs=tuple(
                            tuple((tok, float(lp)) for tok, lp in pos)
                            for pos in record["top_logprobs"]
                        ),
                        seed=int(record["seed"]),
                        temperature=float(record["temperature"]),
                        run_index=int(record["run"]),
                        text=record.get("text"),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise RunFileError(f"line {lineno}: malformed record ({exc})") from exc
    return runs


# -- live collection ----------------------------------------------------------


def _post_with_retries(url: str, headers: dict, body: dict, max_attempts: int = 5) -> bytes:
    import requests

    delay = 1.0
    for attempt in range(1, max_attempts + 1):
        try:
            response = requests.post(url, headers=headers, json=body, timeout=120)
            if response.status_code == 200:
                return response.content
            retryable = response.status_code in (408, 409, 429) or response.status_code >= 500
            if not retryable or attempt == max_attempts:
                raise RuntimeError(f"request failed with status {response.status_code}: {response.text[:500]}")
        except requests.RequestException as exc:
            if attempt == max_attempts:
                raise RuntimeError(f"request failed after {max_attempts} attempts: {exc}") from exc
        time.sleep(delay)
        delay = min(delay * 2, 30.0)
    raise RuntimeError("unreachable")


def collect_live_runs(
    template: PromptTemplate,
    focal_prices: Sequence[float],
    runs_per_price: int,
    config: SamplingConfig,
    out_path,
    model_name: str = DEFAULT_MODEL,
    workers: int = 4,
    offline: bool = False,
) -> int:
    """Query the live endpoint and persist every run; returns records written.

    Requires the API key in ``TOKENBELIEF_API_KEY`` (the endpoint URL can be
    overridden via ``TOKENBELIEF_API_URL``). Each call retries with bounded
    exponential backoff; a bounded worker pool keeps at most ``workers``
    requests in flight while a single writer appends results in order.
    """
    if offline:
        raise RuntimeError("live collection is forbidden in offline mode")
    api_key = os.environ.get(API_KEY_ENV)
    if not api_key:
        raise RuntimeError(f"set {API_KEY_ENV} to enable live collection")
    url = os.environ.get(API_URL_ENV, DEFAULT_API_URL)
    headers = {"Authorization": f"Bearer {api_key}"}
    jobs = [
        (price, run_index)
        for price in focal_prices
        for run_index in range(runs_per_price)
    ]

    def fetch(job: tuple[float, int]) -> GenerationRun:
        price, run_index = job
        request = build_request(template, price, config, model_name=model_name)
        raw = _post_with_retries(url, headers, request.body())
        return parse_response(
            raw,
            scenario_id=f"{price:g}",
            run_index=run_index,
            temperature=config.temperature,
        )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        runs = list(pool.map(fetch, jobs))
    return persist_runs(runs, out_path)
