import json
import math
import os
from pathlib import Path

import numpy as np
import pytest

from tokenbelief.beliefs import AlternativeSet, extract_belief
from tokenbelief.generation import SamplingConfig, generate_run
from tokenbelief.ingest import (
    DEFAULT_MODEL,
    DEFAULT_PROMPT,
    PromptTemplate,
    RunFileError,
    TruncatedTopKWarning,
    WireRequest,
    WireSchemaError,
    build_request,
    collect_live_runs,
    load_runs,
    parse_response,
    persist_runs,
)
from tokenbelief.study import default_oracle

GOLDEN = Path(__file__).parent / "data" / "chat_response_golden.json"


def wire_payload_from_run(run):
    """Re-encode an oracle run in the documented wire schema."""
    content = []
    for token, entries in zip(run.tokens, run.top_logprobs):
        lp = dict(entries)[token]
        content.append(
            {
                "token": token,
                "logprob": lp,
                "top_logprobs": [{"token": t, "logprob": l} for t, l in entries],
            }
        )
    return {
        "choices": [
            {
                "message": {"role": "assistant", "content": "".join(run.tokens)},
                "logprobs": {"content": content},
            }
        ]
    }


class TestPromptTemplate:
    def test_requires_exactly_one_slot(self):
        with pytest.raises(ValueError):
            PromptTemplate(system_text="s", user_text_with_slot="no slot")
        with pytest.raises(ValueError):
            PromptTemplate(system_text="s", user_text_with_slot="{price} and {price}")


class TestBuildRequest:
    def test_price_substitution(self):
        request = build_request(DEFAULT_PROMPT, 31, SamplingConfig())
        user = request.messages[1][1]
        assert "31 cents per Pampers diaper and 30 cents per Huggies diaper" in user

    def test_serialized_parameterization(self):
        request = build_request(DEFAULT_PROMPT, 28, SamplingConfig(temperature=1.0, top_k_recorded=20))
        body = request.body()
        assert body["logprobs"] is True
        assert body["top_logprobs"] == 20
        assert body["max_completion_tokens"] == 200
        assert body["temperature"] == 1.0
        assert body["model"] == DEFAULT_MODEL
        assert [m["role"] for m in body["messages"]] == ["system", "user"]

    def test_byte_identical_serialization(self):
        a = build_request(DEFAULT_PROMPT, 33, SamplingConfig(seed=1))
        b = build_request(DEFAULT_PROMPT, 33, SamplingConfig(seed=2))
        assert a.to_json() == b.to_json()

    def test_fractional_price_rejected(self):
        with pytest.raises(ValueError):
            build_request(DEFAULT_PROMPT, 30.5, SamplingConfig())

    def test_request_invariants(self):
        with pytest.raises(ValueError):
            WireRequest(model_name="m", messages=(("user", "hi"),), logprobs_enabled=False)
        with pytest.raises(ValueError):
            WireRequest(model_name="m", messages=(("user", "hi"),), top_logprobs=21)


class TestParseResponse:
    def test_golden_fixture(self):
        run = parse_response(GOLDEN.read_bytes(), scenario_id="31")
        assert len(run.tokens) == 8
        assert run.tokens[4] == "P"
        assert run.text == "I would choose **Pampers** because the wetness indicator is useful."
        alts = AlternativeSet(
            ("Pampers", "Huggies", "neither"),
            {"Pampers": [["P"]], "Huggies": [["H"]], "neither": [["neither"]]},
        )
        belief = extract_belief(run, alts)
        masses = {
            "Pampers": math.exp(-0.35),
            "Huggies": math.exp(-1.3),
            "neither": math.exp(-4.5),
        }
        total = sum(masses.values())
        for alt, mass in masses.items():
            assert abs(belief.values[alt] - mass / total) < 1e-12

    def test_empty_choices_rejected(self):
        with pytest.raises(WireSchemaError):
            parse_response(json.dumps({"choices": []}))

    def test_missing_logprobs_rejected(self):
        payload = {"choices": [{"message": {"content": "hi"}}]}
        with pytest.raises(WireSchemaError):
            parse_response(json.dumps(payload))

    def test_invalid_json_rejected(self):
        with pytest.raises(WireSchemaError):
            parse_response(b"{not json")

    def test_positive_logprob_rejected(self):
        payload = {
            "choices": [
                {
                    "message": {"content": "x"},
                    "logprobs": {
                        "content": [
                            {"token": "x", "logprob": 0.2, "top_logprobs": [{"token": "x", "logprob": 0.2}]}
                        ]
                    },
                }
            ]
        }
        with pytest.raises(WireSchemaError):
            parse_response(json.dumps(payload))

    def test_missing_topk_warns_and_falls_back(self):
        payload = {
            "choices": [
                {
                    "message": {"content": "x"},
                    "logprobs": {"content": [{"token": "x", "logprob": -0.5}]},
                }
            ]
        }
        with pytest.warns(TruncatedTopKWarning):
            run = parse_response(json.dumps(payload))
        assert run.top_logprobs == ((("x", -0.5),),)

    def test_oracle_run_round_trips_through_wire_schema(self):
        lm = default_oracle()
        config = SamplingConfig(seed=41)
        run = generate_run(lm, "31", config, run_index=2)
        payload = wire_payload_from_run(run)
        parsed = parse_response(json.dumps(payload), scenario_id="31", run_index=2,
                                seed=run.seed, temperature=run.temperature)
        assert parsed.tokens == run.tokens
        assert parsed.top_logprobs == run.top_logprobs


class TestPersistence:
    def make_runs(self, n_per_scenario=4):
        lm = default_oracle()
        config = SamplingConfig(seed=42)
        return [
            generate_run(lm, sid, config, run_index=r)
            for sid in lm.scenario_ids
            for r in range(n_per_scenario)
        ]

    def test_round_trip_identity(self, tmp_path):
        runs = self.make_runs()
        path = tmp_path / "runs.jsonl"
        assert persist_runs(runs, path) == len(runs)
        assert load_runs(path) == runs

    def test_serialization_is_canonical(self, tmp_path):
        runs = self.make_runs()
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        persist_runs(runs, a)
        persist_runs(load_runs(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_empty_file_loads_empty(self, tmp_path):
        path = tmp_path / "runs.jsonl"
        path.write_text("")
        assert load_runs(path) == []

    def test_corrupt_line_names_line_number(self, tmp_path):
        runs = self.make_runs(1)
        path = tmp_path / "runs.jsonl"
        persist_runs(runs, path)
        lines = path.read_text().splitlines()
        lines[2] = "{broken"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(RunFileError, match="line 3"):
            load_runs(path)

    def test_version_mismatch_names_both_versions(self, tmp_path):
        runs = self.make_runs(1)
        path = tmp_path / "runs.jsonl"
        persist_runs(runs, path)
        record = json.loads(path.read_text().splitlines()[0])
        record["v"] = 2
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(RunFileError, match=r"version 2.*supports 1"):
            load_runs(path)

    def test_unknown_field_rejected(self, tmp_path):
        runs = self.make_runs(1)
        path = tmp_path / "runs.jsonl"
        persist_runs(runs, path)
        record = json.loads(path.read_text().splitlines()[0])
        record["surprise"] = True
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(RunFileError, match="unknown fields"):
            load_runs(path)

    def test_text_field_survives(self, tmp_path):
        run = parse_response(GOLDEN.read_bytes(), scenario_id="31")
        path = tmp_path / "runs.jsonl"
        persist_runs([run], path)
        assert load_runs(path)[0].text == run.text


class TestLiveCollection:
    def test_offline_mode_refuses(self, tmp_path):
        with pytest.raises(RuntimeError, match="offline"):
            collect_live_runs(
                DEFAULT_PROMPT, [31], 1, SamplingConfig(), tmp_path / "x.jsonl", offline=True
            )

    def test_missing_credentials_refuse(self, tmp_path, monkeypatch):
        monkeypatch.delenv("TOKENBELIEF_API_KEY", raising=False)
        with pytest.raises(RuntimeError, match="TOKENBELIEF_API_KEY"):
            collect_live_runs(DEFAULT_PROMPT, [31], 1, SamplingConfig(), tmp_path / "x.jsonl")
