"""Command-line front door wiring the library into reproducible experiments.

Every command writes its outputs plus a ``manifest.json`` (seed, versions,
input digests) under ``--out``; rerunning a command with the same seed yields
byte-identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy
import scipy

from . import __version__, ingest, mnl, study
from .beliefs import AlternativeSet
from .generation import SamplingConfig, ScriptedLm


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace, inputs: list[Path], outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "argv": args._argv,
        "seed": args.seed,
        "versions": {
            "tokenbelief": __version__,
            "python": sys.version.split()[0],
            "numpy": numpy.__version__,
            "scipy": scipy.__version__,
        },
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": outputs,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="seed for every random stream")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument(
        "--workers", type=int, default=os.cpu_count() or 1, help="worker count for parallel stages"
    )
    parser.add_argument("--offline", action="store_true", help="forbid all network use")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokenbelief",
        description="Belief- and choice-based measurement studies over token logprobs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate scripted-oracle runs into a JSONL file")
    _add_common(p)
    p.add_argument("--runs", type=int, default=1000, help="runs per scenario")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=20, help="logprobs recorded per position")
    p.add_argument("--lm-spec", default=None, help="scripted-model JSON (default: bundled preset)")

    p = sub.add_parser("extract", help="extract choices and beliefs from a run file")
    _add_common(p)
    p.add_argument("--runs-file", required=True)
    p.add_argument("--alternatives", default=None, help="alternative-set JSON (default: bundled preset)")

    p = sub.add_parser("estimate", help="full-pool estimator tables and logit fits")
    _add_common(p)
    p.add_argument("--runs-file", default=None, help="run file (default: simulate internally)")
    p.add_argument("--pool-runs", type=int, default=1000, help="runs per scenario when simulating")

    p = sub.add_parser("bootstrap", help="paired bootstrap comparison of both measures")
    _add_common(p)
    p.add_argument("--runs", type=int, default=1000, help="resampled runs per scenario per draw")
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--measure", choices=["choice", "belief", "both"], default="both")
    p.add_argument("--runs-file", default=None)
    p.add_argument("--pool-runs", type=int, default=1000)

    p = sub.add_parser("accuracy-curve", help="probability of an accurate price slope per run count")
    _add_common(p)
    p.add_argument("--tolerance", type=float, default=0.10, help="fraction of the true slope")
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--grid", default=None, help="comma-separated run counts")
    p.add_argument("--runs-file", default=None)
    p.add_argument("--pool-runs", type=int, default=1000)

    p = sub.add_parser("temp-sweep", help="share mean and spread under both measures per temperature")
    _add_common(p)
    p.add_argument("--temperatures", default="0,0.2,0.4,0.6,0.8,1.0,1.2,1.4,1.6,1.8")
    p.add_argument("--runs-per-point", type=int, default=1000)
    p.add_argument("--price", type=float, default=31.0, help="focal price of the swept scenario")

    p = sub.add_parser("fetch", help="collect live runs from a chat-completions endpoint")
    _add_common(p)
    p.add_argument("--model", default=ingest.DEFAULT_MODEL)
    p.add_argument("--prices", default=",".join(str(p) for p in range(25, 41)))
    p.add_argument("--runs", type=int, default=1000, help="runs per price")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=20)

    return parser


def _default_grid() -> study.ScenarioGrid:
    return study.ScenarioGrid()


def _load_lm(args) -> tuple[ScriptedLm, list[Path]]:
    if getattr(args, "lm_spec", None):
        path = Path(args.lm_spec)
        return ScriptedLm.from_json(path), [path]
    return study.default_oracle(), []


def _study_pool(args, inputs: list[Path]):
    """Pool plus train/test scenario lists for the study commands."""
    grid = _default_grid()
    scenarios = study.build_scenarios(grid)
    train, test = study.split_train_test(scenarios, study.SplitSpec())
    config = SamplingConfig(seed=args.seed)
    if getattr(args, "runs_file", None):
        path = Path(args.runs_file)
        inputs.append(path)
        pool = study.collect_runs(path, scenarios, None, config, alternatives=grid.alternatives)
    else:
        pool = study.collect_runs(
            study.default_oracle(), scenarios, args.pool_runs, config, alternatives=grid.alternatives
        )
    return pool, train, test


def run_command(argv: list[str]) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    args._argv = list(argv)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs: list[Path] = []
    outputs: list[str] = []

    if args.command == "simulate":
        lm, inputs = _load_lm(args)
        config = SamplingConfig(temperature=args.temperature, top_k_recorded=args.top_k, seed=args.seed)
        runs = []
        from .generation import generate_run

        for sid in lm.scenario_ids:
            for r in range(args.runs):
                runs.append(generate_run(lm, sid, config, run_index=r))
        ingest.persist_runs(runs, out_dir / "runs.jsonl")
        outputs.append("runs.jsonl")

    elif args.command == "extract":
        path = Path(args.runs_file)
        inputs.append(path)
        if args.alternatives:
            alt_path = Path(args.alternatives)
            inputs.append(alt_path)
            alternatives = AlternativeSet.from_json(alt_path)
        else:
            alternatives = study.default_alternatives()
        pool = study.collect_runs(path, None, None, SamplingConfig(seed=args.seed), alternatives)
        alts = alternatives.alternatives
        import csv as _csv

        with open(out_dir / "records.csv", "w", encoding="utf-8", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["scenario", "run_index", "choice", "pivot_index", *[f"belief_{a}" for a in alts]])
            for sid in pool.scenarios():
                for rec in pool.records(sid):
                    writer.writerow(
                        [sid, rec.run_index, rec.choice, rec.pivot_index]
                        + [repr(rec.belief.values[a]) for a in alts]
                    )
        with open(out_dir / "diagnostics.json", "w", encoding="utf-8") as fh:
            diag = pool.diagnostics
            json.dump(
                {
                    "no_pivot": diag.no_pivot,
                    "ambiguous_pivot": diag.ambiguous_pivot,
                    "mass_too_small": diag.mass_too_small,
                    "truncated_runs": diag.truncated_runs,
                    "by_scenario": diag.by_scenario,
                },
                fh,
                indent=2,
            )
            fh.write("\n")
        outputs += ["records.csv", "diagnostics.json"]

    elif args.command == "estimate":
        pool, train, test = _study_pool(args, inputs)
        from .estimators import write_share_table

        write_share_table(pool, out_dir / "figure1.csv")
        outputs.append("figure1.csv")
        for measure in ("choice", "belief"):
            dataset = mnl.dataset_from_pool(pool, measure, [sc.scenario_id for sc in train])
            fit = mnl.fit_mle(dataset, train, init_seed=args.seed)
            metrics = mnl.predict_metrics(fit.params, test, pool)
            payload = json.loads(fit.to_json())
            payload["test_metrics"] = metrics
            name = f"fit_{measure}.json"
            with open(out_dir / name, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, indent=2)
                fh.write("\n")
            outputs.append(name)

    elif args.command == "bootstrap":
        pool, train, test = _study_pool(args, inputs)
        result = study.bootstrap_estimates(
            pool,
            train,
            test,
            runs_per_scenario=args.runs,
            n_draws=args.draws,
            measure=args.measure,
            seed=args.seed,
            workers=args.workers,
        )
        study.write_table2_csv(out_dir / "table2.csv", [result])
        outputs.append("table2.csv")

    elif args.command == "accuracy-curve":
        pool, train, _ = _study_pool(args, inputs)
        grid = None
        if args.grid:
            grid = tuple(int(x) for x in args.grid.split(","))
        curves = [
            study.accuracy_curve(
                pool,
                train,
                truth_beta=study.DEFAULT_CALIBRATION.beta,
                tolerance_fraction=args.tolerance,
                confidence=args.confidence,
                measure=measure,
                n_draws=args.draws,
                seed=args.seed,
                run_grid=grid,
                workers=args.workers,
            )
            for measure in ("belief", "choice")
        ]
        study.write_figure3_csv(out_dir / "figure3.csv", curves)
        outputs.append("figure3.csv")

    elif args.command == "temp-sweep":
        lm = study.default_oracle()
        temperatures = [float(x) for x in args.temperatures.split(",")]
        points = study.temperature_sweep(
            lm,
            study.price_label(args.price),
            temperatures,
            runs_per_point=args.runs_per_point,
            seed=args.seed,
        )
        study.write_figure4_csv(out_dir / "figure4.csv", points)
        outputs.append("figure4.csv")

    elif args.command == "fetch":
        if args.offline:
            print("usage error: fetch is a network command and --offline forbids it", file=sys.stderr)
            return 2
        config = SamplingConfig(temperature=args.temperature, top_k_recorded=args.top_k, seed=args.seed)
        prices = [float(x) for x in args.prices.split(",")]
        written = ingest.collect_live_runs(
            ingest.DEFAULT_PROMPT,
            prices,
            args.runs,
            config,
            out_dir / "runs.jsonl",
            model_name=args.model,
            workers=args.workers,
        )
        print(f"wrote {written} runs")
        outputs.append("runs.jsonl")

    _write_manifest(out_dir, args.command, args, inputs, outputs)
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        return run_command(argv)
    except SystemExit as exc:  # argparse --help or usage errors
        code = exc.code if isinstance(exc.code, int) else 0
        return code
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
