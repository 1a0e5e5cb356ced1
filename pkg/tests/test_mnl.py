import json
import math

import numpy as np
import pytest

from tokenbelief.beliefs import AlternativeSet
from tokenbelief.estimators import RunPool
from tokenbelief.generation import SamplingConfig
from tokenbelief.mnl import (
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
from tokenbelief.study import (
    DEFAULT_CALIBRATION,
    ScenarioGrid,
    SplitSpec,
    build_scenarios,
    collect_runs,
    default_alternatives,
    default_oracle,
    split_train_test,
)


def scenario(sid, p_pampers, p_huggies=30.0):
    return Scenario(
        scenario_id=sid,
        prices={"Pampers": p_pampers, "Huggies": p_huggies, "neither": 0.0},
    )


TRAIN = [scenario(str(p), float(p)) for p in (25, 27, 30, 33, 36, 40)]


def random_dataset(rng, scenarios):
    rows = []
    for sc in scenarios:
        weights = rng.dirichlet([1.0, 1.0, 1.0]) * rng.uniform(1, 20)
        rows.append((sc.scenario_id, dict(zip(sc.prices, weights.tolist()))))
    return MnlDataset(rows=tuple(rows))


def random_params(rng):
    return MnlParams(
        alpha={"Pampers": float(rng.uniform(-2, 2)), "Huggies": float(rng.uniform(-2, 2))},
        beta=float(rng.uniform(-0.2, 0.2)),
    )


def finite_difference_score(params, dataset, scenarios, h=1e-5):
    names = param_order(scenarios)

    def with_offset(i, delta):
        values = [params.alpha["Pampers"], params.alpha["Huggies"], params.beta]
        values[i] += delta
        return MnlParams(alpha={"Pampers": values[0], "Huggies": values[1]}, beta=values[2])

    grad = np.zeros(len(names))
    for i in range(len(names)):
        up = log_likelihood(with_offset(i, h), dataset, scenarios)
        down = log_likelihood(with_offset(i, -h), dataset, scenarios)
        grad[i] = (up - down) / (2 * h)
    return grad


class TestUtilities:
    def test_zero_parameters(self):
        params = MnlParams(alpha={"Pampers": 0.0, "Huggies": 0.0}, beta=0.0)
        u = utilities(params, scenario("s", 30.0))
        assert u == {"Pampers": 0.0, "Huggies": 0.0, "neither": 0.0}

    def test_calibrated_arithmetic(self):
        u = utilities(DEFAULT_CALIBRATION, scenario("s", 30.0))
        assert abs(u["Pampers"] - 18.126) < 1e-9
        assert u["neither"] == 0.0

    def test_price_linearity(self):
        params = MnlParams(alpha={"Pampers": 1.0, "Huggies": 1.0}, beta=-0.463)
        u1 = utilities(params, scenario("s", 30.0))
        u2 = utilities(params, scenario("s", 31.0))
        assert abs((u2["Pampers"] - u1["Pampers"]) + 0.463) < 1e-12

    def test_missing_brand_rejected(self):
        params = MnlParams(alpha={"Pampers": 1.0}, beta=0.0)
        with pytest.raises(ValueError):
            utilities(params, scenario("s", 30.0))

    def test_outside_price_must_be_zero(self):
        with pytest.raises(ValueError):
            Scenario(scenario_id="s", prices={"Pampers": 30.0, "neither": 1.0})


class TestChoiceProbabilities:
    def test_uniform_at_zero_utilities(self):
        params = MnlParams(alpha={"Pampers": 0.0, "Huggies": 0.0}, beta=0.0)
        shares = choice_probabilities(params, scenario("s", 30.0))
        np.testing.assert_allclose(list(shares.values.values()), [1 / 3] * 3, atol=1e-12)

    def test_calibrated_share_at_equal_prices(self):
        shares = choice_probabilities(DEFAULT_CALIBRATION, scenario("s", 30.0))
        expected = 1.0 / (1.0 + math.exp(-2.572) + math.exp(-18.126))
        assert abs(shares.values["Pampers"] - expected) < 1e-9
        assert abs(shares.values["Pampers"] - 0.929) < 5e-4

    def test_dominance_limit(self):
        params = MnlParams(alpha={"Pampers": 600.0, "Huggies": 0.0}, beta=0.0)
        shares = choice_probabilities(params, scenario("s", 30.0))
        assert shares.values["Pampers"] > 1 - 1e-12

    def test_shift_invariance_including_outside(self):
        u = utilities(DEFAULT_CALIBRATION, scenario("s", 28.0))
        lifted = {k: v + 57.3 for k, v in u.items()}
        base = logit_shares(u)
        moved = logit_shares(lifted)
        for k in u:
            assert abs(base[k] - moved[k]) < 1e-12


class TestLogLikelihood:
    def test_uniform_one_hot(self):
        params = MnlParams(alpha={"Pampers": 0.0, "Huggies": 0.0}, beta=0.0)
        dataset = MnlDataset(rows=(("s", {"Pampers": 1.0}),))
        value = log_likelihood(params, dataset, [scenario("s", 30.0)])
        assert abs(value - math.log(1 / 3)) < 1e-12

    def test_weights_equal_to_probabilities(self):
        # entropy-shaped value on a two-scenario fixture, computed by hand
        params = MnlParams(alpha={"Pampers": 0.5, "Huggies": -0.25}, beta=-0.02)
        scenarios = [scenario("a", 26.0), scenario("b", 34.0)]
        rows = []
        expected = 0.0
        for sc in scenarios:
            shares = choice_probabilities(params, sc).values
            rows.append((sc.scenario_id, dict(shares)))
            expected += sum(p * math.log(p) for p in shares.values())
        value = log_likelihood(params, MnlDataset(rows=tuple(rows)), scenarios)
        assert abs(value - expected) < 1e-12

    def test_doubling_weights_doubles_likelihood(self):
        rng = np.random.default_rng(5)
        dataset = random_dataset(rng, TRAIN)
        doubled = MnlDataset(
            rows=tuple((sid, {a: 2 * w for a, w in ws.items()}) for sid, ws in dataset.rows)
        )
        params = random_params(rng)
        a = log_likelihood(params, dataset, TRAIN)
        b = log_likelihood(params, doubled, TRAIN)
        assert abs(b - 2 * a) < 1e-9 * max(1.0, abs(a))

    def test_zero_weight_on_underflowed_probability_contributes_nothing(self):
        params = MnlParams(alpha={"Pampers": 0.0, "Huggies": 0.0}, beta=-40.0)
        dataset = MnlDataset(rows=(("s", {"neither": 1.0, "Pampers": 0.0}),))
        value = log_likelihood(params, dataset, [scenario("s", 30.0)])
        assert abs(value) < 1e-9  # outside share is ~1, its log ~0

    def test_unknown_scenario_rejected(self):
        params = random_params(np.random.default_rng(6))
        dataset = MnlDataset(rows=(("ghost", {"Pampers": 1.0}),))
        with pytest.raises(ValueError):
            log_likelihood(params, dataset, TRAIN)


class TestScore:
    def test_zero_at_generating_parameters(self):
        rng = np.random.default_rng(7)
        params = random_params(rng)
        rows = []
        for sc in TRAIN:
            shares = choice_probabilities(params, sc).values
            total = float(rng.uniform(1, 5))
            rows.append((sc.scenario_id, {a: total * p for a, p in shares.items()}))
        grad = score(params, MnlDataset(rows=tuple(rows)), TRAIN)
        assert np.max(np.abs(grad)) < 1e-10

    def test_matches_central_finite_differences(self):
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(20):
            params = random_params(rng)
            dataset = random_dataset(rng, TRAIN)
            analytic = score(params, dataset, TRAIN)
            numeric = finite_difference_score(params, dataset, TRAIN)
            rel = np.max(np.abs(analytic - numeric) / (1.0 + np.abs(numeric)))
            worst = max(worst, rel)
        assert worst < 1e-6

    def test_beta_component_reflects_outside_imbalance(self):
        # equal brand prices p: the beta component collapses to
        # p * (model outside mass - data outside mass)
        params = random_params(np.random.default_rng(9))
        p = 30.0
        sc = scenario("s", p, p_huggies=p)
        weights = {"Pampers": 3.0, "Huggies": 2.0, "neither": 0.0}
        grad = score(params, MnlDataset(rows=(("s", weights),)), [sc])
        shares = choice_probabilities(params, sc).values
        total = sum(weights.values())
        expected = p * (total * shares["neither"] - weights["neither"])
        beta_idx = param_order([sc]).index("beta")
        assert abs(grad[beta_idx] - expected) < 1e-9


class TestInformation:
    def test_positive_semidefinite_at_random_points(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            params = random_params(rng)
            dataset = random_dataset(rng, TRAIN)
            info = observed_information(params, dataset, TRAIN)
            eigs = np.linalg.eigvalsh(info)
            assert eigs.min() >= -1e-8


class TestFitMle:
    def test_exact_probability_recovery(self):
        grid = ScenarioGrid()
        train, _ = split_train_test(build_scenarios(grid), SplitSpec())
        rows = []
        for sc in train:
            shares = choice_probabilities(DEFAULT_CALIBRATION, sc).values
            rows.append((sc.scenario_id, {a: 1000.0 * p for a, p in shares.items()}))
        fit = fit_mle(MnlDataset(rows=tuple(rows)), train, init_seed=4)
        assert fit.converged
        assert fit.n_iterations <= 50
        assert abs(fit.params.beta - (-0.463)) < 1e-3
        assert abs((fit.params.alpha["Pampers"] - fit.params.alpha["Huggies"]) - 2.572) < 1e-2
        # score vanishes at the reported optimum
        dataset = MnlDataset(rows=tuple(rows))
        assert np.max(np.abs(score(fit.params, dataset, train))) < 1e-8

    def test_symmetric_brands_get_equal_intercepts(self):
        scenarios = [
            Scenario(scenario_id="a", prices={"X": 28.0, "Y": 28.0, "neither": 0.0}),
            Scenario(scenario_id="b", prices={"X": 34.0, "Y": 34.0, "neither": 0.0}),
        ]
        rows = tuple(
            (sc.scenario_id, {"X": 10.0, "Y": 10.0, "neither": 5.0}) for sc in scenarios
        )
        fit = fit_mle(MnlDataset(rows=rows), scenarios, init_seed=2)
        assert abs(fit.params.alpha["X"] - fit.params.alpha["Y"]) < 1e-8

    def test_belief_scale_data_gives_tight_beta(self):
        lm = default_oracle()
        alts = default_alternatives()
        grid = ScenarioGrid()
        scenarios = build_scenarios(grid)
        train, _ = split_train_test(scenarios, SplitSpec())
        pool = collect_runs(lm, train, 1000, SamplingConfig(seed=31), alts)
        dataset = dataset_from_pool(pool, "belief")
        fit = fit_mle(dataset, train, init_seed=0)
        assert fit.converged
        assert fit.std_errors["beta"] < 0.05
        assert fit.p_values["beta"] < 1e-6

    def test_identification_precondition(self):
        dataset = MnlDataset(rows=(("25", {"Pampers": 1.0}),))
        with pytest.raises(ValueError):
            fit_mle(dataset, TRAIN, init_seed=0)

    def test_degenerate_information_flagged(self):
        # all outcome weight on the outside option: intercept level drifts and
        # the information matrix saturates to singular
        rows = tuple((sc.scenario_id, {"neither": 5.0}) for sc in TRAIN)
        fit = fit_mle(MnlDataset(rows=rows), TRAIN, init_seed=1, max_iter=200)
        assert fit.degenerate_information or all(
            not math.isfinite(se) or se > 1e3 for se in fit.std_errors.values()
        )

    def test_to_json_round_trip(self):
        rows = tuple(
            (sc.scenario_id, {"Pampers": 5.0, "Huggies": 3.0, "neither": 2.0}) for sc in TRAIN
        )
        fit = fit_mle(MnlDataset(rows=rows), TRAIN, init_seed=3)
        payload = json.loads(fit.to_json())
        assert set(payload) == {
            "estimates",
            "std_errors",
            "p_values",
            "log_likelihood",
            "converged",
            "n_iterations",
            "n_observations",
            "degenerate_information",
            "floor_hit",
        }
        assert payload["n_observations"] == fit.n_observations


class TestFractionalEquivalence:
    def test_one_hot_rows_equal_aggregated_fraction(self):
        rng = np.random.default_rng(11)
        lm = default_oracle()
        alts = default_alternatives()
        pool = collect_runs(lm, ["28", "34"], 200, SamplingConfig(seed=32), alts)
        scenarios = [scenario("28", 28.0), scenario("34", 34.0)]
        per_run = dataset_from_pool(pool, "belief", aggregate=False)
        aggregated = dataset_from_pool(pool, "belief", aggregate=True)
        for _ in range(20):
            params = random_params(rng)
            a = log_likelihood(params, per_run, scenarios)
            b = log_likelihood(params, aggregated, scenarios)
            assert abs(a - b) < 1e-9 * max(1.0, abs(a))


class TestPluginConsistency:
    def test_belief_and_choice_fits_converge_together(self):
        lm = default_oracle()
        alts = default_alternatives()
        grid = ScenarioGrid()
        train, _ = split_train_test(build_scenarios(grid), SplitSpec())
        pool = collect_runs(lm, train, 100_000, SamplingConfig(seed=33), alts)
        betas = {}
        for measure in ("choice", "belief"):
            fit = fit_mle(dataset_from_pool(pool, measure), train, init_seed=5)
            betas[measure] = fit.params.beta
        assert abs(betas["choice"] - betas["belief"]) < 0.01


class TestPredictMetrics:
    def test_exact_predictions_are_zero_error(self):
        lm = default_oracle()
        alts = default_alternatives()
        sc = scenario("30", 30.0)
        pool = collect_runs(lm, ["30"], 4000, SamplingConfig(seed=34), alts)
        observed = {
            a: float(np.mean(pool.choice_indices("30") == i))
            for i, a in enumerate(alts.alternatives)
        }
        # a parameter point whose predictions equal the observed shares exactly
        beta = -0.463
        alpha = {
            a: math.log(max(observed[a], 1e-12)) - math.log(max(observed["neither"], 1e-12)) - beta * sc.prices[a]
            for a in ("Pampers", "Huggies")
        }
        params = MnlParams(alpha=alpha, beta=beta)
        metrics = predict_metrics(params, [sc], pool)
        assert metrics["rmse"] < 1e-9
        assert metrics["mae"] < 1e-9

    def test_uniform_prediction_against_one_hot_truth(self):
        lm = default_oracle(ScenarioGrid(focal_prices=(25.0,)))
        alts = default_alternatives()
        pool = collect_runs(lm, ["25"], 1, SamplingConfig(seed=35, temperature=0.0), alts)
        assert pool.choice_indices("25")[0] == 0  # greedy picks the focal brand
        params = MnlParams(alpha={"Pampers": 0.0, "Huggies": 0.0}, beta=0.0)
        metrics = predict_metrics(params, [scenario("25", 25.0)], pool)
        assert abs(metrics["rmse"] - math.sqrt((4 / 9 + 1 / 9 + 1 / 9) / 3)) < 1e-12
        assert abs(metrics["mae"] - 4 / 9) < 1e-12

    def test_rmse_at_least_mae(self):
        rng = np.random.default_rng(12)
        lm = default_oracle()
        alts = default_alternatives()
        pool = collect_runs(lm, ["28", "31", "37"], 100, SamplingConfig(seed=36), alts)
        test = [scenario("28", 28.0), scenario("31", 31.0), scenario("37", 37.0)]
        for _ in range(10):
            metrics = predict_metrics(random_params(rng), test, pool)
            assert metrics["rmse"] >= metrics["mae"] - 1e-15
            assert metrics["mae"] >= 0.0

    def test_empty_test_set_rejected(self):
        lm = default_oracle()
        alts = default_alternatives()
        pool = collect_runs(lm, ["28"], 10, SamplingConfig(seed=37), alts)
        with pytest.raises(ValueError):
            predict_metrics(DEFAULT_CALIBRATION, [], pool)
