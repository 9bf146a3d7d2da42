import json

import numpy as np
import pytest
from scipy.stats import qmc

import oracles
from synthfix import CATEGORIES, rect_mask
from layoutfuse.dataset import Annotation, AnnotationSet, ImageInfo
from layoutfuse.ensemble import InstancePrediction, PredictionBundle
from layoutfuse.tuner import (
    BudgetExhaustedError,
    GpPosterior,
    ThresholdPair,
    TunerState,
    evaluate_objective,
    expected_improvement,
    fit_hyperparams,
    gp_fit,
    optimize,
    propose_next,
    tune,
)


def paraboloid(pair: ThresholdPair) -> float:
    return 1.0 - (pair.confidence - 0.3) ** 2 - (pair.iou - 0.6) ** 2


def smooth_points(n, seed=0):
    rng = np.random.default_rng(seed)
    pts = []
    for _ in range(n):
        c, i = rng.random(2)
        pts.append((ThresholdPair(float(c), float(i)), paraboloid(ThresholdPair(c, i))))
    return pts


class TestGp:
    def test_posterior_interpolates_observations(self):
        points = smooth_points(12)
        post = gp_fit(points)
        for pair, value in points:
            mu, _ = post.predict(pair.as_array()[None, :])
            assert abs(float(mu[0]) - value) < 1e-3

    def test_observations_within_three_sigma_of_noise(self):
        points = smooth_points(15, seed=3)
        post = gp_fit(points)
        band = 3.0 * np.sqrt(post.hp.noise_var)
        for pair, value in points:
            mu, _ = post.predict(pair.as_array()[None, :])
            assert abs(float(mu[0]) - value) <= band + 1e-9

    def test_variance_smaller_at_data_than_far_corner(self):
        points = [
            (ThresholdPair(0.1, 0.1), 0.5),
            (ThresholdPair(0.2, 0.15), 0.55),
            (ThresholdPair(0.15, 0.25), 0.52),
        ]
        post = gp_fit(points)
        _, var_data = post.predict(np.array([[0.1, 0.1]]))
        _, var_corner = post.predict(np.array([[1.0, 1.0]]))
        assert var_data[0] <= var_corner[0]

    def test_beats_prior_on_held_out_grid(self):
        points = smooth_points(20, seed=7)
        post = gp_fit(points)
        grid = np.array([[x, y] for x in np.linspace(0, 1, 11) for y in np.linspace(0, 1, 11)])
        truth = np.array([paraboloid(ThresholdPair(float(x), float(y))) for x, y in grid])
        mu, _ = post.predict(grid)
        rmse_post = float(np.sqrt(np.mean((mu - truth) ** 2)))
        rmse_prior = float(np.sqrt(np.mean((truth.mean() - truth) ** 2)))
        assert rmse_post < rmse_prior

    def test_degenerate_constant_observations(self):
        points = [(ThresholdPair(0.1 * i, 0.1 * i), 0.4) for i in range(1, 6)]
        post = gp_fit(points)
        mu, var = post.predict(np.array([[0.9, 0.9]]))
        assert mu[0] == pytest.approx(0.4, abs=1e-6)
        assert var[0] >= 0.0

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            gp_fit([(ThresholdPair(0.5, 0.5), 1.0)])


class TestPropose:
    def _state_from(self, pairs_values, seed=3, budget=40):
        state = TunerState(seed=seed, budget=budget)
        for pair, value in pairs_values:
            state.record(pair, value)
        return state

    def test_ei_vanishes_at_incumbent(self):
        points = smooth_points(10, seed=1)
        post = gp_fit(points)
        incumbent_pair = max(points, key=lambda pv: pv[1])[0]
        incumbent = max(v for _, v in points)
        ei = expected_improvement(post, incumbent_pair.as_array()[None, :], incumbent)
        # Residual EI at the incumbent comes only from the fitted noise floor.
        assert ei[0] <= np.sqrt(post.hp.noise_var)
        state = self._state_from(points)
        proposal = propose_next(state)
        assert proposal.as_array().tolist() != incumbent_pair.as_array().tolist()

    def test_proposal_leaves_sampled_cluster(self):
        rng = np.random.default_rng(0)
        points = []
        for _ in range(10):
            c, i = rng.uniform(0.0, 0.25, 2)
            points.append((ThresholdPair(float(c), float(i)), float(0.5 + 0.05 * c)))
        proposal = propose_next(self._state_from(points))
        assert max(proposal.confidence, proposal.iou) > 0.25

    def test_never_proposes_evaluated_point(self):
        state = self._state_from(
            [(ThresholdPair(float(r[0]), float(r[1])), 0.7)
             for r in qmc.LatinHypercube(d=2, seed=5).random(8)],
            seed=5,
        )
        x = state.x_array()
        for _ in range(5):
            proposal = propose_next(state)
            dist = np.min(np.max(np.abs(x - proposal.as_array()[None, :]), axis=1))
            assert dist >= 1e-9
            state.record(proposal, 0.7)
            x = state.x_array()

    def test_budget_exhausted(self):
        state = self._state_from(smooth_points(4), budget=4)
        with pytest.raises(BudgetExhaustedError):
            propose_next(state)

    def test_duplicate_record_rejected(self):
        state = TunerState(seed=0, budget=10)
        state.record(ThresholdPair(0.5, 0.5), 0.3)
        with pytest.raises(ValueError):
            state.record(ThresholdPair(0.5, 0.5), 0.4)

    def test_non_finite_objective_rejected(self):
        state = TunerState(seed=0, budget=10)
        with pytest.raises(ValueError):
            state.record(ThresholdPair(0.5, 0.5), float("nan"))


class TestOptimize:
    def test_finds_paraboloid_optimum(self):
        for seed in range(5):
            best, _ = optimize(paraboloid, budget=40, seed=seed)
            assert max(abs(best.confidence - 0.3), abs(best.iou - 0.6)) <= 0.05

    def test_constant_objective_runs_full_budget(self):
        best, state = optimize(lambda p: 0.5, budget=12, seed=2)
        assert len(state.points) == 12
        assert state.best()[1] == 0.5

    def test_deterministic_trace(self):
        _, a = optimize(paraboloid, budget=16, seed=9)
        _, b = optimize(paraboloid, budget=16, seed=9)
        assert a.trace_json() == b.trace_json()

    def test_all_points_in_unit_square(self):
        _, state = optimize(paraboloid, budget=20, seed=4)
        for pair, _ in state.points:
            assert 0.0 <= pair.confidence <= 1.0
            assert 0.0 <= pair.iou <= 1.0

    def test_best_so_far_non_decreasing(self):
        _, state = optimize(paraboloid, budget=24, seed=6)
        values = [v for _, v in state.points]
        running = np.maximum.accumulate(values)
        assert (np.diff(running) >= 0).all()

    def test_budget_below_initial_design_rejected(self):
        with pytest.raises(ValueError):
            optimize(paraboloid, budget=4, seed=0)

    def test_trace_json_schema(self, tmp_path):
        _, state = optimize(paraboloid, budget=10, seed=1)
        state.save_trace(tmp_path / "trace.json")
        trace = json.loads((tmp_path / "trace.json").read_text())
        assert len(trace) == 10
        assert set(trace[0]) == {"iteration", "confidence", "iou", "objective"}
        assert [t["iteration"] for t in trace] == list(range(10))

    def test_budget_200_matches_grid_search(self):
        (gx, gy), grid_best = oracles.grid_search_max(
            lambda x, y: 1.0 - (x - 0.3) ** 2 - (y - 0.6) ** 2
        )
        assert (gx, gy) == (0.3, 0.6)
        _, state = optimize(paraboloid, budget=200, seed=1)
        assert abs(state.best()[1] - grid_best) <= 1e-3


def objective_fixture():
    """Truth plus one bundle where confidence 0.25 is the sweet spot: real
    instances at >= 0.3, junk at 0.2."""
    images = (ImageInfo(1, "a.png", 16, 16), ImageInfo(2, "b.png", 16, 16))
    real = rect_mask(16, 16, 2, 2, 12, 12)
    anns = (Annotation(1, 1, 1, real), Annotation(2, 2, 2, real))
    truth = AnnotationSet(images, CATEGORIES, anns)
    junk = rect_mask(16, 16, 0, 0, 16, 16)
    preds = (
        InstancePrediction(1, 1, 0.9, real, "m"),
        InstancePrediction(2, 2, 0.35, real, "m"),
        InstancePrediction(1, 2, 0.2, junk, "m"),
        InstancePrediction(2, 1, 0.2, junk, "m"),
    )
    return truth, [PredictionBundle("m", preds)]


class TestObjective:
    def test_perfect_predictions_score_one(self):
        truth, bundles = objective_fixture()
        clean = [
            PredictionBundle(
                "m", tuple(p for p in bundles[0].predictions if p.confidence >= 0.3)
            )
        ]
        assert evaluate_objective(ThresholdPair(0.0, 0.0), clean, truth) == 1.0

    def test_threshold_one_scores_empties(self):
        truth, bundles = objective_fixture()
        got = evaluate_objective(ThresholdPair(1.0, 0.5), bundles, truth)
        # All predictions dropped. paragraph: dice (0, 1) over the two
        # images, text_box likewise, image/table empty-empty everywhere.
        assert got == (0.5 + 0.5 + 1.0 + 1.0) / 4

    def test_operating_point_beats_corners(self):
        truth, bundles = objective_fixture()
        centre = evaluate_objective(ThresholdPair(0.25, 0.7), bundles, truth)
        for corner in ((0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)):
            assert centre > evaluate_objective(ThresholdPair(*corner), bundles, truth)

    def test_instance_map_objective_runs(self):
        truth, bundles = objective_fixture()
        got = evaluate_objective(
            ThresholdPair(0.25, 0.7), bundles, truth, objective_kind="instance_map"
        )
        assert 0.0 <= got <= 1.0

    def test_tune_on_fixture_is_deterministic(self):
        truth, bundles = objective_fixture()
        best_a, state_a = tune(bundles, truth, budget=10, seed=3)
        best_b, state_b = tune(bundles, truth, budget=10, seed=3)
        assert best_a == best_b
        assert state_a.trace_json() == state_b.trace_json()
        assert len(state_a.points) == 10
