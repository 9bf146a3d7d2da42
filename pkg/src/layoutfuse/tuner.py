"""Bayesian optimization of the (confidence, IoU) threshold pair.

Surrogate: Gaussian process with a Matern-5/2 ARD kernel over [0,1]^2,
hyperparameters chosen by maximum marginal likelihood with a multi-start
gradient-free search, and an observation-noise floor of 1e-6 (the dice
objective is piecewise constant in the thresholds, which a noiseless GP
conditions on poorly). Acquisition: Expected Improvement maximized by a
4096-point scrambled Sobol scan plus Nelder-Mead refinement. The search is
seeded end to end, so a (data, budget, seed) triple reproduces its trace.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import optimize as sciopt
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import ndtr
from scipy.stats import qmc

from .dataset import AnnotationSet
from .ensemble import EnsembleConfig, PredictionBundle, fuse_classwise, fuse_instancewise
from .metrics import GroundTruthIndex, evaluate_dice, mean_ap_50_95

NOISE_FLOOR = 1e-6
DUPLICATE_TOLERANCE = 1e-9
INITIAL_DESIGN = 8
SCAN_POINTS = 4096


class BudgetExhaustedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ThresholdPair:
    confidence: float
    iou: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0 and 0.0 <= self.iou <= 1.0):
            raise ValueError(f"thresholds {self} outside [0,1]^2")

    def as_array(self) -> np.ndarray:
        return np.array([self.confidence, self.iou], dtype=np.float64)


@dataclass(frozen=True)
class GpHyperparams:
    length_scales: tuple[float, float]
    signal_var: float
    noise_var: float


@dataclass
class TunerState:
    seed: int
    budget: int
    points: list[tuple[ThresholdPair, float]] = field(default_factory=list)
    hyperparams: GpHyperparams | None = None

    def record(self, pair: ThresholdPair, value: float) -> None:
        if not math.isfinite(value):
            raise ValueError(f"objective returned non-finite value {value} at {pair}")
        x = pair.as_array()
        for prev, _ in self.points:
            if np.max(np.abs(prev.as_array() - x)) < DUPLICATE_TOLERANCE:
                raise ValueError(f"point {pair} duplicates an evaluated point")
        self.points.append((pair, value))

    def best(self) -> tuple[ThresholdPair, float]:
        if not self.points:
            raise ValueError("no evaluations recorded")
        idx = max(range(len(self.points)), key=lambda i: self.points[i][1])
        return self.points[idx]

    def x_array(self) -> np.ndarray:
        return np.array([p.as_array() for p, _ in self.points], dtype=np.float64)

    def y_array(self) -> np.ndarray:
        return np.array([v for _, v in self.points], dtype=np.float64)

    def trace_json(self) -> list[dict]:
        return [
            {
                "iteration": i,
                "confidence": p.confidence,
                "iou": p.iou,
                "objective": v,
            }
            for i, (p, v) in enumerate(self.points)
        ]

    def save_trace(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.trace_json(), indent=2), encoding="utf-8")


def _matern52(sq_dist: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.maximum(sq_dist, 0.0))
    s5d = math.sqrt(5.0) * d
    return (1.0 + s5d + (5.0 / 3.0) * sq_dist) * np.exp(-s5d)


def _scaled_sq_dists(a: np.ndarray, b: np.ndarray, ls: np.ndarray) -> np.ndarray:
    sa = a / ls
    sb = b / ls
    return np.maximum(
        (sa * sa).sum(1)[:, None] + (sb * sb).sum(1)[None, :] - 2.0 * sa @ sb.T, 0.0
    )


class GpPosterior:
    """Conditioned Matern-5/2 GP over [0,1]^2 with a constant prior mean."""

    def __init__(self, x: np.ndarray, y: np.ndarray, hp: GpHyperparams):
        self.x = x
        self.hp = hp
        self.mean0 = float(y.mean())
        ls = np.asarray(hp.length_scales, dtype=np.float64)
        k = hp.signal_var * _matern52(_scaled_sq_dists(x, x, ls))
        k[np.diag_indices_from(k)] += hp.noise_var
        self._ls = ls
        self._chol = np.linalg.cholesky(k)
        self._alpha = cho_solve((self._chol, True), y - self.mean0, check_finite=False)

    def predict(self, xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at query points (n, 2)."""
        xq = np.atleast_2d(xq)
        ks = self.hp.signal_var * _matern52(_scaled_sq_dists(xq, self.x, self._ls))
        mu = ks @ self._alpha + self.mean0
        v = solve_triangular(self._chol, ks.T, lower=True, check_finite=False)
        var = np.maximum(self.hp.signal_var - (v * v).sum(axis=0), 0.0)
        return mu, var


def _nll(x: np.ndarray, y_centered: np.ndarray, log_params: np.ndarray) -> float:
    ls = np.exp(log_params[:2])
    signal_var = math.exp(log_params[2])
    noise_var = math.exp(log_params[3]) + NOISE_FLOOR
    k = signal_var * _matern52(_scaled_sq_dists(x, x, ls))
    k[np.diag_indices_from(k)] += noise_var
    try:
        chol, lower = cho_factor(k, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return float("inf")
    alpha = cho_solve((chol, lower), y_centered, check_finite=False)
    n = y_centered.size
    return float(
        0.5 * y_centered @ alpha
        + np.log(np.diag(chol)).sum()
        + 0.5 * n * math.log(2.0 * math.pi)
    )


def fit_hyperparams(x: np.ndarray, y: np.ndarray) -> GpHyperparams:
    """Maximum marginal likelihood via a seeded Sobol scan of the log-space
    box plus one Nelder-Mead polish from the best candidate."""
    var_y = float(y.var())
    if var_y < 1e-18:
        # Degenerate observations: prior with the (zero) sample variance.
        return GpHyperparams((1.0, 1.0), max(var_y, 1e-12), NOISE_FLOOR)
    yc = y - y.mean()
    lo = np.log([0.02, 0.02, 0.05 * var_y, 1e-6])
    hi = np.log([5.0, 5.0, 20.0 * var_y, max(var_y, 2e-6)])
    sampler = qmc.Sobol(d=4, scramble=True, seed=7)
    candidates = lo + sampler.random(32) * (hi - lo)
    scores = [_nll(x, yc, c) for c in candidates]
    best = candidates[int(np.argmin(scores))]

    def clipped_nll(p: np.ndarray) -> float:
        return _nll(x, yc, np.clip(p, lo, hi))

    res = sciopt.minimize(
        clipped_nll,
        best,
        method="Nelder-Mead",
        options={"maxfev": 40, "xatol": 1e-3, "fatol": 1e-9},
    )
    chosen = np.clip(res.x if res.fun <= min(scores) else best, lo, hi)
    ls = np.exp(chosen[:2])
    return GpHyperparams(
        (float(ls[0]), float(ls[1])),
        float(math.exp(chosen[2])),
        float(math.exp(chosen[3]) + NOISE_FLOOR),
    )


def gp_fit(points: Sequence[tuple[ThresholdPair, float]]) -> GpPosterior:
    """Fit the surrogate to evaluated points (at least two, not all equal)."""
    if len(points) < 2:
        raise ValueError(f"need at least 2 points to fit, got {len(points)}")
    x = np.array([p.as_array() for p, _ in points], dtype=np.float64)
    y = np.array([v for _, v in points], dtype=np.float64)
    return GpPosterior(x, y, fit_hyperparams(x, y))


def expected_improvement(post: GpPosterior, xq: np.ndarray, incumbent: float) -> np.ndarray:
    mu, var = post.predict(xq)
    sigma = np.sqrt(var)
    improve = mu - incumbent
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, improve / np.where(sigma > 0, sigma, 1.0), 0.0)
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    ei = improve * ndtr(z) + sigma * pdf
    return np.where(sigma > 0, np.maximum(ei, 0.0), np.maximum(improve, 0.0))


_COMPASS = np.array(
    [[1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [1, -1], [-1, 1], [-1, -1]],
    dtype=np.float64,
)


def _compass_refine(
    post: GpPosterior, incumbent: float, start: np.ndarray, start_ei: float
) -> np.ndarray:
    """Deterministic local pattern search on EI, batched per ring."""
    center = start.copy()
    best_ei = start_ei
    radius = 1.0 / 64.0
    for _ in range(8):
        ring = np.clip(center[None, :] + radius * _COMPASS, 0.0, 1.0)
        values = expected_improvement(post, ring, incumbent)
        j = int(np.argmax(values))
        if values[j] > best_ei:
            best_ei = float(values[j])
            center = ring[j]
        else:
            radius *= 0.5
    return center


def _refit_due(state: TunerState) -> bool:
    n = len(state.points)
    if state.hyperparams is None:
        return True
    return (n < 16 and n % 2 == 0) or n % 4 == 0


def propose_next(state: TunerState) -> ThresholdPair:
    """Maximize Expected Improvement over [0,1]^2.

    Deterministic under the state's seed; never returns a point within
    1e-9 of an already evaluated one.
    """
    n = len(state.points)
    if n >= state.budget:
        raise BudgetExhaustedError(f"budget of {state.budget} evaluations exhausted")
    if n < 2:
        raise ValueError("propose_next requires the initial design to be evaluated")
    x = state.x_array()
    y = state.y_array()
    if _refit_due(state):
        state.hyperparams = fit_hyperparams(x, y)
    post = GpPosterior(x, y, state.hyperparams)
    incumbent = float(y.max())

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([state.seed, n])))
    sampler = qmc.Sobol(d=2, scramble=True, seed=rng)
    scan = sampler.random(SCAN_POINTS)
    ei = expected_improvement(post, scan, incumbent)
    order = np.argsort(-ei)

    refined = _compass_refine(post, incumbent, scan[order[0]], float(ei[order[0]]))
    candidates = [refined]
    candidates.extend(scan[i] for i in order)

    def is_new(p: np.ndarray) -> bool:
        return bool(np.min(np.max(np.abs(x - p[None, :]), axis=1)) >= DUPLICATE_TOLERANCE)

    for cand in candidates:
        if is_new(cand):
            return ThresholdPair(float(cand[0]), float(cand[1]))
    while True:  # pathological fallback: draw random points until one is new
        cand = rng.random(2)
        if is_new(cand):
            return ThresholdPair(float(cand[0]), float(cand[1]))


def optimize(
    objective: Callable[[ThresholdPair], float],
    budget: int = 40,
    seed: int = 0,
    state: TunerState | None = None,
) -> tuple[ThresholdPair, TunerState]:
    """Run the full loop: LHS(8) initial design, then EI proposals.

    Returns the argmax of the observed objective and the complete trace.
    """
    if budget < INITIAL_DESIGN:
        raise ValueError(f"budget must be >= {INITIAL_DESIGN}, got {budget}")
    state = state or TunerState(seed=seed, budget=budget)
    design = qmc.LatinHypercube(d=2, seed=seed).random(INITIAL_DESIGN)
    for row in design:
        pair = ThresholdPair(float(row[0]), float(row[1]))
        state.record(pair, float(objective(pair)))
    while len(state.points) < budget:
        pair = propose_next(state)
        state.record(pair, float(objective(pair)))
    best_pair, _ = state.best()
    return best_pair, state


def evaluate_objective(
    thresholds: ThresholdPair,
    bundles: Sequence[PredictionBundle],
    truth: AnnotationSet,
    objective_kind: str = "classwise_dice",
    index: GroundTruthIndex | None = None,
) -> float:
    """Score one threshold pair on the validation data.

    ``classwise_dice`` (default) runs the voting path, where only the
    confidence threshold binds; ``instance_map`` runs the NMS path, where the
    IoU threshold binds too.
    """
    config = EnsembleConfig(
        confidence_threshold=thresholds.confidence, iou_threshold=thresholds.iou
    )
    index = index or GroundTruthIndex(truth)
    if objective_kind == "classwise_dice":
        fused = fuse_classwise(bundles, config, truth.images)
        return evaluate_dice(fused, truth, index=index).overall
    if objective_kind == "instance_map":
        fused = fuse_instancewise(bundles, config)
        overall, _ = mean_ap_50_95(fused, truth, iou_kind="mask", index=index)
        return overall
    raise ValueError(f"unknown objective kind {objective_kind!r}")


def tune(
    bundles: Sequence[PredictionBundle],
    truth: AnnotationSet,
    budget: int = 40,
    seed: int = 0,
    objective_kind: str = "classwise_dice",
) -> tuple[ThresholdPair, TunerState]:
    """Tune (confidence, IoU) against the validation objective."""
    index = GroundTruthIndex(truth)

    def objective(pair: ThresholdPair) -> float:
        return evaluate_objective(pair, bundles, truth, objective_kind, index)

    return optimize(objective, budget=budget, seed=seed)
