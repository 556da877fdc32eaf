"""CP factorization drivers: alternating least squares and gradient descent
with backtracking line search, both built on the two-SpMV MTTKRP plans.

The objective is the regularized squared reconstruction error

    f = 1/2 ||X - Xhat||^2 + lam/2 (||A||^2 + ||B||^2 + ||C||^2)

where ||X - Xhat||^2 expands as ||X||^2 - 2 <X, Xhat> + ||Xhat||^2 with the
inner product taken over stored entries only and ||Xhat||^2 evaluated through
the Gram identity sum((AtA) * (BtB) * (CtC)); the reconstruction is never
materialized.  Column weights are folded into A for evaluation.

These helpers are shared verbatim by the distributed master so that a run
with one worker reproduces the serial trajectory bit for bit.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from .mttkrp import FlopCounter, MttkrpPlan, build_plan, factor_pair, mttkrp_dfacto
from .sparse_core import FlattenedViews, SparseTensorCoo, build_views, gram_hadamard


class SolverAbort(RuntimeError):
    """Objective became non-finite; carries the offending iteration."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class FactorModel:
    """Dense factor triple with per-column weights.

    Weights are all ones except in normalized ALS mode, where each update
    stores the column norms of the freshly solved factor.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    weights: np.ndarray

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def factors(self):
        return (self.A, self.B, self.C)

    def folded_a(self) -> np.ndarray:
        """A with the column weights multiplied in."""
        return self.A * self.weights

    def copy(self) -> "FactorModel":
        return FactorModel(self.A.copy(), self.B.copy(), self.C.copy(), self.weights.copy())


@dataclass(frozen=True)
class SolverConfig:
    rank: int
    reg: float = 0.0
    max_iters: int = 100
    tol: float = 1e-6
    algorithm: str = "als"
    step0: float = 1.0
    shrink: float = 0.5
    armijo_c: float = 1e-4
    max_backtracks: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink must be in (0, 1)")
        if self.reg < 0 or self.step0 <= 0 or self.armijo_c <= 0:
            raise ValueError("reg must be >= 0, step0 and armijo_c > 0")
        if self.max_iters < 0 or self.max_backtracks < 0:
            raise ValueError("max_iters and max_backtracks must be >= 0")
        if self.algorithm not in ("als", "gd"):
            raise ValueError(f"algorithm must be 'als' or 'gd', got {self.algorithm!r}")


@dataclass
class IterationStats:
    iteration: int
    objective: float
    fit: float
    ms_mttkrp: float = 0.0
    ms_solve: float = 0.0
    ms_normalize: float = 0.0
    ms_linesearch: float = 0.0
    flops: int = 0
    lstsq_fallback: bool = False
    stalled: bool = False


STATS_COLUMNS = (
    "iteration", "objective", "fit",
    "ms_mttkrp", "ms_solve", "ms_normalize", "ms_linesearch", "flops",
)


def stats_to_csv(history, target, include_init: bool = False) -> None:
    """Write per-iteration stats as CSV; the seeded iteration-0 row is
    skipped unless include_init is set."""
    rows = [s for s in history if include_init or s.iteration > 0]

    def _write(fh):
        w = csv.writer(fh)
        w.writerow(STATS_COLUMNS)
        for s in rows:
            w.writerow([s.iteration, repr(s.objective), repr(s.fit),
                        repr(s.ms_mttkrp), repr(s.ms_solve), repr(s.ms_normalize),
                        repr(s.ms_linesearch), s.flops])

    if hasattr(target, "write"):
        _write(target)
    else:
        with open(target, "w", newline="") as fh:
            _write(fh)


class ObjectiveParts(NamedTuple):
    """Pieces of the squared error: data norm, data/model inner product over
    stored entries, and the model's squared norm via the Gram identity."""

    xnorm2: float
    inner: float
    model2: float


def model_values_at(ii, jj, kk, model: FactorModel) -> np.ndarray:
    """Reconstruction values at the given index triples, weights folded in."""
    return (model.folded_a()[ii] * model.B[jj] * model.C[kk]).sum(axis=1)


def model_norm2(model: FactorModel) -> float:
    af = model.folded_a()
    g = (af.T @ af) * (model.B.T @ model.B) * (model.C.T @ model.C)
    return float(g.sum())


def cp_parts(t: SparseTensorCoo, model: FactorModel) -> ObjectiveParts:
    xnorm2 = float(t.values @ t.values)
    inner = float(t.values @ model_values_at(t.ii, t.jj, t.kk, model))
    return ObjectiveParts(xnorm2, inner, model_norm2(model))


def objective_value(parts: ObjectiveParts, lam: float, model: FactorModel) -> float:
    f = 0.5 * (parts.xnorm2 - 2.0 * parts.inner + parts.model2)
    if lam:
        f += 0.5 * lam * (
            float((model.A * model.A).sum())
            + float((model.B * model.B).sum())
            + float((model.C * model.C).sum())
        )
    return f


def fit_value(parts: ObjectiveParts) -> float:
    """fit = 1 - ||X - Xhat|| / ||X||."""
    resid2 = max(parts.xnorm2 - 2.0 * parts.inner + parts.model2, 0.0)
    if parts.xnorm2 > 0.0:
        return 1.0 - float(np.sqrt(resid2) / np.sqrt(parts.xnorm2))
    return 1.0 if resid2 == 0.0 else float("-inf")


def cp_objective(t: SparseTensorCoo, model: FactorModel, lam: float = 0.0) -> float:
    """Regularized objective without materializing the reconstruction."""
    return objective_value(cp_parts(t, model), lam, model)


def normalize_columns(m: np.ndarray):
    """Scale each column to unit norm; zero columns stay with norm 0."""
    norms = np.linalg.norm(m, axis=0)
    safe = np.where(norms == 0.0, 1.0, norms)
    return m / safe, norms


def init_factors(dims, rank: int, seed: int) -> FactorModel:
    """Uniform(0, 1) initialization; the draw order (A, B, C) is part of the
    contract so distributed runs reproduce serial ones."""
    rng = np.random.default_rng(seed)
    I, J, K = dims
    return FactorModel(
        rng.random((I, rank)), rng.random((J, rank)), rng.random((K, rank)),
        np.ones(rank),
    )


def solve_normal_eq(n: np.ndarray, gram: np.ndarray):
    """Solve factor @ gram = n for factor; least-squares fallback on a
    singular Gram (returns the minimum-norm solution and a flag)."""
    try:
        return np.linalg.solve(gram, n.T).T, False
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(gram, n.T, rcond=None)[0].T, True


def _mode_gram(model: FactorModel, mode: int, lam: float) -> np.ndarray:
    f1, f2 = factor_pair(model.factors(), mode)
    return gram_hadamard(f2.T @ f2, f1.T @ f1, lam)


def als_update_mode(plans, model: FactorModel, mode: int, lam: float,
                    counter: FlopCounter | None = None):
    """One exact block update of the mode's factor; normalizes and refreshes
    the weights when unregularized.  Returns (model, fallback_flag, timings)."""
    t0 = time.perf_counter()
    f1, f2 = factor_pair(model.factors(), mode)
    n = mttkrp_dfacto(plans[mode], f1, f2, counter)
    t1 = time.perf_counter()
    gram = _mode_gram(model, mode, lam)
    updated, fallback = solve_normal_eq(n, gram)
    t2 = time.perf_counter()
    if lam == 0.0:
        updated, norms = normalize_columns(updated)
        weights = norms
    else:
        weights = np.ones(model.rank)
    t3 = time.perf_counter()
    new_model = replace(model, **{"ABC"[mode - 1]: updated, "weights": weights})
    return new_model, fallback, (t1 - t0, t2 - t1, t3 - t2)


def als_iteration(t: SparseTensorCoo, views: FlattenedViews, plans,
                  model: FactorModel, lam: float,
                  counter: FlopCounter | None = None):
    """One full ALS sweep (modes 1, 2, 3) with per-phase timings."""
    ms = [0.0, 0.0, 0.0]
    fallback = False
    for mode in (1, 2, 3):
        model, fb, phase = als_update_mode(plans, model, mode, lam, counter)
        fallback = fallback or fb
        for idx in range(3):
            ms[idx] += phase[idx] * 1e3
    parts = cp_parts(t, model)
    stats = IterationStats(
        iteration=-1,
        objective=objective_value(parts, lam, model),
        fit=fit_value(parts),
        ms_mttkrp=ms[0], ms_solve=ms[1], ms_normalize=ms[2],
        lstsq_fallback=fallback,
    )
    return model, stats


def cp_gradient(views: FlattenedViews, plans, model: FactorModel, lam: float,
                counter: FlopCounter | None = None):
    """Gradients of the regularized objective with respect to A, B, C.

    All three MTTKRP terms are computed from the same (pre-update) factors;
    weights are assumed to be ones (gradient mode never normalizes).
    """
    grads = []
    for mode in (1, 2, 3):
        f1, f2 = factor_pair(model.factors(), mode)
        n = mttkrp_dfacto(plans[mode], f1, f2, counter)
        factor = model.factors()[mode - 1]
        grads.append(-n + factor @ _mode_gram(model, mode, lam))
    return tuple(grads)


@dataclass
class LineSearchResult:
    alpha: float
    objective: float
    backtracks: int
    stalled: bool
    parts: ObjectiveParts | None = None


def apply_step(model: FactorModel, grads, alpha: float) -> FactorModel:
    ga, gb, gc = grads
    return FactorModel(model.A - alpha * ga, model.B - alpha * gb,
                       model.C - alpha * gc, model.weights)


def backtracking_line_search(evaluate: Callable[[FactorModel], tuple],
                             model: FactorModel, grads, f0: float,
                             config: SolverConfig) -> LineSearchResult:
    """Largest step alpha = step0 * shrink^t meeting the sufficient-decrease
    test f(m - alpha g) <= f0 - c alpha ||g||^2.

    evaluate(trial_model) must return (objective, parts).  Non-finite trial
    objectives are rejected and backtracking continues.  If no step within
    max_backtracks qualifies, alpha = 0 is returned with the stall flag set.
    """
    g2 = float(sum((g * g).sum() for g in grads))
    alpha = config.step0
    for back in range(config.max_backtracks + 1):
        trial = apply_step(model, grads, alpha)
        f_trial, parts = evaluate(trial)
        if np.isfinite(f_trial) and f_trial <= f0 - config.armijo_c * alpha * g2:
            return LineSearchResult(alpha, float(f_trial), back, False, parts)
        alpha *= config.shrink
    return LineSearchResult(0.0, f0, config.max_backtracks + 1, True, None)


def gd_iteration(t: SparseTensorCoo, views: FlattenedViews, plans,
                 model: FactorModel, lam: float, config: SolverConfig,
                 f0: float | None = None, fit0: float | None = None,
                 counter: FlopCounter | None = None):
    """One gradient step with a shared step size for all three factors."""
    t0 = time.perf_counter()
    grads = cp_gradient(views, plans, model, lam, counter)
    t1 = time.perf_counter()
    if f0 is None:
        parts0 = cp_parts(t, model)
        f0 = objective_value(parts0, lam, model)
        fit0 = fit_value(parts0)

    def evaluate(trial):
        parts = cp_parts(t, trial)
        return objective_value(parts, lam, trial), parts

    ls = backtracking_line_search(evaluate, model, grads, f0, config)
    t2 = time.perf_counter()
    if ls.stalled:
        stats = IterationStats(-1, f0, fit0 if fit0 is not None else float("nan"),
                               ms_mttkrp=(t1 - t0) * 1e3,
                               ms_linesearch=(t2 - t1) * 1e3, stalled=True)
        return model, stats
    new_model = apply_step(model, grads, ls.alpha)
    stats = IterationStats(-1, ls.objective, fit_value(ls.parts),
                           ms_mttkrp=(t1 - t0) * 1e3,
                           ms_linesearch=(t2 - t1) * 1e3)
    return new_model, stats


def relative_change(f_prev: float, f: float, eps: float = 1e-300) -> float:
    return abs(f_prev - f) / max(f_prev, eps)


def solve(t: SparseTensorCoo, config: SolverConfig):
    """Factorize a sparse tensor; returns (model, per-iteration stats).

    History row 0 is the seeded initialization with its objective; rows
    1..n are solver iterations.  Stops on relative objective change below
    config.tol, the iteration cap, or a line-search stall.
    """
    if config.rank > min(t.dims):
        warnings.warn(
            f"rank {config.rank} exceeds the smallest tensor dimension "
            f"{min(t.dims)}; factors will be rank deficient", stacklevel=2)
    views = build_views(t)
    plans = {mode: build_plan(views, mode) for mode in (1, 2, 3)}
    model = init_factors(t.dims, config.rank, config.seed)
    counter = FlopCounter()
    parts = cp_parts(t, model)
    history = [IterationStats(0, objective_value(parts, config.reg, model),
                              fit_value(parts))]
    for it in range(1, config.max_iters + 1):
        counter.reset()
        if config.algorithm == "als":
            model, stats = als_iteration(t, views, plans, model, config.reg, counter)
        else:
            model, stats = gd_iteration(
                t, views, plans, model, config.reg, config,
                f0=history[-1].objective, fit0=history[-1].fit, counter=counter)
        stats.iteration = it
        stats.flops = counter.multiply_adds
        history.append(stats)
        if not np.isfinite(stats.objective):
            raise SolverAbort(it, f"objective became {stats.objective}")
        if stats.stalled:
            break
        if relative_change(history[-2].objective, stats.objective) < config.tol:
            break
    return model, history
