import io

import numpy as np
import pytest

from spcp.datagen import GenSpec, gen_planted
from spcp.mttkrp import build_plan, mttkrp_dfacto
from spcp.solvers import (
    FactorModel,
    IterationStats,
    LineSearchResult,
    SolverAbort,
    SolverConfig,
    als_iteration,
    als_update_mode,
    backtracking_line_search,
    cp_gradient,
    cp_objective,
    cp_parts,
    fit_value,
    gd_iteration,
    init_factors,
    normalize_columns,
    objective_value,
    solve,
    solve_normal_eq,
    stats_to_csv,
)
from spcp.sparse_core import SparseTensorCoo, build_views, gram_hadamard

from conftest import dense_tensor, random_coo


def make_plans(views):
    return {mode: build_plan(views, mode) for mode in (1, 2, 3)}


def random_model(rng, dims, rank):
    return FactorModel(rng.random((dims[0], rank)), rng.random((dims[1], rank)),
                       rng.random((dims[2], rank)), np.ones(rank))


def dense_objective(t, model, lam):
    """Brute-force oracle: materialize the reconstruction and both norms."""
    T = dense_tensor(t)
    I, J, K = t.dims
    af = model.folded_a()
    xhat = np.einsum("ir,jr,kr->ijk", af, model.B, model.C)
    val = 0.5 * ((T - xhat) ** 2).sum()
    val += 0.5 * lam * ((model.A ** 2).sum() + (model.B ** 2).sum() + (model.C ** 2).sum())
    return val


def fd_gradient(t, model, lam, h=1e-6):
    grads = []
    for name in "ABC":
        base = getattr(model, name)
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            for sign in (1.0, -1.0):
                bumped = base.copy()
                bumped[idx] += sign * h
                m = FactorModel(**{**{n: getattr(model, n) for n in "ABC"},
                                   name: bumped, "weights": model.weights})
                g[idx] += sign * cp_objective(t, m, lam)
        grads.append(g / (2 * h))
    return tuple(grads)


class TestObjective:
    def test_exact_rank1_zero_objective(self):
        t, truth = gen_planted(GenSpec((4, 5, 6), 4 * 5 * 6, seed=3, rank=1))
        assert cp_objective(t, truth, 0.0) <= 1e-18

    def test_empty_tensor_gives_half_model_norm(self, rng):
        t = SparseTensorCoo.from_entries((3, 4, 5), [], [], [], [])
        model = random_model(rng, t.dims, 2)
        got = cp_objective(t, model, 0.0)
        oracle = dense_objective(t, model, 0.0)
        assert abs(got - oracle) <= 1e-10 * max(1.0, oracle)

    def test_zero_model_gives_half_data_norm(self, rng):
        t = random_coo(rng, max_dim=6)
        model = FactorModel(np.zeros((t.dims[0], 2)), np.zeros((t.dims[1], 2)),
                            np.zeros((t.dims[2], 2)), np.ones(2))
        assert cp_objective(t, model, 0.7) == pytest.approx(
            0.5 * float(t.values @ t.values), rel=1e-15)

    def test_gram_expansion_vs_dense(self, rng):
        for _ in range(20):
            t = random_coo(rng, max_dim=6, max_nnz=40)
            model = random_model(rng, t.dims, int(rng.integers(1, 4)))
            model.weights[:] = rng.uniform(0.5, 2.0, size=model.rank)
            lam = float(rng.choice([0.0, 0.3]))
            got = cp_objective(t, model, lam)
            oracle = dense_objective(t, model, lam)
            assert abs(got - oracle) <= 1e-10 * max(1.0, abs(oracle))


class TestNormalize:
    def test_arithmetic(self):
        m, norms = normalize_columns(np.array([[3.0], [4.0]]))
        np.testing.assert_allclose(m[:, 0], [0.6, 0.8])
        assert norms[0] == 5.0

    def test_zero_column(self):
        m, norms = normalize_columns(np.zeros((4, 2)))
        np.testing.assert_array_equal(m, np.zeros((4, 2)))
        np.testing.assert_array_equal(norms, [0.0, 0.0])

    def test_random_unit_norms(self, rng):
        m, _ = normalize_columns(rng.standard_normal((30, 6)))
        np.testing.assert_allclose(np.linalg.norm(m, axis=0), np.ones(6), atol=1e-12)


class TestAls:
    def test_fixed_point_at_truth(self):
        t, truth = gen_planted(GenSpec((4, 5, 6), 4 * 5 * 6, seed=11, rank=1))
        views = build_views(t)
        plans = make_plans(views)
        model, stats = als_iteration(t, views, plans, truth.copy(), 0.0)
        xnorm2 = float(t.values @ t.values)
        assert stats.objective <= 1e-14 * xnorm2  # zero up to cancellation noise
        # Columns unchanged up to scale: unit cosine with the truth.
        for got, want in zip(model.factors(), truth.factors()):
            cos = abs(got[:, 0] @ want[:, 0]) / (
                np.linalg.norm(got[:, 0]) * np.linalg.norm(want[:, 0]))
            assert cos == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("lam", [0.0, 0.1])
    def test_objective_nonincreasing_per_update(self, rng, lam):
        t = random_coo(rng, max_dim=10, min_dim=8, max_nnz=200)
        views = build_views(t)
        plans = make_plans(views)
        model = random_model(rng, t.dims, 3)
        f = cp_objective(t, model, lam)
        for _ in range(50):
            for mode in (1, 2, 3):
                model, _, _ = als_update_mode(plans, model, mode, lam)
                f_new = cp_objective(t, model, lam)
                assert f_new <= f + 1e-9 * max(1.0, abs(f))
                f = f_new

    def test_ridge_dominated_update_shrinks(self, rng):
        t = random_coo(rng, max_dim=7)
        views = build_views(t)
        plans = make_plans(views)
        model = random_model(rng, t.dims, 1)
        n = mttkrp_dfacto(plans[1], model.B, model.C)
        gram = gram_hadamard(model.C.T @ model.C, model.B.T @ model.B, 1e8)
        a_hat, _ = solve_normal_eq(n, gram)
        assert np.linalg.norm(a_hat) <= 1e-6 * np.linalg.norm(n)

    def test_scale_invariance_of_update(self, rng):
        t = random_coo(rng, max_dim=8)
        scaled = SparseTensorCoo(t.dims, t.ii, t.jj, t.kk, 3.0 * t.values)
        model = random_model(rng, t.dims, 2)
        gram = gram_hadamard(model.C.T @ model.C, model.B.T @ model.B, 0.0)
        outs = []
        for tensor in (t, scaled):
            plan = build_plan(build_views(tensor), 1)
            n = mttkrp_dfacto(plan, model.B, model.C)
            outs.append(solve_normal_eq(n, gram)[0])
        diff = np.abs(outs[1] - 3.0 * outs[0]).max()
        assert diff <= 1e-12 * max(1.0, np.abs(outs[1]).max())

    def test_singular_gram_falls_back(self, rng):
        t = random_coo(rng, max_dim=5)
        views = build_views(t)
        plans = make_plans(views)
        model = random_model(rng, t.dims, 2)
        model.B[:, 1] = model.B[:, 0]  # rank-deficient Gram
        model.C[:, 1] = model.C[:, 0]
        _, fallback, _ = als_update_mode(plans, model, 1, 0.0)
        assert fallback


class TestGradient:
    def test_zero_at_exact_factorization(self):
        t, truth = gen_planted(GenSpec((4, 4, 4), 64, seed=5, rank=2))
        views = build_views(t)
        grads = cp_gradient(views, make_plans(views), truth, 0.0)
        for g in grads:
            assert np.abs(g).max() <= 1e-12

    def test_matches_finite_differences(self, rng):
        for _ in range(5):
            t = random_coo(rng, max_dim=8, max_nnz=80)
            views = build_views(t)
            model = random_model(rng, t.dims, int(rng.integers(1, 4)))
            lam = float(rng.choice([0.0, 0.2]))
            grads = cp_gradient(views, make_plans(views), model, lam)
            fds = fd_gradient(t, model, lam)
            for g, fd in zip(grads, fds):
                assert np.abs(g - fd).max() <= 1e-6 * max(1.0, np.abs(g).max())

    def test_ridge_linearity(self, rng):
        t = random_coo(rng, max_dim=6)
        views = build_views(t)
        plans = make_plans(views)
        model = random_model(rng, t.dims, 2)
        g0 = cp_gradient(views, plans, model, 0.0)
        g1 = cp_gradient(views, plans, model, 0.5)
        for g_a, g_b, factor in zip(g0, g1, model.factors()):
            np.testing.assert_allclose(g_b - g_a, 0.5 * factor, atol=1e-12)


class TestLineSearch:
    @staticmethod
    def quadratic_eval(target):
        def evaluate(m):
            f = 0.5 * sum(((g - w) ** 2).sum() for g, w in zip(m.factors(), target))
            return f, None
        return evaluate

    def test_zero_gradient_accepts_initial_step(self, rng):
        model = random_model(rng, (3, 3, 3), 2)
        grads = tuple(np.zeros_like(f) for f in model.factors())
        config = SolverConfig(rank=2)
        evaluate = self.quadratic_eval(model.factors())
        res = backtracking_line_search(evaluate, model, grads, 0.0, config)
        assert res.alpha == config.step0 and not res.stalled

    def test_quadratic_satisfies_armijo(self, rng):
        model = random_model(rng, (4, 4, 4), 2)
        target = tuple(rng.standard_normal(f.shape) for f in model.factors())
        evaluate = self.quadratic_eval(target)
        f0 = evaluate(model)[0]
        grads = tuple(f - w for f, w in zip(model.factors(), target))
        config = SolverConfig(rank=2)
        res = backtracking_line_search(evaluate, model, grads, f0, config)
        assert not res.stalled
        g2 = sum((g * g).sum() for g in grads)
        trial = FactorModel(model.A - res.alpha * grads[0], model.B - res.alpha * grads[1],
                            model.C - res.alpha * grads[2], model.weights)
        assert evaluate(trial)[0] <= f0 - config.armijo_c * res.alpha * g2

    def test_huge_initial_step_backtracks(self, rng):
        t = random_coo(rng, max_dim=6)
        views = build_views(t)
        model = random_model(rng, t.dims, 2)
        grads = cp_gradient(views, make_plans(views), model, 0.0)
        config = SolverConfig(rank=2, step0=1e6)

        def evaluate(m):
            parts = cp_parts(t, m)
            return objective_value(parts, 0.0, m), parts

        f0 = cp_objective(t, model, 0.0)
        res = backtracking_line_search(evaluate, model, grads, f0, config)
        assert not res.stalled and res.alpha < 1e6
        g2 = sum((g * g).sum() for g in grads)
        trial = FactorModel(model.A - res.alpha * grads[0], model.B - res.alpha * grads[1],
                            model.C - res.alpha * grads[2], model.weights)
        assert cp_objective(t, trial, 0.0) <= f0 - config.armijo_c * res.alpha * g2

    def test_no_step_stalls(self, rng):
        model = random_model(rng, (3, 3, 3), 1)
        grads = tuple(np.ones_like(f) for f in model.factors())
        config = SolverConfig(rank=1, max_backtracks=3)
        res = backtracking_line_search(lambda m: (np.inf, None), model, grads, 1.0, config)
        assert res.stalled and res.alpha == 0.0


class TestGdIteration:
    def test_stationary_point_unchanged(self):
        t, truth = gen_planted(GenSpec((3, 4, 5), 60, seed=7, rank=1))
        views = build_views(t)
        plans = make_plans(views)
        config = SolverConfig(rank=1, algorithm="gd")
        model, stats = gd_iteration(t, views, plans, truth.copy(), 0.0, config)
        for got, want in zip(model.factors(), truth.factors()):
            np.testing.assert_allclose(got, want, atol=1e-10)

    def test_objective_strictly_nonincreasing(self, rng):
        t = random_coo(rng, max_dim=7)
        views = build_views(t)
        plans = make_plans(views)
        config = SolverConfig(rank=2, algorithm="gd")
        model = random_model(rng, t.dims, 2)
        f = cp_objective(t, model, 0.0)
        for _ in range(25):
            model, stats = gd_iteration(t, views, plans, model, 0.0, config, f0=f)
            assert stats.objective <= f
            f = stats.objective

    def test_single_entry_converges(self):
        t = SparseTensorCoo.from_entries((2, 2, 2), [0], [0], [0], [2.0])
        config = SolverConfig(rank=1, algorithm="gd", max_iters=200, tol=1e-14, seed=1)
        _, history = solve(t, config)
        assert history[-1].objective <= 1e-8


class TestSolve:
    def test_planted_rank1_both_algorithms(self):
        t, _ = gen_planted(GenSpec((6, 7, 8), 6 * 7 * 8, seed=2, rank=1))
        for algo in ("als", "gd"):
            config = SolverConfig(rank=1, algorithm=algo, max_iters=50, tol=1e-13, seed=4)
            _, history = solve(t, config)
            assert history[-1].fit >= 1.0 - 1e-6, algo

    def test_planted_recovery_small(self):
        t, _ = gen_planted(GenSpec((12, 12, 12), 12 ** 3, seed=9, rank=3))
        hits = 0
        for seed in range(4):
            config = SolverConfig(rank=3, max_iters=150, tol=1e-12, seed=seed)
            _, history = solve(t, config)
            hits += history[-1].fit >= 0.999
        assert hits >= 3

    def test_zero_iters_returns_initialization(self, rng):
        t = random_coo(rng, max_dim=5)
        config = SolverConfig(rank=2, max_iters=0, seed=123)
        model, history = solve(t, config)
        want = init_factors(t.dims, 2, 123)
        for got, w in zip(model.factors(), want.factors()):
            np.testing.assert_array_equal(got, w)
        assert len(history) == 1 and history[0].iteration == 0

    def test_rank_warning(self, rng):
        t = random_coo(rng, max_dim=4, min_dim=2)
        config = SolverConfig(rank=20, max_iters=1)
        with pytest.warns(UserWarning, match="rank"):
            solve(t, config)

    def test_nonfinite_objective_aborts(self):
        t = SparseTensorCoo.from_entries((2, 2, 2), [0, 1], [0, 1], [0, 1],
                                         [1e200, -1e200])
        with pytest.raises(SolverAbort):
            solve(t, SolverConfig(rank=1, max_iters=3, seed=0))

    def test_stats_csv_shape(self, rng):
        t = random_coo(rng, max_dim=5)
        _, history = solve(t, SolverConfig(rank=2, max_iters=5, tol=1e-30, seed=0))
        buf = io.StringIO()
        stats_to_csv(history, buf)
        lines = buf.getvalue().strip().splitlines()
        assert len(lines) == 1 + 5  # header + one row per iteration
        assert lines[0].startswith("iteration,objective,fit")

    def test_bad_config(self):
        with pytest.raises(ValueError):
            SolverConfig(rank=0)
        with pytest.raises(ValueError):
            SolverConfig(rank=1, shrink=1.5)
        with pytest.raises(ValueError):
            SolverConfig(rank=1, tol=0.0)
        with pytest.raises(ValueError):
            SolverConfig(rank=1, algorithm="sgd")
