"""Joint matrix completion + tensor factorization.

A ratings matrix Y (users x items) and a review tensor X (users x items x
words) share the user factor A and item factor B; C is the word factor.
The objective is

    sum_{(i,j) observed} 1/2 (y_ij - a_i . b_j)^2
      + mu * 1/2 ||X - Xhat||^2
      + lam/2 (||A||^2 + ||B||^2 + ||C||^2)

with the tensor term evaluated through the same Gram expansion the CP
solvers use.  Setting mu = 0 reduces everything to row-wise ridge matrix
completion.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .mttkrp import FlopCounter, build_plan, factor_pair, mttkrp_dfacto
from .sparse_core import ParseError, SparseTensorCoo, build_views, gram_hadamard
from .solvers import (
    FactorModel,
    IterationStats,
    SolverAbort,
    backtracking_line_search,
    cp_parts,
    init_factors,
    relative_change,
)


@dataclass
class RatingsMatrix:
    """Sparse user x item ratings in CSR-by-row form; no duplicate pairs."""

    n_users: int
    n_items: int
    rowptr: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    _transposed: "RatingsMatrix | None" = field(default=None, repr=False)

    @property
    def nnz(self) -> int:
        return self.vals.size

    @classmethod
    def from_records(cls, records, dims=None) -> "RatingsMatrix":
        """Build from (user, item, rating[, has_review]) records."""
        records = np.asarray(records, dtype=np.float64)
        if records.size == 0:
            records = records.reshape(0, 4)
        elif records.ndim == 1:
            records = records.reshape(1, -1)
        users = records[:, 0].astype(np.int64)
        items = records[:, 1].astype(np.int64)
        vals = records[:, 2]
        if dims is None:
            dims = (int(users.max()) + 1 if users.size else 0,
                    int(items.max()) + 1 if items.size else 0)
        n_users, n_items = (int(d) for d in dims)
        if users.size and (users.min() < 0 or users.max() >= n_users):
            raise ValueError("user index out of range")
        if items.size and (items.min() < 0 or items.max() >= n_items):
            raise ValueError("item index out of range")
        if not np.isfinite(vals).all():
            raise ValueError("ratings must be finite")
        keys = users * n_items + items
        if np.unique(keys).size != keys.size:
            raise ValueError("duplicate (user, item) rating")
        order = np.lexsort((items, users))
        users, items, vals = users[order], items[order], vals[order]
        rowptr = np.zeros(n_users + 1, dtype=np.int64)
        np.cumsum(np.bincount(users, minlength=n_users), out=rowptr[1:])
        return cls(n_users, n_items, rowptr, items, vals)

    def scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, self.cols, self.rowptr),
                             shape=(self.n_users, self.n_items), copy=False)

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_users), np.diff(self.rowptr))

    def transposed(self) -> "RatingsMatrix":
        if self._transposed is None:
            records = np.column_stack([self.cols, self.row_ids(), self.vals])
            self._transposed = RatingsMatrix.from_records(
                records, dims=(self.n_items, self.n_users))
        return self._transposed

    def row(self, i: int):
        lo, hi = self.rowptr[i], self.rowptr[i + 1]
        return self.cols[lo:hi], self.vals[lo:hi]


@dataclass(frozen=True)
class JointConfig:
    rank: int
    mu: float = 1.0
    lam: float = 0.0
    algorithm: str = "als"
    max_iters: int = 100
    tol: float = 1e-6
    step0: float = 1.0
    shrink: float = 0.5
    armijo_c: float = 1e-4
    max_backtracks: int = 50
    seed: int = 0
    clamp: tuple[float, float] | None = None

    def __post_init__(self):
        if self.rank < 1 or self.mu < 0 or self.lam < 0:
            raise ValueError("rank must be >= 1 and mu, lam nonnegative")
        if self.tol <= 0 or not 0.0 < self.shrink < 1.0:
            raise ValueError("tol must be positive and shrink in (0, 1)")
        if self.algorithm not in ("als", "gd"):
            raise ValueError(f"algorithm must be 'als' or 'gd', got {self.algorithm!r}")


def parse_ratings(source, index_base: int = 1) -> np.ndarray:
    """Parse "user item rating [has_review]" lines into an (n, 4) array."""
    if index_base not in (0, 1):
        raise ValueError("index_base must be 0 or 1")
    rows = []
    from .sparse_core import _iter_lines  # same line-splitting rules

    for lineno, raw in enumerate(_iter_lines(source), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) not in (3, 4):
            raise ParseError("expected 'user item rating [has_review]'", lineno)
        try:
            u = int(tokens[0]) - index_base
            i = int(tokens[1]) - index_base
            r = float(tokens[2])
            flag = int(tokens[3]) if len(tokens) == 4 else 1
        except ValueError:
            raise ParseError(f"malformed rating {line!r}", lineno) from None
        if u < 0 or i < 0:
            raise ParseError("negative index after base adjustment", lineno)
        rows.append((u, i, r, flag))
    if not rows:
        raise ParseError("no rating records in input")
    return np.asarray(rows, dtype=np.float64)


def split_ratings(records, seed: int):
    """60/20/20 split of rating records; validation and test drop records
    whose user or item never occurs in train.  Deterministic under seed."""
    records = np.asarray(records, dtype=np.float64)
    n = records.shape[0]
    perm = np.random.default_rng(seed).permutation(n)
    n_train, n_val = int(0.6 * n), int(0.8 * n) - int(0.6 * n)
    train = records[perm[:n_train]]
    val = records[perm[n_train:n_train + n_val]]
    test = records[perm[n_train + n_val:]]
    if train.shape[0] == 0:
        raise ValueError("training split is empty")
    users = set(train[:, 0].astype(int))
    items = set(train[:, 1].astype(int))

    def keep(part):
        if part.shape[0] == 0:
            return part
        mask = np.array([u in users and i in items
                         for u, i in part[:, :2].astype(int)])
        return part[mask]

    return train, keep(val), keep(test)


def normalize_ratings(records, lo: float = 0.0, hi: float = 5.0) -> np.ndarray:
    """Linear rescale of the rating column onto [lo, hi]."""
    records = np.asarray(records, dtype=np.float64).copy()
    rmin, rmax = records[:, 2].min(), records[:, 2].max()
    if rmax == rmin:
        records[:, 2] = 0.5 * (lo + hi)
    else:
        records[:, 2] = lo + (records[:, 2] - rmin) * (hi - lo) / (rmax - rmin)
    return records


def restrict_to_pairs(t: SparseTensorCoo, records) -> SparseTensorCoo:
    """Keep only tensor entries whose (user, item) pair occurs in records."""
    records = np.asarray(records, dtype=np.float64)
    keys = (records[:, 0].astype(np.int64) * t.dims[1]
            + records[:, 1].astype(np.int64))
    mask = np.isin(t.flat_pairs(), keys)
    return SparseTensorCoo(t.dims, t.ii[mask], t.jj[mask], t.kk[mask],
                           t.values[mask])


def rating_predictions(Y: RatingsMatrix, model: FactorModel) -> np.ndarray:
    return (model.A[Y.row_ids()] * model.B[Y.cols]).sum(axis=1)


def rating_term(Y: RatingsMatrix, model: FactorModel) -> float:
    resid = Y.vals - rating_predictions(Y, model)
    return 0.5 * float(resid @ resid)


def joint_objective(Y: RatingsMatrix, t: SparseTensorCoo, model: FactorModel,
                    mu: float, lam: float) -> float:
    f = rating_term(Y, model)
    if mu:
        parts = cp_parts(t, model)
        f += mu * 0.5 * (parts.xnorm2 - 2.0 * parts.inner + parts.model2)
    if lam:
        f += 0.5 * lam * (float((model.A ** 2).sum()) + float((model.B ** 2).sum())
                          + float((model.C ** 2).sum()))
    return f


def _rating_fit(Y: RatingsMatrix, model: FactorModel) -> float:
    ynorm2 = float(Y.vals @ Y.vals)
    resid2 = 2.0 * rating_term(Y, model)
    if ynorm2 > 0:
        return 1.0 - float(np.sqrt(resid2) / np.sqrt(ynorm2))
    return 1.0 if resid2 == 0.0 else float("-inf")


def _tensor_grams(model: FactorModel, mode: int, mu: float, lam: float) -> np.ndarray:
    f1, f2 = factor_pair(model.factors(), mode)
    return mu * gram_hadamard(f2.T @ f2, f1.T @ f1) + lam * np.eye(model.rank)


def joint_gradient_rows(Y: RatingsMatrix, plans, model: FactorModel,
                        mu: float, lam: float,
                        counter: FlopCounter | None = None):
    """Gradients of the joint objective for all rows of A, B, C.

    The per-row rating Gram term a_i (sum_{j in row i} b_j b_j^T) is applied
    as sum_j (a_i . b_j) b_j, a sparse product over the observed pattern.
    """
    A, B, C = model.factors()
    Yt = Y.transposed()
    n1 = mttkrp_dfacto(plans[1], B, C, counter) if mu else 0.0
    n2 = mttkrp_dfacto(plans[2], C, A, counter) if mu else 0.0
    n3 = mttkrp_dfacto(plans[3], A, B, counter) if mu else 0.0
    preds = rating_predictions(Y, model)
    pred_mat = sp.csr_matrix((preds, Y.cols, Y.rowptr), shape=(Y.n_users, Y.n_items))
    ga = -(Y.scipy() @ B + mu * n1) + pred_mat @ B + A @ _tensor_grams(model, 1, mu, lam)
    pred_mat_t = pred_mat.T.tocsr()
    gb = -(Yt.scipy() @ A + mu * n2) + pred_mat_t @ A + B @ _tensor_grams(model, 2, mu, lam)
    if mu:
        gc = -mu * n3 + C @ _tensor_grams(model, 3, mu, lam)
    else:
        gc = lam * C
    return np.asarray(ga), np.asarray(gb), np.asarray(gc)


def _rowwise_solve(Y: RatingsMatrix, other: np.ndarray, rhs: np.ndarray,
                   base_gram: np.ndarray):
    """Solve a_i (G_i + base) = rhs_i per row, G_i the row's observed Gram."""
    out = np.empty_like(rhs)
    fallback = False
    for i in range(Y.n_users):
        cols, _ = Y.row(i)
        gram = base_gram if cols.size == 0 else base_gram + other[cols].T @ other[cols]
        try:
            out[i] = np.linalg.solve(gram, rhs[i])
        except np.linalg.LinAlgError:
            out[i] = np.linalg.lstsq(gram, rhs[i], rcond=None)[0]
            fallback = True
    return out, fallback


def joint_als_update(Y: RatingsMatrix, plans, model: FactorModel,
                     mu: float, lam: float,
                     counter: FlopCounter | None = None):
    """One joint ALS sweep: row-wise A and B solves, then the tensor-only
    regularized C step.  Returns (model, fallback_flag)."""
    A, B, C = (f.copy() for f in model.factors())
    R = model.rank
    eye = np.eye(R)
    Yt = Y.transposed()
    fallback = False

    work = FactorModel(A, B, C, np.ones(R))
    n1 = mttkrp_dfacto(plans[1], B, C, counter) if mu else np.zeros_like(A)
    rhs = Y.scipy() @ B + mu * n1
    A, fb = _rowwise_solve(Y, B, np.asarray(rhs), _tensor_grams(work, 1, mu, lam))
    fallback |= fb
    work = FactorModel(A, B, C, np.ones(R))

    n2 = mttkrp_dfacto(plans[2], C, A, counter) if mu else np.zeros_like(B)
    rhs = Yt.scipy() @ A + mu * n2
    B, fb = _rowwise_solve(Yt, A, np.asarray(rhs), _tensor_grams(work, 2, mu, lam))
    fallback |= fb
    work = FactorModel(A, B, C, np.ones(R))

    n3 = mttkrp_dfacto(plans[3], A, B, counter) if mu else np.zeros_like(C)
    gram = _tensor_grams(work, 3, mu, lam)
    try:
        C = np.linalg.solve(gram, mu * n3.T).T
    except np.linalg.LinAlgError:
        C = np.linalg.lstsq(gram, mu * n3.T, rcond=None)[0].T
        fallback = True
    return FactorModel(A, B, C, np.ones(R)), fallback


def joint_solve(Y: RatingsMatrix, t: SparseTensorCoo, config: JointConfig):
    """Fit the joint model by ALS sweeps or gradient steps; returns
    (model, stats history) with row 0 holding the seeded initialization."""
    if (Y.n_users, Y.n_items) != (t.dims[0], t.dims[1]):
        raise ValueError(
            f"ratings dims {(Y.n_users, Y.n_items)} do not match tensor "
            f"dims {t.dims[:2]}")
    views = build_views(t)
    plans = {mode: build_plan(views, mode) for mode in (1, 2, 3)}
    model = init_factors(t.dims, config.rank, config.seed)
    counter = FlopCounter()
    history = [IterationStats(0, joint_objective(Y, t, model, config.mu, config.lam),
                              _rating_fit(Y, model))]
    for it in range(1, config.max_iters + 1):
        counter.reset()
        t0 = time.perf_counter()
        stalled = False
        fallback = False
        if config.algorithm == "als":
            model, fallback = joint_als_update(Y, plans, model, config.mu,
                                               config.lam, counter)
            f = joint_objective(Y, t, model, config.mu, config.lam)
            ms_solve = (time.perf_counter() - t0) * 1e3
            ms_ls = 0.0
        else:
            grads = joint_gradient_rows(Y, plans, model, config.mu, config.lam, counter)
            ls = backtracking_line_search(
                lambda m: (joint_objective(Y, t, m, config.mu, config.lam), None),
                model, grads, history[-1].objective, config)
            if ls.stalled:
                stalled = True
                f = history[-1].objective
            else:
                model = FactorModel(model.A - ls.alpha * grads[0],
                                    model.B - ls.alpha * grads[1],
                                    model.C - ls.alpha * grads[2], model.weights)
                f = ls.objective
            ms_solve = 0.0
            ms_ls = (time.perf_counter() - t0) * 1e3
        stats = IterationStats(it, f, _rating_fit(Y, model), ms_solve=ms_solve,
                               ms_linesearch=ms_ls, flops=counter.multiply_adds,
                               lstsq_fallback=fallback, stalled=stalled)
        history.append(stats)
        if not np.isfinite(f):
            raise SolverAbort(it, f"joint objective became {f}")
        if stalled:
            break
        if relative_change(history[-2].objective, f) < config.tol:
            break
    return model, history


def mse(test: RatingsMatrix, model: FactorModel,
        clamp: tuple[float, float] | None = None) -> float:
    """Mean squared rating error; predictions optionally clamped."""
    if test.nnz == 0:
        raise ValueError("empty test set")
    preds = rating_predictions(test, model)
    if clamp is not None:
        preds = np.clip(preds, clamp[0], clamp[1])
    resid = test.vals - preds
    return float(resid @ resid) / test.nnz


def evaluate_grid(train: RatingsMatrix, val: RatingsMatrix, test: RatingsMatrix,
                  t: SparseTensorCoo, base: JointConfig, mu_grid, lambda_grid):
    """Fit one model per (mu, lam) pair and report validation/test MSE.

    Selection uses validation MSE only; ties break toward the earlier grid
    position.  Returns (rows, best_row)."""
    rows = []
    for mu in mu_grid:
        for lam in lambda_grid:
            config = replace(base, mu=float(mu), lam=float(lam))
            model, _ = joint_solve(train, t, config)
            rows.append({
                "mu": float(mu),
                "lam": float(lam),
                "val_mse": mse(val, model, base.clamp),
                "test_mse": mse(test, model, base.clamp),
            })
    best = min(rows, key=lambda r: r["val_mse"])
    return rows, best


def report_to_csv(rows, target) -> None:
    def _write(fh):
        w = csv.writer(fh)
        w.writerow(["mu", "lambda", "val_mse", "test_mse"])
        for r in rows:
            w.writerow([repr(r["mu"]), repr(r["lam"]),
                        repr(r["val_mse"]), repr(r["test_mse"])])

    if hasattr(target, "write"):
        _write(target)
    else:
        with open(target, "w", newline="") as fh:
            _write(fh)


# Default hyperparameter grids for the joint study: mu spans 1e2 .. 1e-10,
# lam the standard ridge ladder.
DEFAULT_MU_GRID = tuple(10.0 ** e for e in range(2, -11, -1))
DEFAULT_LAMBDA_GRID = (100.0, 10.0, 1.0, 0.1, 0.01)
