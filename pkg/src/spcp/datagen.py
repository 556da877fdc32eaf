"""Synthetic sparse tensors: power-law preferential attachment and planted
low-rank instances for recovery tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparse_core import SparseTensorCoo
from .solvers import FactorModel


@dataclass(frozen=True)
class GenSpec:
    dims: tuple[int, int, int]
    nnz: int
    seed: int = 0
    values: str = "ones"  # "ones" or "uniform"
    rank: int | None = None  # planted mode only
    noise: float = 0.0

    def __post_init__(self):
        I, J, K = self.dims
        if self.nnz < 1 or self.nnz > I * J * K:
            raise ValueError(f"target nnz must be in [1, {I * J * K}]")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.values not in ("ones", "uniform"):
            raise ValueError("values must be 'ones' or 'uniform'")


class _UniformPool:
    """Buffered uniform(0,1) draws; one numpy call per block keeps the
    sequential attachment loop fast while staying seed-deterministic."""

    def __init__(self, rng, block=1 << 16):
        self.rng = rng
        self.block = block
        self.buf = rng.random(block)
        self.pos = 0

    def next(self) -> float:
        if self.pos == self.buf.size:
            self.buf = self.rng.random(self.block)
            self.pos = 0
        v = self.buf[self.pos]
        self.pos += 1
        return v


def gen_preferential(spec: GenSpec) -> SparseTensorCoo:
    """Preferential-attachment tensor: an entry lands at (i, j, k) with
    probability proportional to p_i * p_j * p_k, where each marginal weight
    is 1 + (number of accepted entries using that index).  Duplicate triples
    are redrawn until the target count of distinct entries is reached.
    """
    I, J, K = spec.dims
    if spec.nnz > 0.9 * I * J * K:
        raise ValueError(
            "target nnz within 10% of the dense size; rejection sampling would "
            "thrash, use a dense representation instead")
    rng = np.random.default_rng(spec.seed)
    pool = _UniformPool(rng)
    occ = [np.empty(spec.nnz, dtype=np.int64) for _ in range(3)]
    ii = np.empty(spec.nnz, dtype=np.int64)
    jj = np.empty(spec.nnz, dtype=np.int64)
    kk = np.empty(spec.nnz, dtype=np.int64)
    seen: set[int] = set()
    accepted = 0
    dims = (I, J, K)
    while accepted < spec.nnz:
        draw = []
        for axis in range(3):
            # mass = dim smoothing slots + one slot per prior use
            total = dims[axis] + accepted
            u = int(pool.next() * total)
            draw.append(u if u < dims[axis] else int(occ[axis][u - dims[axis]]))
        key = (draw[0] * J + draw[1]) * K + draw[2]
        if key in seen:
            continue
        seen.add(key)
        ii[accepted], jj[accepted], kk[accepted] = draw
        for axis in range(3):
            occ[axis][accepted] = draw[axis]
        accepted += 1
    vals = np.ones(spec.nnz) if spec.values == "ones" else rng.random(spec.nnz)
    return SparseTensorCoo.from_entries(spec.dims, ii, jj, kk, vals)


def gen_planted(spec: GenSpec):
    """Planted CP tensor: draws ground-truth factors, samples distinct index
    triples uniformly, and stores the model value (plus optional Gaussian
    noise) at each.  Returns (tensor, true factors)."""
    if spec.rank is None or spec.rank < 1:
        raise ValueError("planted generation requires a positive rank")
    I, J, K = spec.dims
    rng = np.random.default_rng(spec.seed)
    truth = FactorModel(rng.random((I, spec.rank)), rng.random((J, spec.rank)),
                        rng.random((K, spec.rank)), np.ones(spec.rank))
    space = I * J * K
    if spec.nnz == space:
        flat = np.arange(space, dtype=np.int64)
    elif space <= 1 << 24:
        flat = rng.permutation(space)[: spec.nnz].astype(np.int64)
    else:
        chosen: list[int] = []
        seen: set[int] = set()
        while len(chosen) < spec.nnz:
            for cand in rng.integers(0, space, size=2 * (spec.nnz - len(chosen))):
                if int(cand) not in seen:
                    seen.add(int(cand))
                    chosen.append(int(cand))
                    if len(chosen) == spec.nnz:
                        break
        flat = np.asarray(chosen, dtype=np.int64)
    kk = flat % K
    jj = (flat // K) % J
    ii = flat // (J * K)
    vals = (truth.A[ii] * truth.B[jj] * truth.C[kk]).sum(axis=1)
    if spec.noise > 0:
        vals = vals + spec.noise * rng.standard_normal(spec.nnz)
    return SparseTensorCoo.from_entries(spec.dims, ii, jj, kk, vals), truth


def gen_shared_factors(n_users: int, n_items: int, n_words: int, rank: int,
                       rating_density: float, seed: int,
                       rating_noise: float = 0.0, tensor_pairs: str = "all"):
    """Planted joint instance: ratings and a review tensor sharing the user
    and item factors.

    Ratings are sampled (i, j) pairs of the planted low-rank matrix.  The
    tensor holds the planted CP values over every index triple
    (tensor_pairs="all"), or only over the rated pairs ("rated").  The dense
    default keeps the tensor exactly rank-R under the all-entries residual
    the solvers minimize; a pair-subsampled tensor is not.

    Returns (rating records (n, 4), tensor, truth model).
    """
    if tensor_pairs not in ("all", "rated"):
        raise ValueError("tensor_pairs must be 'all' or 'rated'")
    rng = np.random.default_rng(seed)
    truth = FactorModel(rng.random((n_users, rank)), rng.random((n_items, rank)),
                        rng.random((n_words, rank)), np.ones(rank))
    n_pairs = max(1, int(round(rating_density * n_users * n_items)))
    flat = rng.permutation(n_users * n_items)[:n_pairs]
    users = flat // n_items
    items = flat % n_items
    ratings = (truth.A[users] * truth.B[items]).sum(axis=1)
    if rating_noise > 0:
        ratings = ratings + rating_noise * rng.standard_normal(n_pairs)
    records = np.column_stack([users, items, ratings, np.ones(n_pairs)])
    if tensor_pairs == "all":
        ii = np.repeat(np.arange(n_users), n_items * n_words)
        jj = np.tile(np.repeat(np.arange(n_items), n_words), n_users)
        kk = np.tile(np.arange(n_words), n_users * n_items)
    else:
        ii = np.repeat(users, n_words)
        jj = np.repeat(items, n_words)
        kk = np.tile(np.arange(n_words), n_pairs)
    vals = (truth.A[ii] * truth.B[jj] * truth.C[kk]).sum(axis=1)
    tensor = SparseTensorCoo.from_entries((n_users, n_items, n_words), ii, jj, kk, vals)
    return records, tensor, truth
