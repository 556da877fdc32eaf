"""Shared fixtures and independent oracles used across the suite."""

import numpy as np
import pytest

from spcp.sparse_core import SparseTensorCoo


def random_coo(rng, max_dim=12, max_nnz=300, min_dim=2, ensure_nnz=1):
    """Random sparse tensor with distinct triples and nonzero values."""
    dims = tuple(int(rng.integers(min_dim, max_dim + 1)) for _ in range(3))
    space = dims[0] * dims[1] * dims[2]
    nnz = int(rng.integers(ensure_nnz, min(max_nnz, space) + 1))
    flat = rng.choice(space, size=nnz, replace=False)
    kk = flat % dims[2]
    jj = (flat // dims[2]) % dims[1]
    ii = flat // (dims[1] * dims[2])
    vals = rng.uniform(0.5, 2.0, size=nnz) * rng.choice([-1.0, 1.0], size=nnz)
    return SparseTensorCoo.from_entries(dims, ii, jj, kk, vals)


def dense_tensor(t):
    out = np.zeros(t.dims)
    out[t.ii, t.jj, t.kk] = t.values
    return out


def dense_flatten(T, n):
    """Oracle flattening by axis permutation: col j+kJ / k+iK / i+jI."""
    I, J, K = T.shape
    if n == 1:
        return T.transpose(0, 2, 1).reshape(I, K * J)
    if n == 2:
        return T.transpose(1, 0, 2).reshape(J, I * K)
    return T.transpose(2, 1, 0).reshape(K, J * I)


def dense_mttkrp(T, f1, f2, mode):
    """Brute-force mode-n MTTKRP by explicit summation over tensor entries."""
    I, J, K = T.shape
    R = f1.shape[1]
    sizes = {1: I, 2: J, 3: K}[mode]
    out = np.zeros((sizes, R))
    for i in range(I):
        for j in range(J):
            for k in range(K):
                v = T[i, j, k]
                if v == 0.0:
                    continue
                if mode == 1:
                    out[i] += v * f1[j] * f2[k]
                elif mode == 2:
                    out[j] += v * f1[k] * f2[i]
                else:
                    out[k] += v * f1[i] * f2[j]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


# Worked-example fixture: the 2 x 3 x 3 tensor whose mode-1 flattening is
# [[1 0 6 | 0 4 7 | 2 0 0], [0 0 0 | 3 0 8 | 0 5 9]], with the small factor
# pair used by every kernel golden test.
def example_tensor():
    entries = [
        (0, 0, 0, 1.0),
        (0, 0, 2, 2.0),
        (1, 0, 1, 3.0),
        (0, 1, 1, 4.0),
        (1, 1, 2, 5.0),
        (0, 2, 0, 6.0),
        (0, 2, 1, 7.0),
        (1, 2, 1, 8.0),
        (1, 2, 2, 9.0),
    ]
    ii, jj, kk, vv = zip(*entries)
    return SparseTensorCoo.from_entries((2, 3, 3), ii, jj, kk, vv)


def example_factors():
    B = np.array([[3.0, 1.0], [1.0, 1.0], [2.0, 3.0]])
    C = np.array([[1.0, 2.0], [2.0, 1.0], [1.0, 3.0]])
    return B, C


@pytest.fixture
def golden():
    return example_tensor(), example_factors()
