"""MTTKRP kernels: the two-SpMV kernel with a preallocated reshape pattern,
plus three reference kernels (naive, gather/scatter, indicator-product) used
as oracles and benchmark baselines.

The fast kernel computes N = X^n (F2 (x) F1) column by column as

    v   <- Xhat^T f1[:, r]        (compressed transpose, one SpMV)
    M   <- reshape(v)             (free: v lands in M's CSR value slot array)
    n_r <- M f2[:, r]             (second SpMV)

The reshape costs nothing because ascending flat index k + i*K is exactly
the row-major (i, k) order of M, so the pattern's value array is the
reshaped vector.  The pattern depends only on the tensor's sparsity, never
on the factors, so a plan is built once and reused for every factor pair.

Factor-pair convention, shared by every kernel in this module:

    mode 1:  N_A = X^1 (C (x) B)   f1 = B, f2 = C
    mode 2:  N_B = X^2 (A (x) C)   f1 = C, f2 = A
    mode 3:  N_C = X^3 (B (x) A)   f1 = A, f2 = B

Plans hold mutable scratch (v_buffer and the pattern's value array); a plan
must not be used from two threads at once.  Distinct plans over shared views
are independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sparse_core import CsrMatrix, FlattenedViews, SparseTensorCoo, khatri_rao

# Default cap on materialized Khatri-Rao values for the naive kernel; it
# exists for desk-scale oracle testing only.
NAIVE_VALUE_CAP = 2**28


class CapacityError(RuntimeError):
    """Naive kernel asked to materialize more than the configured cap."""


@dataclass
class FlopCounter:
    """Accumulates multiply-add counts across kernel calls."""

    multiply_adds: int = 0

    def add(self, n: int) -> None:
        self.multiply_adds += int(n)

    def reset(self) -> None:
        self.multiply_adds = 0


# target mode -> (paired transpose mode, divisor giving (out_row, out_col)
# from a flat index: out_row = flat // div, out_col = flat % div)
_PLAN_PAIRING = {1: 2, 2: 3, 3: 1}


@dataclass
class MttkrpPlan:
    """Precomputed sparsity pattern for one target mode.

    xhatT is the compressed transpose paired with the target mode; m_pattern
    is the reshape skeleton whose col/rowptr arrays never change across calls
    (only its values are rewritten).  v_buffer mirrors the latest compressed
    SpMV result.
    """

    mode: int
    xhatT: CsrMatrix
    v_buffer: np.ndarray
    m_pattern: CsrMatrix
    out_rows: int
    out_cols: int
    _xhat_sp: object = field(repr=False, default=None)
    _m_sp: object = field(repr=False, default=None)

    def __post_init__(self):
        if self._xhat_sp is None:
            self._xhat_sp = self.xhatT.scipy()
        if self._m_sp is None:
            self._m_sp = self.m_pattern.scipy()  # shares m_pattern.values


def build_plan(views: FlattenedViews, target_mode: int) -> MttkrpPlan:
    """Build the reusable two-SpMV plan for one target mode.

    The pattern is derived purely from the paired compressed transpose: slot
    t (flat row index rowmap[t]) lands at matrix position
    (flat // div, flat % div) where div is the output column count.  Slots in
    ascending flat order are exactly the pattern's row-major CSR order.
    """
    if target_mode not in (1, 2, 3):
        raise ValueError(f"target_mode must be 1, 2 or 3, got {target_mode}")
    paired = _PLAN_PAIRING[target_mode]
    xhatT = views.transpose(paired)
    rowmap = views.rowmap(paired)
    dims = views.dims
    out_rows = dims[target_mode - 1]
    out_cols = dims[(target_mode + 1) % 3]
    return plan_from_parts(target_mode, xhatT, rowmap, out_rows, out_cols)


def plan_from_parts(mode, xhatT, rowmap, out_rows, out_cols) -> MttkrpPlan:
    """Assemble a plan from a compressed transpose slice (also used by the
    distributed workers on their row shards, with shifted output rows)."""
    rows = rowmap // out_cols
    cols = rowmap % out_cols
    rowptr = np.zeros(out_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=out_rows), out=rowptr[1:])
    pattern = CsrMatrix(out_rows, out_cols, np.zeros(rowmap.size), cols, rowptr)
    return MttkrpPlan(mode, xhatT, np.zeros(rowmap.size), pattern, out_rows, out_cols)


def mttkrp_dfacto(plan: MttkrpPlan, f1: np.ndarray, f2: np.ndarray,
                  counter: FlopCounter | None = None) -> np.ndarray:
    """Two-SpMV MTTKRP using a prebuilt plan.

    Per column r: v_buffer <- xhatT @ f1[:, r], the pattern's values take
    v_buffer, and the output column is pattern @ f2[:, r].  No allocation
    beyond the plan's own scratch.
    """
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    _check_factors(f1, f2, plan.xhatT.ncols, plan.out_cols)
    rank = f1.shape[1]
    out = np.empty((plan.out_rows, rank))
    m_sp = plan._m_sp
    for r in range(rank):
        plan.v_buffer[:] = plan._xhat_sp @ f1[:, r]
        m_sp.data[:] = plan.v_buffer
        out[:, r] = m_sp @ f2[:, r]
    if counter is not None:
        counter.add((plan.xhatT.nnz + plan.m_pattern.nnz) * rank)
    return out


def mttkrp_naive(xn: CsrMatrix, f1: np.ndarray, f2: np.ndarray,
                 counter: FlopCounter | None = None,
                 value_cap: int = NAIVE_VALUE_CAP) -> np.ndarray:
    """Reference kernel that materializes the Khatri-Rao product.

    Memory-capped: JK*R floats is the intermediate blow-up this package
    exists to avoid, so refuse anything past value_cap.
    """
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    _check_factors(f1, f2, None, None)
    rank = f1.shape[1]
    if xn.ncols != f1.shape[0] * f2.shape[0]:
        raise ValueError("flattening columns do not match factor dimensions")
    if xn.ncols * rank > value_cap:
        raise CapacityError(
            f"naive kernel would materialize {xn.ncols * rank} values (cap {value_cap})"
        )
    kr = khatri_rao(f2, f1)
    out = np.asarray(xn.scipy() @ kr)
    if counter is not None:
        counter.add((xn.ncols + xn.nnz) * rank)
    return out


def mttkrp_toolbox(t: SparseTensorCoo, f1: np.ndarray, f2: np.ndarray,
                   counter: FlopCounter | None = None, mode: int = 1,
                   capture: dict | None = None) -> np.ndarray:
    """Gather/scatter reference kernel working directly on COO entries.

    Per column: gather f1 and f2 over the two non-target indices, take the
    triple Hadamard product with the entry values, and scatter-add by the
    target index.  Pass capture={} to receive the per-entry intermediate
    vectors (entry order is the tensor's canonical order).
    """
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    _check_factors(f1, f2, None, None)
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode}")
    gather1, gather2, scatter = {
        1: (t.jj, t.kk, t.ii),
        2: (t.kk, t.ii, t.jj),
        3: (t.ii, t.jj, t.kk),
    }[mode]
    size = t.dims[mode - 1]
    rank = f1.shape[1]
    out = np.empty((size, rank))
    if capture is not None:
        capture["m_columns"] = []
    for r in range(rank):
        m = t.values * f1[gather1, r] * f2[gather2, r]
        if capture is not None:
            capture["m_columns"].append(m.copy())
        out[:, r] = np.bincount(scatter, weights=m, minlength=size)
    if counter is not None:
        counter.add(5 * t.nnz * rank)
    return out


def mttkrp_gigatensor(xn: CsrMatrix, f1: np.ndarray, f2: np.ndarray,
                      counter: FlopCounter | None = None) -> np.ndarray:
    """Indicator-product reference kernel on the flattening's stored pattern.

    Per column: one Hadamard product pairs the stored values with f2
    broadcast over column blocks, a second pairs the binary pattern with f1
    tiled across blocks, their product is row-summed.  Everything stays on
    the stored pattern; nothing is densified.
    """
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    _check_factors(f1, f2, None, None)
    if xn.ncols != f1.shape[0] * f2.shape[0]:
        raise ValueError("flattening columns do not match factor dimensions")
    split = f1.shape[0]
    idx1 = xn.columns % split
    idx2 = xn.columns // split
    row_ids = np.repeat(np.arange(xn.nrows), np.diff(xn.rowptr))
    bin_vals = (xn.values != 0).astype(np.float64)
    rank = f1.shape[1]
    out = np.empty((xn.nrows, rank))
    for r in range(rank):
        n1 = xn.values * f2[idx2, r]
        n2 = bin_vals * f1[idx1, r]
        out[:, r] = np.bincount(row_ids, weights=n1 * n2, minlength=xn.nrows)
    if counter is not None:
        counter.add(5 * xn.nnz * rank)
    return out


def _check_factors(f1, f2, want_f1_rows, want_f2_rows):
    if f1.ndim != 2 or f2.ndim != 2:
        raise ValueError("factors must be 2-d arrays")
    if f1.shape[1] != f2.shape[1]:
        raise ValueError(f"rank mismatch: {f1.shape} vs {f2.shape}")
    if want_f1_rows is not None and f1.shape[0] != want_f1_rows:
        raise ValueError(f"first factor must have {want_f1_rows} rows, got {f1.shape[0]}")
    if want_f2_rows is not None and f2.shape[0] != want_f2_rows:
        raise ValueError(f"second factor must have {want_f2_rows} rows, got {f2.shape[0]}")


def factor_pair(model_factors, mode: int):
    """(f1, f2) for a target mode given the (A, B, C) triple."""
    A, B, C = model_factors
    return {1: (B, C), 2: (C, A), 3: (A, B)}[mode]
