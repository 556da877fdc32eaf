"""Sparse third-order tensor core.

COO tensor storage, the three mode flattenings in CSR form, compressed
transposes (all-zero rows dropped), and the dense Khatri-Rao / Hadamard
helpers the solvers are built on.

Index conventions are zero-based throughout.  An entry (i, j, k) of an
I x J x K tensor lands at

    mode 1:  row i, column j + k*J      (I  x JK)
    mode 2:  row j, column k + i*K      (J  x KI)
    mode 3:  row k, column i + j*I      (K  x IJ)

All containers are immutable after construction and safe to share across
threads read-only.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class ParseError(ValueError):
    """Malformed text input; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class SparseTensorCoo:
    """Canonical sparse third-order tensor.

    Entries are kept in four parallel arrays sorted lexicographically by
    (i, j, k) with no duplicate index triples.  Values may be zero only if
    the input explicitly produced them (e.g. duplicates summing to zero);
    the stored pattern is what downstream plans key on.
    """

    dims: tuple[int, int, int]
    ii: np.ndarray
    jj: np.ndarray
    kk: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return self.values.size

    @classmethod
    def from_entries(cls, dims, ii, jj, kk, values) -> "SparseTensorCoo":
        """Canonicalize raw entry arrays: sort, sum duplicates, validate."""
        t, _ = cls.from_entries_counted(dims, ii, jj, kk, values)
        return t

    @classmethod
    def from_entries_counted(cls, dims, ii, jj, kk, values):
        """Like from_entries but also returns the number of merged duplicates."""
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"dims must be three positive integers, got {dims}")
        ii = np.asarray(ii, dtype=np.int64)
        jj = np.asarray(jj, dtype=np.int64)
        kk = np.asarray(kk, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if not (ii.shape == jj.shape == kk.shape == values.shape):
            raise ValueError("entry arrays must have identical length")
        for name, idx, bound in (("i", ii, dims[0]), ("j", jj, dims[1]), ("k", kk, dims[2])):
            if idx.size and (idx.min() < 0 or idx.max() >= bound):
                raise ValueError(f"{name} index out of range [0, {bound})")
        order = np.lexsort((kk, jj, ii))
        ii, jj, kk, values = ii[order], jj[order], kk[order], values[order]
        merged = 0
        if ii.size:
            same = (np.diff(ii) == 0) & (np.diff(jj) == 0) & (np.diff(kk) == 0)
            if same.any():
                # Group boundaries: first slot of each distinct triple.
                starts = np.flatnonzero(np.concatenate(([True], ~same)))
                merged = ii.size - starts.size
                sums = np.add.reduceat(values, starts)
                ii, jj, kk, values = ii[starts], jj[starts], kk[starts], sums
        return cls(dims, ii, jj, kk, values), merged

    def flat_pairs(self) -> np.ndarray:
        """Flat (i, j) pair keys, used to match tensor entries to rating pairs."""
        return self.ii * self.dims[1] + self.jj


@dataclass(frozen=True)
class CsrMatrix:
    """Compressed sparse row matrix (values / columns / rowptr).

    Column indices are strictly increasing within each row.  Stored values
    may include explicit zeros; nnzc() ignores those.
    """

    nrows: int
    ncols: int
    values: np.ndarray
    columns: np.ndarray
    rowptr: np.ndarray

    def __post_init__(self):
        if self.rowptr.shape != (self.nrows + 1,):
            raise ValueError("rowptr must have nrows+1 entries")
        if self.rowptr[0] != 0 or self.rowptr[-1] != self.values.size:
            raise ValueError("rowptr must start at 0 and end at nnz")
        if self.columns.size and self.columns.max() >= self.ncols:
            raise ValueError("column index out of range")

    @property
    def nnz(self) -> int:
        return self.values.size

    @classmethod
    def from_coo(cls, rows, cols, values, shape) -> "CsrMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        nrows, ncols = (int(s) for s in shape)
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        rowptr = np.zeros(nrows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=nrows), out=rowptr[1:])
        return cls(nrows, ncols, values, cols, rowptr)

    def scipy(self) -> sp.csr_matrix:
        """scipy view sharing this matrix's arrays (used for the SpMV hot path)."""
        return sp.csr_matrix(
            (self.values, self.columns, self.rowptr), shape=(self.nrows, self.ncols), copy=False
        )

    def row_entries(self, r: int):
        lo, hi = self.rowptr[r], self.rowptr[r + 1]
        return self.columns[lo:hi], self.values[lo:hi]

    def dense(self) -> np.ndarray:
        """Dense materialization, for small matrices in tests and goldens only."""
        out = np.zeros((self.nrows, self.ncols))
        rows = np.repeat(np.arange(self.nrows), np.diff(self.rowptr))
        out[rows, self.columns] = self.values
        return out


@dataclass(frozen=True)
class FlattenedViews:
    """The three mode flattenings plus their compressed transposes.

    xtN is the transpose of xN with all-zero rows removed; rowmapN maps each
    retained row back to its flat row index in the uncompressed transpose
    (strictly increasing).  Row removal is by stored pattern, so an explicit
    stored zero keeps its row.
    """

    x1: CsrMatrix
    x2: CsrMatrix
    x3: CsrMatrix
    xt1: CsrMatrix
    xt2: CsrMatrix
    xt3: CsrMatrix
    rowmap1: np.ndarray
    rowmap2: np.ndarray
    rowmap3: np.ndarray

    def flattening(self, n: int) -> CsrMatrix:
        return (self.x1, self.x2, self.x3)[_check_mode(n) - 1]

    def transpose(self, n: int) -> CsrMatrix:
        return (self.xt1, self.xt2, self.xt3)[_check_mode(n) - 1]

    def rowmap(self, n: int) -> np.ndarray:
        return (self.rowmap1, self.rowmap2, self.rowmap3)[_check_mode(n) - 1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.x1.nrows, self.x2.nrows, self.x3.nrows)


def _check_mode(n: int) -> int:
    if n not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {n}")
    return n


def _mode_arrays(t: SparseTensorCoo, n: int):
    """(row, col, shape) arrays of the mode-n flattening."""
    I, J, K = t.dims
    if n == 1:
        return t.ii, t.jj + t.kk * J, (I, J * K)
    if n == 2:
        return t.jj, t.kk + t.ii * K, (J, K * I)
    return t.kk, t.ii + t.jj * I, (K, I * J)


def flatten_mode(t: SparseTensorCoo, n: int) -> CsrMatrix:
    """Mode-n flattening of a sparse tensor as a canonical CSR matrix."""
    _check_mode(n)
    rows, cols, shape = _mode_arrays(t, n)
    return CsrMatrix.from_coo(rows, cols, t.values, shape)


def transpose_compress(flat_rows, cols, values, ncols):
    """CSR transpose with all-zero rows removed, plus the retained-row map.

    flat_rows are the (uncompressed) transpose row indices; only rows that
    actually occur are kept.  Shared by the serial view builder and the
    distributed workers so both produce bit-identical row ordering.
    """
    flat_rows = np.asarray(flat_rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    order = np.lexsort((cols, flat_rows))
    flat_sorted = flat_rows[order]
    rowmap, inverse = np.unique(flat_sorted, return_inverse=True)
    rowptr = np.zeros(rowmap.size + 1, dtype=np.int64)
    np.cumsum(np.bincount(inverse, minlength=rowmap.size), out=rowptr[1:])
    mat = CsrMatrix(rowmap.size, int(ncols), values[order], cols[order], rowptr)
    return mat, rowmap


def build_views(t: SparseTensorCoo) -> FlattenedViews:
    """All three flattenings with compressed transposes and row maps."""
    flats = []
    xts = []
    rowmaps = []
    for n in (1, 2, 3):
        rows, cols, shape = _mode_arrays(t, n)
        flats.append(CsrMatrix.from_coo(rows, cols, t.values, shape))
        xt, rowmap = transpose_compress(cols, rows, t.values, shape[0])
        xts.append(xt)
        rowmaps.append(rowmap)
    return FlattenedViews(*flats, *xts, *rowmaps)


def nnzc(m: CsrMatrix) -> int:
    """Number of columns holding at least one stored nonzero value."""
    return int(np.unique(m.columns[m.values != 0]).size)


def khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Columnwise Kronecker product: column r is a[:, r] (x) b[:, r].

    Row s*len(b) + t equals a[s, r] * b[t, r], which lines up with the flat
    column layout of the mode flattenings: khatri_rao(C, B) row j + k*J
    carries c[k]*b[j], pairing with column j + k*J of the mode-1 flattening.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"column counts must match, got {a.shape} and {b.shape}")
    return (a[:, None, :] * b[None, :, :]).reshape(a.shape[0] * b.shape[0], a.shape[1])


def gram_hadamard(p: np.ndarray, q: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Entrywise product of two Gram matrices plus an optional ridge term."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError(f"expected equal square shapes, got {p.shape} and {q.shape}")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    out = p * q
    if ridge:
        out = out + ridge * np.eye(p.shape[0])
    return out


def parse_tensor(source, index_base: int = 1):
    """Parse the tensor text format.

    Lines are "i j k value" separated by whitespace; lines starting with '#'
    are comments; an optional "%dims I J K" header (before any data line)
    overrides the inferred dimensions.  index_base (0 or 1) is subtracted
    from every index.

    Returns (tensor, merged) where merged counts duplicate triples summed
    during canonicalization.
    """
    if index_base not in (0, 1):
        raise ValueError("index_base must be 0 or 1")
    ii, jj, kk, vals = [], [], [], []
    header_dims = None
    for lineno, raw in enumerate(_iter_lines(source), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("%"):
            tokens = line.split()
            if tokens[0] != "%dims" or len(tokens) != 4:
                raise ParseError(f"unknown directive {tokens[0]!r}", lineno)
            if header_dims is not None:
                raise ParseError("duplicate %dims header", lineno)
            if vals:
                raise ParseError("%dims header must precede data lines", lineno)
            try:
                header_dims = tuple(int(tok) for tok in tokens[1:])
            except ValueError:
                raise ParseError("non-integer dimension in %dims header", lineno) from None
            if any(d <= 0 for d in header_dims):
                raise ParseError("dimensions must be positive", lineno)
            continue
        tokens = line.split()
        if len(tokens) != 4:
            raise ParseError(f"expected 'i j k value', got {len(tokens)} fields", lineno)
        try:
            i, j, k = (int(tok) - index_base for tok in tokens[:3])
            v = float(tokens[3])
        except ValueError:
            raise ParseError(f"malformed entry {line!r}", lineno) from None
        if min(i, j, k) < 0:
            raise ParseError("negative index after base adjustment", lineno)
        if header_dims is not None and (i >= header_dims[0] or j >= header_dims[1] or k >= header_dims[2]):
            raise ParseError("index outside %dims header bounds", lineno)
        ii.append(i)
        jj.append(j)
        kk.append(k)
        vals.append(v)
    if not vals:
        raise ParseError("no tensor entries in input")
    dims = header_dims or (max(ii) + 1, max(jj) + 1, max(kk) + 1)
    return SparseTensorCoo.from_entries_counted(dims, ii, jj, kk, vals)


def write_tensor(t: SparseTensorCoo, target, index_base: int = 1) -> None:
    """Canonical writer: %dims header then sorted entries, round-trip exact."""
    if index_base not in (0, 1):
        raise ValueError("index_base must be 0 or 1")
    lines = [f"%dims {t.dims[0]} {t.dims[1]} {t.dims[2]}"]
    for i, j, k, v in zip(t.ii, t.jj, t.kk, t.values):
        lines.append(f"{i + index_base} {j + index_base} {k + index_base} {float(v)!r}")
    text = "\n".join(lines) + "\n"
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w") as fh:
            fh.write(text)


def _iter_lines(source):
    if isinstance(source, bytes):
        source = source.decode()
    if isinstance(source, str) and "\n" not in source and _looks_like_path(source):
        with open(source) as fh:
            yield from fh
        return
    if isinstance(source, str):
        yield from io.StringIO(source)
        return
    for raw in source:
        yield raw.decode() if isinstance(raw, bytes) else raw


def _looks_like_path(s: str) -> bool:
    import os

    return os.path.exists(s)
