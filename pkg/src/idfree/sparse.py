"""Compressed sparse row container used for every graph in the pipeline.

Storage is canonical: column indices are strictly increasing within each row
and duplicate coordinates are summed.  Explicit zeros are kept, since a kNN
row whose similarities were clamped to 0 still records which neighbours were
selected.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass(eq=False)
class SparseCSR:
    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    vals: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.col_idx.shape[0])

    @classmethod
    def from_coo(cls, rows, cols, vals, shape) -> "SparseCSR":
        """Build a canonical matrix from coordinate triples (duplicates summed)."""
        n_rows, n_cols = int(shape[0]), int(shape[1])
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=np.float64).ravel()
        if not (rows.shape == cols.shape == vals.shape):
            raise ValueError("rows, cols and vals must have equal length")
        if rows.size and (rows.min() < 0 or rows.max() >= n_rows):
            raise IndexError("row index out of range")
        if cols.size and (cols.min() < 0 or cols.max() >= n_cols):
            raise IndexError("column index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size:
            # merge runs of identical (row, col)
            new = np.ones(rows.size, dtype=bool)
            new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            starts = np.flatnonzero(new)
            vals = np.add.reduceat(vals, starts)
            rows, cols = rows[starts], cols[starts]
        counts = np.bincount(rows, minlength=n_rows)
        row_ptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(counts, out=row_ptr[1:])
        return cls(n_rows, n_cols, row_ptr, cols, vals)

    @classmethod
    def from_dense(cls, dense) -> "SparseCSR":
        dense = np.asarray(dense, dtype=np.float64)
        r, c = np.nonzero(dense)
        return cls.from_coo(r, c, dense[r, c], dense.shape)

    @classmethod
    def from_scipy(cls, m) -> "SparseCSR":
        coo = sp.coo_matrix(m)
        return cls.from_coo(coo.row, coo.col, coo.data, coo.shape)

    @classmethod
    def empty(cls, n_rows: int, n_cols: int) -> "SparseCSR":
        return cls(n_rows, n_cols, np.zeros(n_rows + 1, dtype=np.int64),
                   np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64))

    @classmethod
    def identity(cls, n: int) -> "SparseCSR":
        idx = np.arange(n)
        return cls.from_coo(idx, idx, np.ones(n), (n, n))

    def canonicalize(self) -> "SparseCSR":
        return SparseCSR.from_coo(self.row_ids(), self.col_idx, self.vals, self.shape)

    def is_canonical(self) -> bool:
        rp = self.row_ptr
        if rp[0] != 0 or rp[-1] != self.nnz or np.any(np.diff(rp) < 0):
            return False
        if self.nnz < 2:
            return True
        same_row = self.row_ids()[1:] == self.row_ids()[:-1]
        return bool(np.all(np.diff(self.col_idx)[same_row] > 0))

    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry."""
        return np.repeat(np.arange(self.n_rows), np.diff(self.row_ptr))

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def with_values(self, vals) -> "SparseCSR":
        vals = np.asarray(vals, dtype=np.float64)
        if vals.shape != (self.nnz,):
            raise ValueError(f"expected {self.nnz} values, got shape {vals.shape}")
        return SparseCSR(self.n_rows, self.n_cols, self.row_ptr, self.col_idx, vals)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        np.add.at(out, (self.row_ids(), self.col_idx), self.vals)
        return out

    def to_scipy(self, dtype=np.float64) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.vals.astype(dtype, copy=False), self.col_idx, self.row_ptr),
            shape=self.shape,
        )

    def transpose(self) -> "SparseCSR":
        return SparseCSR.from_coo(self.col_idx, self.row_ids(), self.vals,
                                  (self.n_cols, self.n_rows))

    @property
    def T(self) -> "SparseCSR":
        return self.transpose()

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.row_ids(), weights=self.vals, minlength=self.n_rows)

    def col_counts(self) -> np.ndarray:
        return np.bincount(self.col_idx, minlength=self.n_cols)

    def __add__(self, other: "SparseCSR") -> "SparseCSR":
        if self.shape != other.shape:
            raise ValueError(f"dimension mismatch: {self.shape} vs {other.shape}")
        return SparseCSR.from_coo(
            np.concatenate([self.row_ids(), other.row_ids()]),
            np.concatenate([self.col_idx, other.col_idx]),
            np.concatenate([self.vals, other.vals]),
            self.shape,
        )

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.row_ptr[i], self.row_ptr[i + 1]
        return self.col_idx[lo:hi], self.vals[lo:hi]

    def __repr__(self) -> str:
        return f"SparseCSR(shape={self.shape}, nnz={self.nnz})"
