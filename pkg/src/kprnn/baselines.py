"""Comparison compressors: magnitude pruning, low-rank factorization and
width-scaled small baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

__all__ = [
    "SparseCSR",
    "LowRankPair",
    "PruneSchedule",
    "magnitude_prune",
    "prune_mask",
    "schedule_sparsity",
    "lowrank_for_budget",
    "small_baseline",
]


@dataclass(eq=False)
class SparseCSR:
    rows: int
    cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.row_offsets = np.asarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(self.col_indices, dtype=np.int64)
        self.values = np.asarray(self.values)
        if not np.issubdtype(self.values.dtype, np.floating):
            self.values = self.values.astype(np.float64)
        if self.row_offsets.shape != (self.rows + 1,) or self.row_offsets[0] != 0:
            raise ValueError("row_offsets must have rows+1 entries starting at 0")
        if np.any(np.diff(self.row_offsets) < 0):
            raise ValueError("row_offsets must be monotone")
        if self.row_offsets[-1] != self.values.size or self.col_indices.size != self.values.size:
            raise ValueError("nnz mismatch between offsets, indices and values")
        for r in range(self.rows):
            idx = self.col_indices[self.row_offsets[r]:self.row_offsets[r + 1]]
            if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.cols):
                raise ValueError(f"column indices of row {r} must be strictly ascending and < cols")
        # shares `values`, so in-place updates are visible to the product
        self._mat = sp.csr_matrix((self.values, self.col_indices, self.row_offsets),
                                  shape=(self.rows, self.cols), copy=False)
        self._row_ids = np.repeat(np.arange(self.rows), np.diff(self.row_offsets))

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @classmethod
    def from_dense(cls, W: np.ndarray, keep: np.ndarray | None = None) -> "SparseCSR":
        W = np.asarray(W)
        keep = W != 0 if keep is None else np.asarray(keep, dtype=bool)
        r, c = np.nonzero(keep)
        offsets = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=W.shape[0]))])
        return cls(W.shape[0], W.shape[1], offsets, c, W[r, c].copy())

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self._mat @ x

    def rmatvec(self, g: np.ndarray) -> np.ndarray:
        return self._mat.T @ g

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols), dtype=self.values.dtype)
        out[self._row_ids, self.col_indices] = self.values
        return out


@dataclass(eq=False)
class LowRankPair:
    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape[1] != self.V.shape[0]:
            raise ValueError(f"incompatible low-rank factors {self.U.shape} and {self.V.shape}")
        if self.rank < 1:
            raise ValueError("rank must be at least 1")

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[1]


@dataclass(frozen=True)
class PruneSchedule:
    start_step: int
    end_step: int
    final_sparsity: float
    interval: int = 1

    def __post_init__(self):
        if not self.start_step < self.end_step:
            raise ValueError("start_step must precede end_step")
        if not 0.0 < self.final_sparsity < 1.0:
            raise ValueError("final_sparsity must lie in (0, 1)")
        if self.interval < 1:
            raise ValueError("interval must be positive")

    def is_update_step(self, step: int) -> bool:
        return self.start_step <= step <= self.end_step and (
            (step - self.start_step) % self.interval == 0 or step == self.end_step)


def prune_mask(W: np.ndarray, sparsity: float) -> np.ndarray:
    """Boolean keep-mask dropping the ``floor(sparsity * size)`` smallest magnitudes.

    Ties are resolved in row-major index order (earlier entries go first).
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("sparsity must lie in [0, 1)")
    W = np.asarray(W)
    n_drop = math.floor(sparsity * W.size)
    order = np.argsort(np.abs(W).ravel(), kind="stable")
    keep = np.ones(W.size, dtype=bool)
    keep[order[:n_drop]] = False
    return keep.reshape(W.shape)


def magnitude_prune(W: np.ndarray, sparsity: float) -> SparseCSR:
    """Global magnitude pruning to a CSR matrix of the surviving entries."""
    return SparseCSR.from_dense(W, prune_mask(W, sparsity))


def schedule_sparsity(sched: PruneSchedule, step: int) -> float:
    """Cubic ramp ``s_f * (1 - (1 - t)**3)`` from ``start_step`` to ``end_step``."""
    if step < sched.start_step:
        return 0.0
    if step >= sched.end_step:
        return sched.final_sparsity
    t = (step - sched.start_step) / (sched.end_step - sched.start_step)
    return sched.final_sparsity * (1.0 - (1.0 - t) ** 3)


def lowrank_for_budget(m: int, n: int, param_budget: int) -> LowRankPair:
    """Largest-rank ``U (m x r) @ V (r x n)`` fitting ``param_budget``, zero-filled."""
    if param_budget < m + n:
        raise ValueError(f"budget {param_budget} below m + n = {m + n}: rank would be 0")
    r = int(param_budget) // (m + n)
    return LowRankPair(np.zeros((m, r)), np.zeros((r, n)))


def small_baseline(spec, param_budget: int):
    """Widest dense cell of the same family whose parameter count fits ``param_budget``."""
    from .cells import dense_parameter_count

    spec = replace(spec, operator="dense")
    if dense_parameter_count(spec) <= param_budget:
        return spec
    if dense_parameter_count(replace(spec, hidden_size=1)) > param_budget:
        raise ValueError(f"no hidden size fits a budget of {param_budget}")
    lo, hi = 1, spec.hidden_size
    # invariant: lo fits, hi does not
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if dense_parameter_count(replace(spec, hidden_size=mid)) <= param_budget:
            lo = mid
        else:
            hi = mid
    return replace(spec, hidden_size=lo)
