"""Weight operators consumed by the recurrent cells.

Every operator maps column vectors (optionally with a trailing batch axis)
and exposes the same small surface: ``apply``, ``backward``, ``materialize``,
``params`` and ``parameter_count``.  ``params`` returns the live arrays; the
optimizer updates them in place.
"""

from __future__ import annotations

import numpy as np

from .baselines import LowRankPair, SparseCSR
from .kron import KroneckerPair, KronShapeError, kp_expand, kp_matvec, kp_matvec_grad

__all__ = [
    "LinearOperator",
    "DenseOperator",
    "KronOperator",
    "LowRankOperator",
    "SparseOperator",
    "StackedOperator",
    "operator_from_state",
]


class LinearOperator:
    kind: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        raise NotImplementedError

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x: np.ndarray, g_y: np.ndarray) -> tuple[dict, np.ndarray]:
        """Return ``(parameter gradients, input gradient)`` for upstream ``g_y``."""
        raise NotImplementedError

    def materialize(self) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params().values())

    # serialization: (metadata, arrays) where arrays include structural data
    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        return {"kind": self.kind, "shape": list(self.shape)}, dict(self.params())

    def _check(self, x: np.ndarray) -> None:
        if x.shape[0] != self.shape[1]:
            raise KronShapeError(f"{self.kind} operator expects {self.shape[1]} inputs, got {x.shape[0]}")

    def __call__(self, x):
        return self.apply(x)


class DenseOperator(LinearOperator):
    """Plain matrix. An optional keep-mask pins masked entries at zero during training."""

    kind = "dense"

    def __init__(self, W, mask=None):
        self.W = np.array(W, dtype=np.float64)
        if self.W.ndim != 2:
            raise KronShapeError("dense weight must be 2-D")
        self.mask = None
        if mask is not None:
            self.set_mask(mask)

    def set_mask(self, mask) -> None:
        self.mask = np.asarray(mask, dtype=bool)
        self.W[~self.mask] = 0.0

    @property
    def shape(self):
        return self.W.shape

    def apply(self, x):
        self._check(x)
        return self.W @ x

    def backward(self, x, g_y):
        g_W = g_y @ x.T if x.ndim == 2 else np.outer(g_y, x)
        if self.mask is not None:
            g_W = g_W * self.mask
        return {"W": g_W}, self.W.T @ g_y

    def materialize(self):
        return self.W.copy()

    def params(self):
        return {"W": self.W}

    def parameter_count(self):
        return int(self.W.size if self.mask is None else self.mask.sum())


class KronOperator(LinearOperator):
    kind = "kron"

    def __init__(self, B, C):
        self.pair = KroneckerPair(np.array(B, dtype=np.float64), np.array(C, dtype=np.float64))

    @property
    def B(self):
        return self.pair.B

    @property
    def C(self):
        return self.pair.C

    @property
    def shape(self):
        return self.pair.shape

    def apply(self, x):
        self._check(x)
        return kp_matvec(self.pair, x)

    def backward(self, x, g_y):
        g_B, g_C, g_x = kp_matvec_grad(self.pair, x, g_y)
        return {"B": g_B, "C": g_C}, g_x

    def materialize(self):
        return kp_expand(self.pair)

    def params(self):
        return {"B": self.pair.B, "C": self.pair.C}


class LowRankOperator(LinearOperator):
    kind = "lowrank"

    def __init__(self, U, V=None):
        self.pair = U if isinstance(U, LowRankPair) else LowRankPair(U, V)

    @property
    def shape(self):
        return self.pair.shape

    def apply(self, x):
        self._check(x)
        return self.pair.U @ (self.pair.V @ x)

    def backward(self, x, g_y):
        U, V = self.pair.U, self.pair.V
        Vx = V @ x
        Utg = U.T @ g_y
        if x.ndim == 1:
            return {"U": np.outer(g_y, Vx), "V": np.outer(Utg, x)}, V.T @ Utg
        return {"U": g_y @ Vx.T, "V": Utg @ x.T}, V.T @ Utg

    def materialize(self):
        return self.pair.U @ self.pair.V

    def params(self):
        return {"U": self.pair.U, "V": self.pair.V}


class SparseOperator(LinearOperator):
    """CSR matrix; only the stored values are trainable."""

    kind = "sparse"

    def __init__(self, csr: SparseCSR):
        self.csr = csr

    @classmethod
    def from_dense(cls, W, keep=None) -> "SparseOperator":
        return cls(SparseCSR.from_dense(W, keep))

    @property
    def shape(self):
        return self.csr.shape

    def apply(self, x):
        self._check(x)
        return self.csr.matvec(x)

    def backward(self, x, g_y):
        rows, cols = self.csr._row_ids, self.csr.col_indices
        if x.ndim == 1:
            g_v = g_y[rows] * x[cols]
        else:
            g_v = np.einsum("kb,kb->k", g_y[rows], x[cols])
        return {"values": g_v}, self.csr.rmatvec(g_y)

    def materialize(self):
        return self.csr.to_dense()

    def params(self):
        return {"values": self.csr.values}

    def state(self):
        meta = {"kind": self.kind, "shape": list(self.shape)}
        return meta, {"values": self.csr.values,
                      "row_offsets": self.csr.row_offsets.astype(np.float64),
                      "col_indices": self.csr.col_indices.astype(np.float64)}


class StackedOperator(LinearOperator):
    """Row-wise stack of operators sharing one input (per-gate compression)."""

    kind = "stacked"

    def __init__(self, blocks):
        self.blocks = list(blocks)
        cols = {b.shape[1] for b in self.blocks}
        if len(cols) != 1:
            raise KronShapeError("stacked blocks must share their column count")
        self._rows = [b.shape[0] for b in self.blocks]

    @property
    def shape(self):
        return sum(self._rows), self.blocks[0].shape[1]

    def apply(self, x):
        self._check(x)
        return np.concatenate([b.apply(x) for b in self.blocks], axis=0)

    def backward(self, x, g_y):
        grads, g_x = {}, 0.0
        for i, (b, g) in enumerate(zip(self.blocks, np.split(g_y, np.cumsum(self._rows)[:-1]))):
            gb, gx = b.backward(x, g)
            grads.update({f"{i}.{k}": v for k, v in gb.items()})
            g_x = g_x + gx
        return grads, g_x

    def materialize(self):
        return np.vstack([b.materialize() for b in self.blocks])

    def params(self):
        return {f"{i}.{k}": v for i, b in enumerate(self.blocks) for k, v in b.params().items()}

    def parameter_count(self):
        return sum(b.parameter_count() for b in self.blocks)

    def state(self):
        metas, arrays = [], {}
        for i, b in enumerate(self.blocks):
            meta, arr = b.state()
            metas.append(meta)
            arrays.update({f"{i}.{k}": v for k, v in arr.items()})
        return {"kind": self.kind, "shape": list(self.shape), "blocks": metas}, arrays


def operator_from_state(meta: dict, arrays: dict[str, np.ndarray]) -> LinearOperator:
    kind = meta["kind"]
    if kind == "dense":
        op = DenseOperator(arrays["W"])
        if "mask" in meta:
            op.set_mask(np.asarray(meta["mask"], dtype=bool))
        return op
    if kind == "kron":
        return KronOperator(arrays["B"], arrays["C"])
    if kind == "lowrank":
        return LowRankOperator(arrays["U"], arrays["V"])
    if kind == "sparse":
        rows, cols = meta["shape"]
        return SparseOperator(SparseCSR(rows, cols, arrays["row_offsets"].astype(np.int64),
                                        arrays["col_indices"].astype(np.int64), arrays["values"]))
    if kind == "stacked":
        blocks = []
        for i, bm in enumerate(meta["blocks"]):
            prefix = f"{i}."
            blocks.append(operator_from_state(
                bm, {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}))
        return StackedOperator(blocks)
    raise ValueError(f"unknown operator kind {kind!r}")
