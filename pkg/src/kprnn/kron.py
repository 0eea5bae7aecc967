"""Kronecker-product algebra: expansion, expansion-free matvec, factor chains,
factor-shape planning and compression accounting.

All vectors use column-stacking (``vec``) so that
``vec(C @ X @ B.T) == kron(B, C) @ vec(X)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache, reduce
from typing import Sequence

import numpy as np

__all__ = [
    "KronShapeError",
    "KroneckerPair",
    "KroneckerChain",
    "ShapePlan",
    "kp_expand",
    "kp_expand_chain",
    "kp_matvec",
    "kp_matvec_grad",
    "kp_matvec_chain",
    "prime_factorize",
    "divisors",
    "plan_factor_shapes",
    "compression_ratio",
    "kp_flops",
]

_INDEX_MAX = np.iinfo(np.intp).max


class KronShapeError(ValueError):
    """Raised when factor or operand shapes are inconsistent."""


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    if a.ndim != 2 or a.size == 0:
        raise KronShapeError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class KroneckerPair:
    """``A = B (x) C`` held as its two factors, never materialized."""

    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "B", _as_matrix(self.B))
        object.__setattr__(self, "C", _as_matrix(self.C))

    @property
    def shape(self) -> tuple[int, int]:
        (m1, n1), (m2, n2) = self.B.shape, self.C.shape
        return m1 * m2, n1 * n2

    def expand(self) -> np.ndarray:
        return kp_expand(self)

    def matvec(self, x) -> np.ndarray:
        return kp_matvec(self, x)


@dataclass(frozen=True)
class KroneckerChain:
    factors: tuple

    def __post_init__(self):
        factors = tuple(_as_matrix(f) for f in self.factors)
        if len(factors) < 2:
            raise KronShapeError("a Kronecker chain needs at least two factors")
        object.__setattr__(self, "factors", factors)

    @property
    def shape(self) -> tuple[int, int]:
        return (math.prod(f.shape[0] for f in self.factors),
                math.prod(f.shape[1] for f in self.factors))


def _check_index_range(rows: int, cols: int) -> None:
    if rows > _INDEX_MAX or cols > _INDEX_MAX or rows * cols > _INDEX_MAX:
        raise KronShapeError(f"expanded shape {rows}x{cols} exceeds the platform index range")


def _kron2(B: np.ndarray, C: np.ndarray) -> np.ndarray:
    (m1, n1), (m2, n2) = B.shape, C.shape
    _check_index_range(m1 * m2, n1 * n2)
    # block (i1, j1) is B[i1, j1] * C
    blocks = B[:, None, :, None] * C[None, :, None, :]
    return blocks.reshape(m1 * m2, n1 * n2)


def kp_expand(pair: KroneckerPair | tuple) -> np.ndarray:
    """Materialize ``B (x) C`` with ``A[i1*m2 + i2, j1*n2 + j2] = B[i1, j1] * C[i2, j2]``."""
    if not isinstance(pair, KroneckerPair):
        pair = KroneckerPair(*pair)
    return _kron2(pair.B, pair.C)


def kp_expand_chain(chain: KroneckerChain | Sequence) -> np.ndarray:
    """Right fold of :func:`kp_expand`: ``W1 (x) (W2 (x) (... (x) Wk))``."""
    if not isinstance(chain, KroneckerChain):
        chain = KroneckerChain(tuple(chain))
    return reduce(lambda acc, f: _kron2(f, acc), reversed(chain.factors[:-1]), chain.factors[-1])


def _unvec(x: np.ndarray, rows: int, cols: int) -> np.ndarray:
    # column stacking: X[i, j] = x[j*rows + i]; trailing batch axis preserved
    return x.reshape((rows, cols) + x.shape[1:], order="F")


def _vec(Y: np.ndarray) -> np.ndarray:
    return Y.reshape((Y.shape[0] * Y.shape[1],) + Y.shape[2:], order="F")


def _pair_factors(pair) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pair, KroneckerPair):
        return pair.B, pair.C
    B, C = pair
    return _as_matrix(B), _as_matrix(C)


def kp_matvec(pair: KroneckerPair | tuple, x) -> np.ndarray:
    """Compute ``(B (x) C) @ x`` as ``vec(C @ unvec(x) @ B.T)`` without expansion.

    ``x`` may carry a trailing batch axis, shape ``(n,)`` or ``(n, batch)``.
    """
    B, C = _pair_factors(pair)
    (m1, n1), (m2, n2) = B.shape, C.shape
    x = np.asarray(x)
    if x.ndim not in (1, 2) or x.shape[0] != n1 * n2:
        raise KronShapeError(f"x has shape {x.shape}, expected leading dimension {n1 * n2}")
    if x.ndim == 1:
        X = _unvec(x, n2, n1)
        return _vec(C @ X @ B.T)
    X = _unvec(x, n2, n1)                     # (n2, n1, batch)
    XBt = np.einsum("jlb,il->jib", X, B)      # X @ B.T per column
    Y = np.einsum("kj,jib->kib", C, XBt)      # (m2, m1, batch)
    return _vec(Y)


def kp_matvec_grad(pair: KroneckerPair | tuple, x, g_y):
    """Reverse-mode companion of :func:`kp_matvec`.

    Returns ``(g_B, g_C, g_x)`` for upstream gradient ``g_y``; batched inputs
    have their factor gradients summed over the batch axis.
    """
    B, C = _pair_factors(pair)
    (m1, n1), (m2, n2) = B.shape, C.shape
    x, g_y = np.asarray(x), np.asarray(g_y)
    if x.shape[0] != n1 * n2 or g_y.shape[0] != m1 * m2 or x.shape[1:] != g_y.shape[1:]:
        raise KronShapeError(f"inconsistent shapes x={x.shape}, g_y={g_y.shape} for {m1*m2}x{n1*n2}")
    if x.ndim == 1:
        X = _unvec(x, n2, n1)
        G = _unvec(g_y, m2, m1)
        CtG = C.T @ G
        g_C = G @ (X @ B.T).T
        g_B = CtG.T @ X
        g_x = _vec(CtG @ B)
        return g_B, g_C, g_x
    X = _unvec(x, n2, n1)
    G = _unvec(g_y, m2, m1)
    XBt = np.einsum("jlb,il->jib", X, B)
    CtG = np.einsum("kj,kib->jib", C, G)
    g_C = np.einsum("kib,jib->kj", G, XBt)
    g_B = np.einsum("jib,jlb->il", CtG, X)
    g_x = _vec(np.einsum("jib,il->jlb", CtG, B))
    return g_B, g_C, g_x


def kp_matvec_chain(chain: KroneckerChain | Sequence, x) -> np.ndarray:
    """Multi-factor matvec by full expansion followed by a dense product.

    This is deliberately the slow path: every call rebuilds the whole matrix.
    """
    if not isinstance(chain, KroneckerChain):
        chain = KroneckerChain(tuple(chain))
    x = np.asarray(x)
    if x.shape[0] != chain.shape[1]:
        raise KronShapeError(f"x has length {x.shape[0]}, chain expects {chain.shape[1]}")
    return kp_expand_chain(chain) @ x


def prime_factorize(k: int) -> list[int]:
    """Ascending prime factors of ``k`` with multiplicity (trial division)."""
    k = int(k)
    if k < 1:
        raise ValueError("k must be a positive integer")
    out = []
    p = 2
    while p * p <= k:
        while k % p == 0:
            out.append(p)
            k //= p
        p += 1 if p == 2 else 2
    if k > 1:
        out.append(k)
    return out


@lru_cache(maxsize=8192)
def _divisors(k: int) -> tuple[int, ...]:
    small = [d for d in range(1, math.isqrt(k) + 1) if k % d == 0]
    return tuple(sorted(set(small + [k // d for d in small])))


def divisors(k: int) -> list[int]:
    return list(_divisors(int(k)))


@dataclass(frozen=True)
class ShapePlan:
    target_rows: int
    target_cols: int
    shape1: tuple[int, int]
    shape2: tuple[int, int]
    compression: Fraction
    degenerate: bool = False
    strategy: str = "exhaustive"

    @property
    def cost(self) -> int:
        return self.shape1[0] * self.shape1[1] + self.shape2[0] * self.shape2[1]

    def as_dict(self) -> dict:
        return {
            "target": [self.target_rows, self.target_cols],
            "shape1": list(self.shape1),
            "shape2": list(self.shape2),
            "cost": self.cost,
            "compression": round(float(self.compression), 2),
            "degenerate": self.degenerate,
            "strategy": self.strategy,
        }


def compression_ratio(m: int, n: int, shape1, shape2) -> Fraction:
    """Dense parameter count over factor parameter count, as an exact fraction."""
    (m1, n1), (m2, n2) = shape1, shape2
    if m1 * m2 != m or n1 * n2 != n:
        raise KronShapeError(f"factors {shape1} and {shape2} do not multiply to ({m}, {n})")
    return Fraction(m * n, m1 * n1 + m2 * n2)


def _plan_key(m1, n1, m2, n2):
    # cost, then balance of the two factor sizes, then squareness, then lexicographic
    return (m1 * n1 + m2 * n2, abs(m1 * n1 - m2 * n2), abs(m1 - n1) + abs(m2 - n2), (m1, n1, m2, n2))


def _exhaustive(m: int, n: int) -> tuple[int, int, int, int]:
    best_cost, best = m * n + 2, None
    dn = _divisors(n)
    for m1 in _divisors(m):
        m2 = m // m1
        for n1 in dn:
            cost = m1 * n1 + m2 * (n // n1)
            if cost <= best_cost:
                key = _plan_key(m1, n1, m2, n // n1)
                if best is None or key < best:
                    best_cost, best = cost, key
    return best[3]


def _reduce_list(lst: list[int]) -> list[int]:
    head = lst.pop(0)
    lst[0] *= head
    lst.sort()
    return lst


def _greedy_pair(k: int) -> list[int]:
    lst = prime_factorize(k)
    while len(lst) > 2:
        _reduce_list(lst)
    return ([1] * (2 - len(lst))) + lst


def plan_factor_shapes(m: int, n: int, strategy: str = "exhaustive") -> ShapePlan:
    """Choose factor shapes ``(m1, n1), (m2, n2)`` maximizing compression of an m x n matrix.

    ``strategy="exhaustive"`` searches all divisor pairs and is optimal.
    ``strategy="greedy"`` merges the two smallest prime factors until two remain
    and pairs the larger row factor with the smaller column factor.
    """
    m, n = int(m), int(n)
    if m < 2 or n < 2:
        raise ValueError("plan_factor_shapes requires m, n >= 2")
    if strategy == "exhaustive":
        m1, n1, m2, n2 = _exhaustive(m, n)
    elif strategy == "greedy":
        rows = sorted(_greedy_pair(m), reverse=True)
        cols = _greedy_pair(n)
        (m1, m2), (n1, n2) = rows, cols
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    degenerate = 1 in (m1, n1, m2, n2)
    if degenerate:
        warnings.warn(f"degenerate Kronecker plan for {m}x{n}: a factor has a unit dimension",
                      stacklevel=2)
    return ShapePlan(m, n, (m1, n1), (m2, n2), compression_ratio(m, n, (m1, n1), (m2, n2)),
                     degenerate, strategy)


def kp_flops(shape1, shape2) -> int:
    """Multiply-adds of one expansion-free matvec: ``C @ X`` then ``(C X) @ B.T``."""
    (m1, n1), (m2, n2) = shape1, shape2
    return m2 * n2 * n1 + m1 * n1 * m2
