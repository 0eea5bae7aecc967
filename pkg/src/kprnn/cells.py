"""RNN, LSTM, GRU and FastRNN cells over an abstract weight operator.

Each cell owns a single operator acting on the concatenated input
``[x_t; h_{t-1}]``; gated families stack their gate matrices row-wise
(LSTM gate order ``i, f, g, o``; GRU order ``r, z, candidate``).
Inputs are column vectors ``(n,)`` or column batches ``(n, batch)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .kron import plan_factor_shapes
from .operators import (DenseOperator, KronOperator, LinearOperator, LowRankOperator,
                        SparseOperator, StackedOperator)

__all__ = [
    "FAMILIES",
    "OPERATOR_KINDS",
    "CellSpec",
    "CellState",
    "Cell",
    "build_cell",
    "dense_parameter_count",
    "rnn_step",
    "lstm_step",
    "gru_step",
    "fastrnn_step",
    "sequence_forward",
    "bidirectional_forward",
    "cell_backward",
]

FAMILIES = ("rnn", "lstm", "gru", "fastrnn")
OPERATOR_KINDS = ("dense", "kron", "lowrank", "sparse")
GATES = {"rnn": 1, "lstm": 4, "gru": 3, "fastrnn": 1}

# FastRNN residual scalars start near alpha ~ 0.05, beta ~ 0.95
FASTRNN_ALPHA_INIT = -3.0
FASTRNN_BETA_INIT = 3.0
FORGET_BIAS_INIT = 1.0


@dataclass(frozen=True)
class CellSpec:
    """Architecture of one recurrent cell.

    ``rank`` and ``sparsity`` default to values matching the parameter count
    of the Kronecker plan for the same matrix, so ``lowrank`` and ``sparse``
    cells are budget-matched to ``kron`` unless told otherwise.
    """

    family: str
    input_size: int
    hidden_size: int
    operator: str = "dense"
    bias: bool = True
    rank: int | None = None
    sparsity: float | None = None
    per_gate: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown cell family {self.family!r}")
        if self.operator not in OPERATOR_KINDS:
            raise ValueError(f"unknown operator kind {self.operator!r}")
        if self.input_size < 1 or self.hidden_size < 1:
            raise ValueError("input_size and hidden_size must be positive")
        planned = (self.operator == "kron" or (self.operator == "lowrank" and self.rank is None)
                   or (self.operator == "sparse" and self.sparsity is None))
        if planned and min(min(b) for b in self.block_shapes()) < 2:
            raise ValueError(f"{self.operator} operator needs a Kronecker plan, "
                             "which requires every block dimension >= 2")

    @property
    def gates(self) -> int:
        return GATES[self.family]

    @property
    def operator_shape(self) -> tuple[int, int]:
        return self.gates * self.hidden_size, self.input_size + self.hidden_size

    def block_shapes(self) -> list[tuple[int, int]]:
        m, k = self.hidden_size, self.input_size + self.hidden_size
        if self.per_gate:
            return [(m, k)] * self.gates
        return [self.operator_shape]

    def kron_cost(self) -> int:
        return sum(plan_factor_shapes(r, c).cost for r, c in self.block_shapes())

    def effective_rank(self, rows: int, cols: int) -> int:
        if self.rank is not None:
            return self.rank
        budget = plan_factor_shapes(rows, cols).cost
        return max(1, budget // (rows + cols))

    def effective_sparsity(self, rows: int, cols: int) -> float:
        if self.sparsity is not None:
            return self.sparsity
        return 1.0 - plan_factor_shapes(rows, cols).cost / (rows * cols)

    def as_dict(self) -> dict:
        return {"family": self.family, "input_size": self.input_size,
                "hidden_size": self.hidden_size, "operator": self.operator, "bias": self.bias,
                "rank": self.rank, "sparsity": self.sparsity, "per_gate": self.per_gate}


@dataclass
class CellState:
    h: np.ndarray
    c: np.ndarray | None = None


def dense_parameter_count(spec: CellSpec) -> int:
    rows, cols = spec.operator_shape
    count = rows * cols + (rows if spec.bias else 0)
    return count + (2 if spec.family == "fastrnn" else 0)


def _glorot(rows, cols):
    return math.sqrt(6.0 / (rows + cols))


def _build_block(spec: CellSpec, rows: int, cols: int, rng: np.random.Generator) -> LinearOperator:
    limit = _glorot(rows, cols)
    kind = spec.operator
    if kind == "dense":
        return DenseOperator(rng.uniform(-limit, limit, (rows, cols)))
    if kind == "kron":
        plan = plan_factor_shapes(rows, cols)
        # product of two uniforms matches the dense Glorot variance limit**2 / 3
        a = math.sqrt(3.0 * limit / math.sqrt(3.0))
        return KronOperator(rng.uniform(-a, a, plan.shape1), rng.uniform(-a, a, plan.shape2))
    if kind == "lowrank":
        r = spec.effective_rank(rows, cols)
        a = math.sqrt(3.0 * limit / math.sqrt(3.0 * r))
        return LowRankOperator(rng.uniform(-a, a, (rows, r)), rng.uniform(-a, a, (r, cols)))
    from .baselines import prune_mask

    W = rng.uniform(-limit, limit, (rows, cols))
    return SparseOperator.from_dense(W, prune_mask(W, spec.effective_sparsity(rows, cols)))


class Cell:
    def __init__(self, spec: CellSpec, op: LinearOperator, bias=None, alpha=None, beta=None):
        if tuple(op.shape) != spec.operator_shape:
            raise ValueError(f"operator shape {op.shape} does not match {spec.operator_shape}")
        self.spec = spec
        self.op = op
        rows = spec.operator_shape[0]
        self.bias = None
        if spec.bias:
            self.bias = np.zeros(rows) if bias is None else np.array(bias, dtype=np.float64)
            if self.bias.shape != (rows,):
                raise ValueError(f"bias must have shape ({rows},)")
        if spec.family == "fastrnn":
            self.alpha = np.array([FASTRNN_ALPHA_INIT] if alpha is None else np.ravel(alpha), dtype=np.float64)
            self.beta = np.array([FASTRNN_BETA_INIT] if beta is None else np.ravel(beta), dtype=np.float64)

    @property
    def input_size(self) -> int:
        return self.spec.input_size

    @property
    def hidden_size(self) -> int:
        return self.spec.hidden_size

    def params(self) -> dict[str, np.ndarray]:
        out = {f"op.{k}": v for k, v in self.op.params().items()}
        if self.bias is not None:
            out["bias"] = self.bias
        if self.spec.family == "fastrnn":
            out["alpha"] = self.alpha
            out["beta"] = self.beta
        return out

    def parameter_count(self) -> int:
        extra = sum(v.size for k, v in self.params().items() if not k.startswith("op."))
        return self.op.parameter_count() + extra

    def initial_state(self, batch: int | None = None) -> CellState:
        shape = (self.hidden_size,) if batch is None else (self.hidden_size, batch)
        return CellState(np.zeros(shape), np.zeros(shape) if self.spec.family == "lstm" else None)

    def step(self, x, state: CellState) -> CellState:
        h, c, _ = _STEPS[self.spec.family][0](self, np.asarray(x, dtype=np.float64), state.h, state.c)
        return CellState(h, c)

    def with_operator(self, op: LinearOperator) -> "Cell":
        new = Cell(self.spec, op, None if self.bias is None else self.bias.copy())
        if self.spec.family == "fastrnn":
            new.alpha, new.beta = self.alpha.copy(), self.beta.copy()
        return new

    def dense_equivalent(self) -> "Cell":
        """Same cell with its operator replaced by the materialized dense matrix."""
        new = self.with_operator(DenseOperator(self.op.materialize()))
        new.spec = replace(self.spec, operator="dense", per_gate=False)
        return new


def build_cell(spec: CellSpec, rng: np.random.Generator | int | None = None) -> Cell:
    rng = np.random.default_rng(rng)
    cols = spec.operator_shape[1]
    blocks = [_build_block(spec, r, c, rng) for r, c in spec.block_shapes()]
    op = blocks[0] if len(blocks) == 1 else StackedOperator(blocks)
    m = spec.hidden_size
    bias = None
    if spec.bias:
        bias = np.zeros(spec.operator_shape[0])
        if spec.family == "lstm":
            bias[m:2 * m] = FORGET_BIAS_INIT
    assert op.shape == (spec.operator_shape[0], cols)
    return Cell(spec, op, bias)


def _bias(cell: Cell, like: np.ndarray):
    if cell.bias is None:
        return 0.0
    return cell.bias if like.ndim == 1 else cell.bias[:, None]


def _dsigmoid(s):
    return s * (1.0 - s)


# forward steps return (h, c, cache); backward steps take (cache, g_h, g_c, grads)
# and return (g_h_prev, g_c_prev, g_x), accumulating parameter gradients in `grads`.

def _acc(grads: dict, name: str, g) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def _acc_op(grads, op_grads):
    for k, v in op_grads.items():
        _acc(grads, f"op.{k}", v)


def _acc_bias(cell, grads, dz):
    if cell.bias is not None:
        _acc(grads, "bias", dz if dz.ndim == 1 else dz.sum(axis=1))


def _rnn_fwd(cell, x, h, c):
    xh = np.concatenate([x, h])
    h_new = np.tanh(cell.op.apply(xh) + _bias(cell, x))
    return h_new, None, (xh, h_new)


def _rnn_bwd(cell, cache, g_h, g_c, grads):
    xh, h_new = cache
    dz = g_h * (1.0 - h_new ** 2)
    _acc_bias(cell, grads, dz)
    og, g_xh = cell.op.backward(xh, dz)
    _acc_op(grads, og)
    n = cell.input_size
    return g_xh[n:], None, g_xh[:n]


def _lstm_fwd(cell, x, h, c):
    m = cell.hidden_size
    xh = np.concatenate([x, h])
    z = cell.op.apply(xh) + _bias(cell, x)
    i = expit(z[:m])
    f = expit(z[m:2 * m])
    g = np.tanh(z[2 * m:3 * m])
    o = expit(z[3 * m:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (xh, c, i, f, g, o, tc)


def _lstm_bwd(cell, cache, g_h, g_c, grads):
    xh, c, i, f, g, o, tc = cache
    g_c = g_h * o * (1.0 - tc ** 2) + (0.0 if g_c is None else g_c)
    dz = np.concatenate([g_c * g * _dsigmoid(i),
                         g_c * c * _dsigmoid(f),
                         g_c * i * (1.0 - g ** 2),
                         g_h * tc * _dsigmoid(o)])
    _acc_bias(cell, grads, dz)
    og, g_xh = cell.op.backward(xh, dz)
    _acc_op(grads, og)
    n = cell.input_size
    return g_xh[n:], g_c * f, g_xh[:n]


def _gru_fwd(cell, x, h, c):
    m = cell.hidden_size
    b = _bias(cell, x)
    xh = np.concatenate([x, h])
    z1 = cell.op.apply(xh) + b
    r = expit(z1[:m])
    u = expit(z1[m:2 * m])
    # candidate reads the reset-scaled state through its own row block
    xrh = np.concatenate([x, r * h])
    z2 = cell.op.apply(xrh) + b
    cand = np.tanh(z2[2 * m:])
    h_new = u * h + (1.0 - u) * cand
    return h_new, None, (xh, xrh, h, r, u, cand)


def _gru_bwd(cell, cache, g_h, g_c, grads):
    xh, xrh, h, r, u, cand = cache
    m, n = cell.hidden_size, cell.input_size
    zeros = np.zeros_like(g_h)
    d_u = g_h * (h - cand) * _dsigmoid(u)
    d_cand = g_h * (1.0 - u) * (1.0 - cand ** 2)
    og2, g_xrh = cell.op.backward(xrh, np.concatenate([zeros, zeros, d_cand]))
    g_rh = g_xrh[n:]
    d_r = g_rh * h * _dsigmoid(r)
    dz1 = np.concatenate([d_r, d_u, zeros])
    og1, g_xh = cell.op.backward(xh, dz1)
    _acc_op(grads, og1)
    _acc_op(grads, og2)
    _acc_bias(cell, grads, np.concatenate([d_r, d_u, d_cand]))
    g_h_prev = g_h * u + g_rh * r + g_xh[n:]
    return g_h_prev, None, g_xh[:n] + g_xrh[:n]


def _fastrnn_fwd(cell, x, h, c):
    xh = np.concatenate([x, h])
    cand = np.tanh(cell.op.apply(xh) + _bias(cell, x))
    a, b = expit(cell.alpha[0]), expit(cell.beta[0])
    return a * cand + b * h, None, (xh, h, cand, a, b)


def _fastrnn_bwd(cell, cache, g_h, g_c, grads):
    xh, h, cand, a, b = cache
    _acc(grads, "alpha", np.array([np.sum(g_h * cand) * a * (1.0 - a)]))
    _acc(grads, "beta", np.array([np.sum(g_h * h) * b * (1.0 - b)]))
    dz = g_h * a * (1.0 - cand ** 2)
    _acc_bias(cell, grads, dz)
    og, g_xh = cell.op.backward(xh, dz)
    _acc_op(grads, og)
    n = cell.input_size
    return g_xh[n:] + g_h * b, None, g_xh[:n]


_STEPS = {
    "rnn": (_rnn_fwd, _rnn_bwd),
    "lstm": (_lstm_fwd, _lstm_bwd),
    "gru": (_gru_fwd, _gru_bwd),
    "fastrnn": (_fastrnn_fwd, _fastrnn_bwd),
}


def _require(cell: Cell, family: str):
    if cell.spec.family != family:
        raise ValueError(f"expected a {family} cell, got {cell.spec.family}")


def rnn_step(cell: Cell, x, h) -> np.ndarray:
    """``h' = tanh(W [x; h] + b)``."""
    _require(cell, "rnn")
    return _rnn_fwd(cell, np.asarray(x, float), np.asarray(h, float), None)[0]


def lstm_step(cell: Cell, x, state: CellState) -> CellState:
    _require(cell, "lstm")
    h, c, _ = _lstm_fwd(cell, np.asarray(x, float), state.h, state.c)
    return CellState(h, c)


def gru_step(cell: Cell, x, h) -> np.ndarray:
    _require(cell, "gru")
    return _gru_fwd(cell, np.asarray(x, float), np.asarray(h, float), None)[0]


def fastrnn_step(cell: Cell, x, h) -> np.ndarray:
    """``h' = sigmoid(alpha) * tanh(W [x; h] + b) + sigmoid(beta) * h``."""
    _require(cell, "fastrnn")
    return _fastrnn_fwd(cell, np.asarray(x, float), np.asarray(h, float), None)[0]


def sequence_forward(cell: Cell, xs, state: CellState | None = None, return_cache: bool = False):
    """Run ``cell`` over ``xs`` of shape ``(T, n)`` or ``(T, n, batch)``.

    Returns ``(final_state, hs)`` with ``hs`` stacked over time, plus the
    per-step caches needed by :func:`cell_backward` when ``return_cache``.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim not in (2, 3) or xs.shape[0] == 0:
        raise ValueError("sequence_forward needs a non-empty sequence")
    if xs.shape[1] != cell.input_size:
        raise ValueError(f"inputs have {xs.shape[1]} features, cell expects {cell.input_size}")
    fwd = _STEPS[cell.spec.family][0]
    if state is None:
        state = cell.initial_state(None if xs.ndim == 2 else xs.shape[2])
    h, c = state.h, state.c
    hs, caches = [], []
    for x in xs:
        h, c, cache = fwd(cell, x, h, c)
        hs.append(h)
        caches.append(cache)
    out = (CellState(h, c), np.stack(hs))
    return out + (caches,) if return_cache else out


def bidirectional_forward(fwd_cell: Cell, bwd_cell: Cell, xs) -> np.ndarray:
    """Per-step ``[h_fwd_t; h_bwd_t]``, the backward cell reading ``xs`` reversed."""
    if (fwd_cell.input_size, fwd_cell.hidden_size) != (bwd_cell.input_size, bwd_cell.hidden_size):
        raise ValueError("forward and backward cells must share input and hidden sizes")
    xs = np.asarray(xs, dtype=np.float64)
    _, hf = sequence_forward(fwd_cell, xs)
    _, hb = sequence_forward(bwd_cell, xs[::-1])
    return np.concatenate([hf, hb[::-1]], axis=1)


def cell_backward(cell: Cell, caches, g_hs, g_final_c=None):
    """Backpropagation through time over cached steps.

    ``g_hs`` holds the loss gradient w.r.t. each step's hidden output, shape
    like the ``hs`` returned by :func:`sequence_forward`.  Returns
    ``(grads, g_xs)``; gradients are unclipped.
    """
    if not caches:
        raise ValueError("no forward cache: run sequence_forward(..., return_cache=True) first")
    bwd = _STEPS[cell.spec.family][1]
    g_hs = np.asarray(g_hs, dtype=np.float64)
    if len(g_hs) != len(caches):
        raise ValueError("g_hs must have one entry per cached step")
    grads: dict[str, np.ndarray] = {}
    g_h = np.zeros_like(g_hs[0])
    g_c = g_final_c
    g_xs = []
    for t in range(len(caches) - 1, -1, -1):
        g_h, g_c, g_x = bwd(cell, caches[t], g_h + g_hs[t], g_c, grads)
        g_xs.append(g_x)
    for name, p in cell.params().items():
        grads.setdefault(name, np.zeros_like(p))
    return grads, np.stack(g_xs[::-1])
