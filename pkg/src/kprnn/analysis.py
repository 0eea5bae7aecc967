"""Spectral diagnostics of realized weight matrices."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .operators import KronOperator, LinearOperator

__all__ = ["SpectralReport", "svd_metrics", "analyze_operator", "amplification_bound_check",
           "AmplificationResult"]

EPS = np.finfo(np.float64).eps
MAX_ANALYZED_SIZE = 4096 * 4096


@dataclass
class SpectralReport:
    shape: tuple[int, int]
    numerical_rank: int
    condition_number: float | None
    sigma_max: float
    sigma_min_nonzero: float | None
    tolerance: float
    full_rank: bool
    flags: list[str] = field(default_factory=list)
    factors: list["SpectralReport"] = field(default_factory=list)
    identity_errors: dict[str, float] = field(default_factory=dict)
    label: str = ""

    def as_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def svd_metrics(W, label: str = "") -> SpectralReport:
    """Rank, condition number and extreme singular values of ``W``.

    Numerical rank counts singular values above ``eps * sigma_max * max(m, n)``.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("svd_metrics expects a matrix")
    if not np.all(np.isfinite(W)):
        raise ValueError("matrix has non-finite entries")
    s = np.linalg.svd(W, compute_uv=False)
    smax = float(s[0]) if s.size else 0.0
    tol = EPS * smax * max(W.shape)
    kept = s[s > tol]
    rank = int(kept.size)
    if rank == 0:
        return SpectralReport(W.shape, 0, None, 0.0, None, tol, False, ["zero-matrix"], label=label)
    smin = float(kept[-1])
    return SpectralReport(W.shape, rank, smax / smin, smax, smin, tol, rank == min(W.shape), label=label)


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def analyze_operator(op: LinearOperator, label: str = "") -> SpectralReport:
    """Materialize ``op`` and report its spectrum.

    Kronecker operators also carry per-factor reports and the relative error
    of the multiplicative identities ``rank(A) = rank(B) rank(C)``,
    ``sigma_max(A) = sigma_max(B) sigma_max(C)`` and ``cond(A) = cond(B) cond(C)``.
    """
    rows, cols = op.shape
    if rows * cols > MAX_ANALYZED_SIZE:
        raise ValueError(f"operator {rows}x{cols} too large to materialize for analysis")
    report = svd_metrics(op.materialize(), label)
    if isinstance(op, KronOperator):
        rb = svd_metrics(op.B, f"{label}.B" if label else "B")
        rc = svd_metrics(op.C, f"{label}.C" if label else "C")
        report.factors = [rb, rc]
        report.identity_errors["rank"] = float(abs(report.numerical_rank - rb.numerical_rank * rc.numerical_rank))
        report.identity_errors["sigma_max"] = _rel(report.sigma_max, rb.sigma_max * rc.sigma_max)
        if None not in (report.condition_number, rb.condition_number, rc.condition_number):
            report.identity_errors["condition_number"] = _rel(
                report.condition_number, rb.condition_number * rc.condition_number)
        if any(e > 1e-8 for e in report.identity_errors.values()):
            report.flags.append("kron-identity-mismatch")
        if not (rb.full_rank and rc.full_rank):
            report.flags.append("rank-deficient-factor")
    return report


@dataclass
class AmplificationResult:
    observed_max: float
    sigma_max: float
    trials: int

    @property
    def gap(self) -> float:
        return self.sigma_max - self.observed_max

    @property
    def holds(self) -> bool:
        return self.observed_max <= self.sigma_max * (1 + 1e-10)


def amplification_bound_check(op, trials: int = 100, seed: int = 0, xs=None) -> AmplificationResult:
    """Largest ``||op x||_2`` over random unit vectors (or the supplied ``xs`` rows)."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if not isinstance(op, LinearOperator):
        from .operators import DenseOperator
        op = DenseOperator(op)
    rng = np.random.default_rng(seed)
    n = op.shape[1]
    if xs is None:
        xs = rng.standard_normal((trials, n))
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    xs = xs / np.linalg.norm(xs, axis=1, keepdims=True)
    observed = max(float(np.linalg.norm(op.apply(x))) for x in xs)
    smax = svd_metrics(op.materialize()).sigma_max
    return AmplificationResult(observed, smax, len(xs))
