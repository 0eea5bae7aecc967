"""Microbenchmarks of matvec kernels and single cell steps.

Timings are reported relative to the dense kernel of the same shape; the
statistic is the median over repetitions with the median absolute deviation
as its spread.  Variants compared against each other are timed in
interleaved rounds so that slow drifts of the host hit all of them alike.
"""

from __future__ import annotations

import json
import math
import os
import platform
import statistics
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .baselines import magnitude_prune
from .cells import CellSpec, build_cell
from .kron import KroneckerPair, kp_matvec, kp_matvec_chain, plan_factor_shapes

__all__ = [
    "BenchResult",
    "time_kernel",
    "time_kernels",
    "matvec_suite",
    "chain_suite",
    "cell_step_suite",
    "aa_test",
    "format_table",
    "write_jsonl",
    "environment_metadata",
    "BENCHMARK_PRESETS",
]

MIN_WARMUP = 5
MIN_REPS = 30
TIMER_RESOLUTION_NS = time.get_clock_info("perf_counter").resolution * 1e9


@lru_cache(maxsize=None)
def timer_floor_ns() -> float:
    """Smallest interval the clock can usefully measure: max(resolution, call overhead)."""
    deltas = []
    for _ in range(201):
        t0 = time.perf_counter_ns()
        deltas.append(time.perf_counter_ns() - t0)
    return max(TIMER_RESOLUTION_NS, float(statistics.median(deltas)), 1.0)

# Desk-scale cells of the benchmark families (input size, hidden size are ours).
BENCHMARK_PRESETS = {
    "mnist-lstm": CellSpec("lstm", 28, 128),
    "usps-fastrnn": CellSpec("fastrnn", 16, 32),
    "kws-lstm": CellSpec("lstm", 40, 256),
    "har1-bilstm": CellSpec("lstm", 64, 128),
}


@dataclass
class BenchResult:
    label: str
    config: dict
    warmup: int
    repetitions: int
    number: int
    samples_ns: list[float]
    median_ns: float
    mad_ns: float
    checksum: float
    reference_checksum: float | None = None
    flags: list[str] = field(default_factory=list)
    environment: dict = field(default_factory=dict)

    @property
    def checksum_ok(self) -> bool:
        if self.reference_checksum is None:
            return True
        rtol = self.config.get("rtol", 1e-9)
        return math.isclose(self.checksum, self.reference_checksum, rel_tol=rtol,
                            abs_tol=rtol * self.config.get("abs_scale", 1.0))

    def as_dict(self, samples: bool = False) -> dict:
        d = asdict(self)
        if not samples:
            d.pop("samples_ns")
        d["checksum_ok"] = self.checksum_ok
        return d


def environment_metadata() -> dict:
    from threadpoolctl import threadpool_info

    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "processor": platform.processor(),
        "cpu_count": os.cpu_count(),
        "blas": [{k: i.get(k) for k in ("internal_api", "num_threads", "version")}
                 for i in threadpool_info()],
        "timer_resolution_ns": TIMER_RESOLUTION_NS,
        "timer_floor_ns": timer_floor_ns(),
    }


@contextmanager
def single_threaded():
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _checksum(y) -> float:
    return float(np.sum(np.asarray(y, dtype=np.float64)))


def _calibrate(kernel, arg) -> int:
    """Calls per repetition so one repetition spans >= 100 timer floors."""
    t0 = time.perf_counter_ns()
    kernel(arg)
    once = max(time.perf_counter_ns() - t0, 1)
    floor = 100 * timer_floor_ns()
    return 1 if once >= floor else math.ceil(floor / once)


def _mad(samples) -> float:
    med = statistics.median(samples)
    return statistics.median(abs(s - med) for s in samples)


def time_kernels(kernels: dict, warmup: int = MIN_WARMUP, reps: int = MIN_REPS,
                 configs: dict | None = None, references: dict | None = None) -> dict[str, BenchResult]:
    """Time several ``label -> (kernel, argument)`` pairs in interleaved rounds.

    ``references`` optionally maps labels to the expected output checksum.
    """
    if reps < MIN_REPS or warmup < MIN_WARMUP:
        raise ValueError(f"need at least {MIN_WARMUP} warmups and {MIN_REPS} repetitions")
    configs = configs or {}
    references = references or {}
    env = environment_metadata()
    numbers = {}
    for label, (kernel, arg) in kernels.items():
        for _ in range(warmup):
            kernel(arg)
        numbers[label] = _calibrate(kernel, arg)
    samples = {label: [] for label in kernels}
    sinks = {label: 0.0 for label in kernels}
    for _ in range(reps):
        for label, (kernel, arg) in kernels.items():
            k = numbers[label]
            t0 = time.perf_counter_ns()
            for _ in range(k):
                y = kernel(arg)
            samples[label].append((time.perf_counter_ns() - t0) / k)
            sinks[label] = _checksum(y)
    out = {}
    for label, s in samples.items():
        med = statistics.median(s)
        flags = []
        if med < 10 * timer_floor_ns():
            flags.append("near-timer-floor")
        out[label] = BenchResult(label, configs.get(label, {}), warmup, reps, numbers[label], s,
                                 med, _mad(s), sinks[label], references.get(label), flags, env)
    return out


def time_kernel(kernel, make_input, warmup: int = MIN_WARMUP, reps: int = MIN_REPS,
                label: str = "kernel", config: dict | None = None,
                reference_checksum: float | None = None) -> BenchResult:
    """Time ``kernel(make_input())``; the input is generated once and reused."""
    arg = make_input() if callable(make_input) else make_input
    return time_kernels({label: (kernel, arg)}, warmup, reps, {label: config or {}},
                        {label: reference_checksum})[label]


def _chain_factors_2x2(m: int, n: int, rng) -> list | None:
    km, kn = int(math.log2(m)), int(math.log2(n))
    if 2 ** km != m or 2 ** kn != n:
        return None
    k = max(km, kn)
    return [rng.standard_normal((2 if i < km else 1, 2 if i < kn else 1)) for i in range(k)]


def _even_split_factors(size: int, count: int, rng) -> list:
    """``count`` square power-of-two factors whose Kronecker product is ``size x size``."""
    e = int(math.log2(size))
    if 2 ** e != size or not 2 <= count <= e:
        raise ValueError(f"cannot split {size} into {count} power-of-two factors")
    # smaller factors first: the right fold then widens through every extra factor
    exps = sorted(e // count + (1 if i < e % count else 0) for i in range(count))
    return [rng.standard_normal((2 ** x, 2 ** x)) for x in exps]


def _ratio_to(results: dict, base: str) -> None:
    for r in results.values():
        r.config["ratio_to_dense"] = r.median_ns / results[base].median_ns


def matvec_suite(sizes=((256, 256), (512, 512), (1024, 512), (1024, 1024)), reps: int = MIN_REPS,
                 warmup: int = MIN_WARMUP, seed: int = 0, dtype=np.float64,
                 variants=("dense", "kron", "chain", "sparse", "lowrank")) -> list[BenchResult]:
    """Dense vs two-factor Kronecker vs 2x2 chain vs budget-matched sparse and low-rank."""
    rng = np.random.default_rng(seed)
    results = []
    with single_threaded():
        for m, n in sizes:
            W = rng.standard_normal((m, n)).astype(dtype)
            x = rng.standard_normal(n).astype(dtype)
            kernels, configs, refs = {}, {}, {}
            base = {"shape": [m, n], "dtype": np.dtype(dtype).name, "abs_scale": float(m * n),
                    "rtol": 1e-9 if np.dtype(dtype) == np.float64 else 1e-4}
            kernels["dense"] = (lambda v, W=W: W @ v, x)
            configs["dense"] = dict(base, variant="dense", params=m * n)
            if m >= 2 and n >= 2:
                plan = plan_factor_shapes(m, n)
                pair = KroneckerPair(rng.standard_normal(plan.shape1).astype(dtype),
                                     rng.standard_normal(plan.shape2).astype(dtype))
                budget = plan.cost
                if "kron" in variants:
                    kernels["kron"] = (lambda v, p=pair: kp_matvec(p, v), x)
                    configs["kron"] = dict(base, variant="kron", params=budget,
                                           shape1=list(plan.shape1), shape2=list(plan.shape2))
                    refs["kron"] = _checksum(np.kron(pair.B, pair.C) @ x)
                factors = _chain_factors_2x2(m, n, rng)
                if "chain" in variants and factors is not None:
                    factors = [f.astype(dtype) for f in factors]
                    kernels["chain"] = (lambda v, f=factors: kp_matvec_chain(f, v), x)
                    configs["chain"] = dict(base, variant="chain", factors=len(factors),
                                            params=sum(f.size for f in factors))
                    full = factors[0]
                    for f in factors[1:]:
                        full = np.kron(full, f)
                    refs["chain"] = _checksum(full @ x)
                if "sparse" in variants:
                    csr = magnitude_prune(W, 1.0 - budget / (m * n))
                    kernels["sparse"] = (csr.matvec, x)
                    configs["sparse"] = dict(base, variant="sparse", params=csr.nnz,
                                             sparsity=1.0 - csr.nnz / (m * n))
                    refs["sparse"] = _checksum(csr.to_dense() @ x)
                if "lowrank" in variants:
                    r = max(1, budget // (m + n))
                    U = rng.standard_normal((m, r)).astype(dtype)
                    V = rng.standard_normal((r, n)).astype(dtype)
                    kernels["lowrank"] = (lambda v, U=U, V=V: U @ (V @ v), x)
                    configs["lowrank"] = dict(base, variant="lowrank", rank=r, params=r * (m + n))
                    refs["lowrank"] = _checksum((U @ V) @ x)
            refs["dense"] = _checksum(W @ x)
            res = time_kernels(kernels, warmup, reps, configs, refs)
            for label, r in res.items():
                r.label = f"{label}-{m}x{n}"
            _ratio_to(res, "dense")
            results.extend(res.values())
    return results


def chain_suite(size: int = 256, factor_counts=range(4, 9), reps: int = 200,
                warmup: int = MIN_WARMUP, seed: int = 0) -> list[BenchResult]:
    """Expand-then-multiply chains of ``k`` factors for a fixed ``size x size`` matrix."""
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((size, size))
    x = rng.standard_normal(size)
    kernels = {"dense": (lambda v: W @ v, x)}
    configs = {"dense": {"shape": [size, size], "variant": "dense", "factors": 1}}
    refs = {"dense": _checksum(W @ x)}
    for k in factor_counts:
        factors = _even_split_factors(size, k, rng)
        label = f"chain-{k}"
        kernels[label] = (lambda v, f=factors: kp_matvec_chain(f, v), x)
        configs[label] = {"shape": [size, size], "variant": "chain", "factors": k,
                          "factor_sizes": [f.shape[0] for f in factors], "abs_scale": float(size * size)}
        full = factors[0]
        for f in factors[1:]:
            full = np.kron(full, f)
        refs[label] = _checksum(full @ x)
    with single_threaded():
        res = time_kernels(kernels, warmup, reps, configs, refs)
    _ratio_to(res, "dense")
    return list(res.values())


def cell_step_suite(specs, operators=("dense", "kron", "lowrank", "sparse"), reps: int = MIN_REPS,
                    warmup: int = MIN_WARMUP, seed: int = 0) -> list[BenchResult]:
    """Latency of one batch-size-1 step per ``family x operator kind``.

    ``specs`` is a mapping ``name -> CellSpec`` (or a sequence of specs); sparse
    cells default to the sparsity matching the Kronecker parameter budget.
    """
    if not isinstance(specs, dict):
        specs = {f"{s.family}-{s.input_size}x{s.hidden_size}": s for s in specs}
    rng = np.random.default_rng(seed)
    results = []
    with single_threaded():
        for name, spec in specs.items():
            x = rng.standard_normal(spec.input_size)
            kernels, configs = {}, {}
            for kind in operators:
                cell = build_cell(CellSpec(spec.family, spec.input_size, spec.hidden_size, kind,
                                           spec.bias, spec.rank, spec.sparsity, spec.per_gate), rng)
                state = cell.initial_state()
                state.h = rng.standard_normal(spec.hidden_size) * 0.1
                kernels[kind] = (lambda v, c=cell, s=state: c.step(v, s).h, x)
                configs[kind] = {"cell": name, "family": spec.family, "operator": kind,
                                 "input_size": spec.input_size, "hidden_size": spec.hidden_size,
                                 "params": cell.parameter_count()}
            res = time_kernels(kernels, warmup, reps, configs)
            for kind, r in res.items():
                r.label = f"{name}/{kind}"
            if "dense" in res:
                _ratio_to(res, "dense")
            results.extend(res.values())
    return results


def aa_test(size: int = 256, reps: int = MIN_REPS, warmup: int = MIN_WARMUP, seed: int = 0) -> dict:
    """Time one dense kernel under two labels; the medians should agree within noise."""
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((size, size))
    x = rng.standard_normal(size)
    with single_threaded():
        res = time_kernels({"A": (lambda v: W @ v, x), "B": (lambda v: W @ v, x)}, warmup, reps)
    a, b = res["A"], res["B"]
    spread = max(a.mad_ns, b.mad_ns)
    return {"median_a_ns": a.median_ns, "median_b_ns": b.median_ns,
            "mad_ns": spread, "difference_ns": abs(a.median_ns - b.median_ns),
            "within_3_mad": abs(a.median_ns - b.median_ns) < 3 * spread}


def format_table(results: list[BenchResult]) -> str:
    rows = [("label", "median_us", "mad_us", "ratio", "reps", "checksum")]
    for r in results:
        ratio = r.config.get("ratio_to_dense")
        rows.append((r.label, f"{r.median_ns / 1e3:.3f}", f"{r.mad_ns / 1e3:.3f}",
                     "-" if ratio is None else f"{ratio:.3f}", str(r.repetitions),
                     "ok" if r.checksum_ok else "MISMATCH"))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in
                               enumerate(zip(row, widths))) for row in rows)


def write_jsonl(results: list[BenchResult], path, extra: dict | None = None) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(dict(r.as_dict(), **(extra or {})), sort_keys=True) + "\n")
