"""
Multiplying by a Kronecker product without forming it
=====================================================

With column-stacked vectors, (B (x) C) vec(X) = vec(C X B^T).  Two small
matrix products replace one large one.
"""

import time

import numpy as np

from kprnn import KroneckerPair, kp_matvec, kp_matvec_chain, plan_factor_shapes

rng = np.random.default_rng(0)

plan = plan_factor_shapes(1024, 512)
B = rng.standard_normal(plan.shape1)
C = rng.standard_normal(plan.shape2)
x = rng.standard_normal(512)

W = np.kron(B, C)
y_dense = W @ x
y_kron = kp_matvec(KroneckerPair(B, C), x)
print("factor shapes", plan.shape1, plan.shape2)
print("max abs difference:", np.max(np.abs(y_dense - y_kron)))

# Rough timing.  The benchmark harness in kprnn.bench does this properly.
def clock(f, reps=200):
    t0 = time.perf_counter()
    for _ in range(reps):
        f()
    return (time.perf_counter() - t0) / reps * 1e6

print(f"dense {clock(lambda: W @ x):.1f} us   kron {clock(lambda: kp_matvec((B, C), x)):.1f} us")

# Splitting further into many 2x2 factors saves more memory
# but adds a pass per factor, so it gets slower.
factors = [rng.standard_normal((2, 2)) for _ in range(8)]
full = factors[0]
for f in factors[1:]:
    full = np.kron(full, f)
v = rng.standard_normal(256)
print("chain of 8 agrees:", np.allclose(full @ v, kp_matvec_chain(factors, v)))
print(f"dense 256x256 {clock(lambda: full @ v):.1f} us   "
      f"2x2 chain {clock(lambda: kp_matvec_chain(factors, v)):.1f} us")
