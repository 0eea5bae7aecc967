"""
Planning Kronecker factor shapes
================================

A dense m x n weight is replaced by B (x) C with B of shape (m1, n1) and
C of shape (m2, n2), where m = m1*m2 and n = n1*n2.  Storage drops from
m*n to m1*n1 + m2*n2.  Which split is best depends only on the divisors
of m and n.
"""

import warnings

from kprnn import compression_ratio, plan_factor_shapes, prime_factorize

# A 154 x 164 matrix: 25256 parameters when dense.
m, n = 154, 164
print("prime factors:", prime_factorize(m), prime_factorize(n))

# The exhaustive planner tries every divisor pair and keeps the cheapest.
best = plan_factor_shapes(m, n)
print("exhaustive:", best.shape1, "(x)", best.shape2, f"{float(best.compression):.2f}x")

# The greedy planner only merges the two smallest primes until two remain.
greedy = plan_factor_shapes(m, n, strategy="greedy")
print("greedy:    ", greedy.shape1, "(x)", greedy.shape2, f"{float(greedy.compression):.2f}x")

# Ratios are exact fractions.  A square split of 256 x 256 is very different
# from a lopsided one.
print(compression_ratio(256, 256, (16, 16), (16, 16)))
print(compression_ratio(256, 256, (32, 8), (8, 32)))
print(compression_ratio(256, 256, (2, 2), (128, 128)), "~",
      round(float(compression_ratio(256, 256, (2, 2), (128, 128))), 3))

# Prime dimensions leave one factor with a dimension of 1, and the planner warns.
with warnings.catch_warnings(record=True) as caught:
    warnings.simplefilter("always")
    plan = plan_factor_shapes(7, 64)
print(plan.shape1, plan.shape2, plan.degenerate, "|", caught[0].message)
