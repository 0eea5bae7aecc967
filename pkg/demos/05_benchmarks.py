"""
Timing matvec kernels
=====================

The harness pins BLAS to one thread, warms up, batches calls that are too
short for the clock, and reports median and MAD over many repetitions.
Every kernel's output is checksummed against an expand-then-multiply
reference.
"""

from kprnn import bench

results = bench.matvec_suite(sizes=[(256, 256), (1024, 512)], reps=50)
print(bench.format_table(results))

# Chains of 4 to 8 factors for one 256x256 matrix.
print()
print(bench.format_table(bench.chain_suite(size=256, reps=300)))

# Two runs of the same kernel should agree to within a few MADs.
print()
print(bench.aa_test(size=256))
