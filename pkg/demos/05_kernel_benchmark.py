# %% [markdown]
# # How much faster is XNOR+popcount?
#
# The benchmark times the packed kernels against the in-repo float path
# (im2col + BLAS matmul) at identical shapes, single-threaded, after
# verifying both produce identical results. Speedups grow with the inner
# dimension K: packing amortizes once each dot product covers many words.

# %%
from bnnkit.infer import bench, bench_rows_to_csv

rows = bench(repetitions=10)
print(bench_rows_to_csv(rows))

# %%
for r in rows:
    bar = "#" * int(2 * r.speedup)
    print(f"{r.op:4s} K={r.k:5d}  {r.speedup:5.2f}x {bar}")

# %% [markdown]
# Typical desk-CPU numbers: 3-4x at small K where packing overhead
# dominates, 5-8x once K reaches convolutional sizes (C * kh * kw above a
# thousand). The float baseline is the same conv the trainer uses, so the
# comparison is engine-vs-engine, not engine-vs-strawman.
