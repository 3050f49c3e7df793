"""Fitting a random matrix by P^T Q with and without the orthogonal penalty.

A scaled-down run; `colin simulate` with its defaults runs the full
100 x 5000 problem over 20 seeds.
"""
# %%
from colin.simulate import SimConfig, compare_sizes, run_sim

cfg = SimConfig(m=20, k=6, n=200, lr=1e-4, iters=400, seeds=5, record_every=50)
summary = run_sim(cfg)
for i, it in enumerate(summary.iters):
    print(f"iter {it:4d}  with OL {summary.mean['with_OL'][i]:.4f}  "
          f"without {summary.mean['without_OL'][i]:.4f}")
print("relative final gap", summary.final_gap)

# %% does the gap depend on n?
report, _ = compare_sizes(cfg, [50, 200, 800])
for row in report:
    print(row)
