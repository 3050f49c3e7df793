"""Hand-written backward passes checked against finite differences."""
# %%
from colin import ColinAdapter, Rng
from colin.gradcheck import GRADCHECK_CONFIGS, check_adapter, gradcheck_suite

rng = Rng(5)
ad = ColinAdapter.random(d=8, h=6, beta=3, alpha=2, rng=rng)
x, upstream = rng.normal((4, 8)), rng.normal((4, 8))
report = check_adapter(ad, x, upstream)
for name, err in sorted(report.max_rel_error.items()):
    print(f"{name:16s} {err:.2e}")

# %% the ten stock configurations
for cfg, rep in gradcheck_suite(GRADCHECK_CONFIGS):
    print(cfg["seed"], "ok" if rep.ok else "FAIL", f"{max(rep.max_rel_error.values()):.1e}")
