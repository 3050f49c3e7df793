"""Anatomy of a multi-branch adapter: factors, kernels, forward pass, fusion."""
# %%
import numpy as np

from colin import ColinAdapter, Rng, adapter_forward, compose_weight, fuse, param_count, svd_init

rng = Rng(0)
ad = svd_init(ColinAdapter.zeros(d=32, h=8, beta=4, alpha=3), rng)
print("p_down", ad.p_down.shape, "q_down", ad.q_down.shape, "kernels", ad.kernels.shape)

# %% every branch reuses the same P and Q; only the 4x4 kernels differ
ad.kernels += 0.05 * rng.normal(ad.kernels.shape)
w_down = compose_weight(ad.p_down, ad.kernels, ad.q_down)
branches = [ad.p_down.T @ k @ ad.q_down for k in ad.kernels]
print("down weight", w_down.shape, "rank", np.linalg.matrix_rank(w_down))
print("sum of branches matches:", np.allclose(sum(branches), w_down))

# %% residual block on a sequence of 6 tokens
x = rng.normal((6, 32))
y, _ = adapter_forward(ad, x)
print("|y - x| =", np.linalg.norm(y - x))

# %% for inference the branches collapse into two plain matrices
dense = fuse(ad)
print("fused max deviation:", np.abs(dense.forward(x) - y).max())

# %% parameter budget against two dense d x h projections
pc = param_count(32, 8, 4, alpha=3, gamma=2)
print(f"colin {pc.colin} vs dense {pc.dense_baseline} -> reduction {float(pc.reduction):.3f}")
pc = param_count(384, 768, 8)
print("384 x 768 at beta 8, factors only:", pc.reduction)
