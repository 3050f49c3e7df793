"""The one-sided Jacobi SVD used for adapter initialisation."""
# %%
import numpy as np

from colin import Rng, svd

a = Rng(7).normal((6, 4))
r = svd(a)
print("singular values", r.s)
print("LAPACK         ", np.linalg.svd(a, compute_uv=False))
print("reconstruction error", np.linalg.norm(a - r.reconstruct()))

# %% rank-deficient input still gets a full orthonormal basis
low = Rng(8).normal((5, 2)) @ Rng(9).normal((2, 5))
r = svd(low)
print("s", np.round(r.s, 12))
print("U^T U = I:", np.allclose(r.u.T @ r.u, np.eye(5)))
