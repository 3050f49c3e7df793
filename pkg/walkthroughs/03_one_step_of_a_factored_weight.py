"""How W = P Q moves after one gradient step on P and Q.

The first-order change is -eta (G Q^T Q + P P^T G).  What is left over is
eta^2 gP gQ, so the relative residual shrinks linearly with eta.
"""
# %%
from colin.gradcheck import delta_w_experiment, halving_ratios, orthogonality_efficiency_probe

reps = delta_w_experiment(12, 4, 9, etas=(1e-2, 5e-3, 2.5e-3, 1.25e-3), seed=0)
for r in reps:
    print(f"eta {r.eta:.2e}  residual {r.residual:.3e}  |err| / eta^2 bound {r.bound_ratio:.2f}")
print("halving ratios", [round(q, 4) for q in halving_ratios(reps)])

# %% orthogonal square factors: the update is -2 eta G up to the eta^2 term
(r,) = delta_w_experiment(6, 6, 6, etas=(1e-4,), seed=1, orthonormal=True)
print("||dW + 2 eta G|| =", r.two_eta_residual, "<= eta^2 ||G||^2 =", r.two_eta_bound)

# %% same product, different factor scaling: one step's loss decrease
out = orthogonality_efficiency_probe(12, 4, 9, seed=2, eta=1e-3)
for label in ("orthonormal", "ill_conditioned"):
    c = out[label]
    print(f"{label:16s} dL {c.d_loss:+.4e}  predicted {c.d_loss_predicted:+.4e}")
