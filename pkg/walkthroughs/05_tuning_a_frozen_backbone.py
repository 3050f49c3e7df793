"""Adapter tuning on a toy backbone: only adapters and head move."""
# %%
import numpy as np

from colin.backbone import TrainConfig, evaluate, toy_task, train

model, part, data = toy_task(seed=1)
print(part.sizes())

# %%
frozen = part.snapshot_frozen()
trace = train(model, part, data, TrainConfig(steps=300, seed=1))
print("task loss", trace.task_loss[0], "->", trace.task_loss[-1])
print("frozen untouched:", all(np.array_equal(v, frozen[k]) for k, v in part.theta_F.items()))

# %% the same budget without adapters only moves the head
bare, bare_part, _ = toy_task(seed=1, use_adapters=False)
train(bare, bare_part, data, TrainConfig(steps=300, seed=1))
print("full-set loss with adapters", evaluate(model, data), "head only", evaluate(bare, data))
