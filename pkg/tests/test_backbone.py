import numpy as np
import pytest

from colin.backbone import (
    Dataset,
    ParamPartition,
    TrainConfig,
    TrainingDiverged,
    build_toy_model,
    evaluate,
    make_synthetic_task,
    mse,
    partition_of,
    rms_norm,
    toy_task,
    train,
)
from colin.core import ColinAdapter, orthogonal_loss, param_count
from colin.gradcheck import fd_gradient, relative_error
from colin.linalg import Rng, ShapeError


def test_two_adapters_per_block():
    model, part = build_toy_model(2, 8, 4, 2, 2, Rng(0))
    assert len(model.adapters) == 4
    assert len({id(a) for a in model.adapters}) == 4
    assert sum(1 for k in part.theta_A if k.endswith(".p_down")) == 4


def test_partition_sizes_d64():
    d, h, beta, alpha = 64, 16, 8, 4
    model, part = build_toy_model(2, d, h, beta, alpha, Rng(0))
    sizes = part.sizes()
    # direct count: factors + kernels from param_count, plus biases and the conv
    per_adapter = (param_count(d, h, beta, alpha, gamma=2).colin
                   + h + d + 3 * h + h)
    assert sizes["theta_A"] == 4 * per_adapter
    assert sizes["theta_T"] == d * d + d
    frozen_per_block = d * d + d + d * 4 * d + 4 * d + 4 * d * d + d
    assert sizes["theta_F"] == 2 * frozen_per_block
    assert sizes["omega"] == sizes["theta_A"] + sizes["theta_T"]
    assert sizes["omega"] < sizes["theta_F"] / 5
    assert sizes["adapter_fraction"] == pytest.approx(
        sizes["theta_A"] / (sizes["omega"] + sizes["theta_F"]))


def test_partition_disjoint_and_omega_only_trainable():
    _, part = build_toy_model(1, 6, 4, 2, 1, Rng(1))
    assert not set(part.theta_F) & set(part.omega)
    with pytest.raises(ValueError):
        ParamPartition({"a": part.theta_T["head.weight"]}, part.theta_T, {})


def test_build_rejects_wide_beta():
    with pytest.raises(ShapeError):
        build_toy_model(1, 6, 4, 5, 1, Rng(0))


def test_same_seed_same_forward():
    x = Rng(5).normal((3, 4, 8))
    a, _ = build_toy_model(2, 8, 4, 2, 2, Rng(7))
    b, _ = build_toy_model(2, 8, 4, 2, 2, Rng(7))
    assert np.array_equal(a.predict(x), b.predict(x))


def test_backbone_independent_of_adapter_init():
    a, _ = build_toy_model(2, 8, 4, 2, 2, Rng(7), init="svd")
    b, _ = build_toy_model(2, 8, 4, 2, 2, Rng(7), init="random")
    assert np.array_equal(a.blocks[1].mlp_w2, b.blocks[1].mlp_w2)
    assert np.array_equal(a.head_weight, b.head_weight)
    assert orthogonal_loss(a.adapters[0])[0] <= 1e-16
    assert orthogonal_loss(b.adapters[0])[0] > 1e-3


def test_random_init_kernels():
    m, _ = build_toy_model(1, 8, 4, 3, 2, Rng(3), init="random")
    for k in m.adapters[0].kernels:
        assert np.array_equal(k, 1e-2 * np.eye(3))


# -- data --------------------------------------------------------------------------

def test_identity_teacher_zero_loss():
    data = make_synthetic_task(6, 20, Rng(2), teacher="identity")
    model, _ = build_toy_model(0, 6, 4, 2, 1, Rng(0))
    model.head_weight = np.eye(6)
    assert evaluate(model, data) == 0.0
    np.testing.assert_allclose(data.y, rms_norm(data.x)[0].mean(axis=1), atol=0)


def test_dataset_reproducible():
    a = make_synthetic_task(5, 10, Rng(4))
    b = make_synthetic_task(5, 10, Rng(4))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)


def test_target_stats_recomputed():
    data = make_synthetic_task(5, 17, Rng(6))
    flat = [float(v) for v in data.y.ravel()]
    mean = sum(flat) / len(flat)
    var = sum((v - mean) ** 2 for v in flat) / len(flat)
    got = data.target_stats()
    assert got[0] == pytest.approx(mean, rel=1e-12, abs=1e-15)
    assert got[1] == pytest.approx(var, rel=1e-12)


def test_synthetic_task_errors():
    with pytest.raises(ValueError):
        make_synthetic_task(4, 0, Rng(0))
    with pytest.raises(ValueError):
        make_synthetic_task(4, 3, Rng(0), teacher="nope")


def test_batches_cover_each_epoch():
    data = Dataset(np.arange(10.0).reshape(10, 1, 1), np.arange(10.0).reshape(10, 1))
    it = data.batches(4, Rng(0))
    seen = np.concatenate([next(it)[1].ravel() for _ in range(3)])
    assert sorted(seen.tolist()) == list(range(10))


def test_mse_gradient():
    p, y = Rng(1).normal((3, 2)), Rng(2).normal((3, 2))
    loss, g = mse(p, y)
    num = fd_gradient(lambda: mse(p, y)[0], {"p": p})["p"]
    assert relative_error(g, num).max() <= 1e-6
    assert loss == pytest.approx(np.mean((p - y) ** 2))


# -- gradients ---------------------------------------------------------------------

@pytest.mark.parametrize("use_adapters", [True, False])
def test_model_backward_matches_fd(use_adapters):
    model, part = build_toy_model(2, 6, 4, 2, 2, Rng(3), init="random", out_dim=3,
                                  use_adapters=use_adapters)
    rng = Rng(30)
    for ad in model.adapters:
        ad.b_down += 0.1 * rng.normal(ad.b_down.shape)
        ad.dw_kernel += 0.1 * rng.normal(ad.dw_kernel.shape)
    x, y = rng.normal((2, 3, 6)), rng.normal((2, 3))
    pred, state = model.forward(x)
    grads, d_x = model.backward(state, mse(pred, y)[1])
    # some entries are near zero, where any stencil is all roundoff; the
    # five-point stencil plus a 1e-6 floor bounds the absolute error at 1e-11
    num = fd_gradient(lambda: mse(model.predict(x), y)[0], part.omega | {"x": x},
                      rel_step=1e-4, order=4)
    for k in part.omega:
        assert relative_error(grads[k], num[k], floor=1e-6).max() <= 1e-5, k
    assert relative_error(d_x, num["x"], floor=1e-6).max() <= 1e-5
    assert not any(k in grads for k in part.theta_F)


# -- training ----------------------------------------------------------------------

def small_task(**kw):
    return toy_task(blocks=1, d=8, h=4, beta=2, alpha=2, samples=32, **kw)


def test_lr_zero_constant_trace():
    model, part, data = small_task()
    before = {k: v.copy() for k, v in part.omega.items()}
    tr = train(model, part, data, TrainConfig(lr=0.0, steps=5, batch=32))
    assert len(set(tr.task_loss)) == 1 and len(set(tr.total_loss)) == 1
    for k, v in part.omega.items():
        assert np.array_equal(v, before[k])


def test_frozen_bit_identical_and_trace_lengths():
    model, part, data = small_task()
    frozen = part.snapshot_frozen()
    head = part.theta_T["head.weight"].copy()
    tr = train(model, part, data, TrainConfig(steps=20, batch=8))
    for k, v in part.theta_F.items():
        assert np.array_equal(v, frozen[k]), k
    assert not np.array_equal(part.theta_T["head.weight"], head)
    assert len(tr.task_loss) == len(tr.ortho_loss) == len(tr.total_loss) == 20


def test_loss_decomposition():
    model, part, data = small_task(lam=0.3)
    tr = train(model, part, data, TrainConfig(steps=15, lam=0.3, batch=8))
    for l0, lo, tot in zip(tr.task_loss, tr.ortho_loss, tr.total_loss):
        assert abs(tot - (l0 + 0.3 * lo)) <= 1e-12


def test_trace_csv():
    model, part, data = small_task()
    tr = train(model, part, data, TrainConfig(steps=3, batch=8))
    lines = tr.to_csv().splitlines()
    assert lines[0] == "step,task_loss,ortho_loss,total_loss" and len(lines) == 4
    assert float(lines[1].split(",")[1]) == tr.task_loss[0]


def test_training_deterministic():
    runs = []
    for _ in range(2):
        model, part, data = small_task()
        runs.append(train(model, part, data, TrainConfig(steps=10, batch=8, momentum=0.5)))
    assert runs[0].to_csv() == runs[1].to_csv()


def test_partition_mismatch_rejected():
    model, _, data = small_task()
    _, other = build_toy_model(2, 8, 4, 2, 2, Rng(0))
    with pytest.raises(ValueError):
        train(model, other, data, TrainConfig(steps=1))


def test_divergence_reports_step():
    model, part, data = small_task()
    with np.errstate(all="ignore"):
        with pytest.raises(TrainingDiverged) as info:
            train(model, part, data, TrainConfig(lr=1e6, steps=50, batch=8))
    assert 0 < info.value.step < 50


@pytest.mark.parametrize("kw", [dict(lr=-1.0), dict(lam=-1.0), dict(steps=0),
                                dict(momentum=1.0)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


@pytest.mark.slow
def test_default_task_halves_loss():
    model, part, data = toy_task(seed=1)
    initial = evaluate(model, data)
    tr = train(model, part, data, TrainConfig(steps=500, seed=1, lam=1e-4))
    assert tr.task_loss[-1] < 0.5 * tr.task_loss[0]
    assert evaluate(model, data) < 0.5 * initial


@pytest.mark.slow
def test_adapters_beat_frozen_baseline():
    with_ad, without = [], []
    for seed in range(5):
        for use, out in ((True, with_ad), (False, without)):
            model, part, data = toy_task(seed=seed, use_adapters=use)
            train(model, part, data, TrainConfig(seed=seed))
            out.append(evaluate(model, data))
    assert np.mean(with_ad) < np.mean(without)


def test_adapter_zero_is_transparent():
    model, _ = build_toy_model(1, 6, 4, 2, 1, Rng(2))
    for i, ad in enumerate(model.adapters):
        model.blocks[0].__setattr__(f"adapter_{i + 1}", ColinAdapter.zeros(6, 4, 2, 1))
    bare, _ = build_toy_model(1, 6, 4, 2, 1, Rng(2), use_adapters=False)
    x = Rng(3).normal((2, 3, 6))
    assert np.array_equal(model.predict(x), bare.predict(x))
    # rebuilt partition follows the new adapter objects
    assert partition_of(model).theta_A["block0.adapter_1.p_down"] is model.blocks[0].adapter_1.p_down
