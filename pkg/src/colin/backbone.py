"""A tiny frozen backbone for end-to-end adapter tuning.

Each block is two pre-norm residual sublayers (a channel mixer and a GeLU
MLP), with an adapter placed right after each skip connection:

    u = adapter_1(x + N(x) M + m)
    v = adapter_2(u + GeLU(N(u) W1 + c1) W2 + c2)

``N`` is a parameter-free RMS norm over features.  A final ``N``, a mean-pool
over tokens and a linear head produce the prediction.  Backbone
weights are frozen; only adapters and the head are trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .core import (
    DEFAULT_LAMBDA,
    ColinAdapter,
    adapter_backward,
    adapter_forward,
    gelu,
    gelu_grad,
    orthogonal_loss,
    random_factor_init,
    svd_init,
)
from .linalg import Rng, ShapeError, kaiming_uniform

INIT_MODES = ("svd", "random")


RMS_EPS = 1e-6


def rms_norm(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / r, r


def rms_norm_backward(y: np.ndarray, r: np.ndarray, d_y: np.ndarray) -> np.ndarray:
    return (d_y - y * np.mean(d_y * y, axis=-1, keepdims=True)) / r


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class ToyBlock:
    mixer_weight: np.ndarray  # d x d
    mixer_bias: np.ndarray
    mlp_w1: np.ndarray        # d x 4d
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray        # 4d x d
    mlp_b2: np.ndarray
    adapter_1: ColinAdapter
    adapter_2: ColinAdapter

    FROZEN = ("mixer_weight", "mixer_bias", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")

    @property
    def adapters(self) -> tuple[ColinAdapter, ColinAdapter]:
        return self.adapter_1, self.adapter_2


@dataclass
class ToyModel:
    blocks: list[ToyBlock]
    head_weight: np.ndarray   # out x d
    head_bias: np.ndarray
    use_adapters: bool = True

    @property
    def adapters(self) -> list[ColinAdapter]:
        return [a for b in self.blocks for a in b.adapters]

    def forward(self, x: np.ndarray):
        """Prediction for ``x`` of shape ``(batch, tokens, d)`` plus a tape for backward."""
        x = np.asarray(x, dtype=np.float64)
        tape = []
        for blk in self.blocks:
            n1, r1 = rms_norm(x)
            pre1 = x + n1 @ blk.mixer_weight + blk.mixer_bias
            if self.use_adapters:
                u, cache1 = adapter_forward(blk.adapter_1, pre1)
            else:
                u, cache1 = pre1, None
            n2, r2 = rms_norm(u)
            hid = n2 @ blk.mlp_w1 + blk.mlp_b1
            pre2 = u + gelu(hid) @ blk.mlp_w2 + blk.mlp_b2
            if self.use_adapters:
                v, cache2 = adapter_forward(blk.adapter_2, pre2)
            else:
                v, cache2 = pre2, None
            tape.append(((n1, r1), (n2, r2), hid, cache1, cache2))
            x = v
        nf, rf = rms_norm(x)
        pooled = nf.mean(axis=-2)
        return pooled @ self.head_weight.T + self.head_bias, (tape, pooled, (nf, rf))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, state, d_out: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients for the trainable set (frozen weights get none) and the input."""
        tape, pooled, (nf, rf) = state
        grads = {
            "head.weight": d_out.T @ pooled,
            "head.bias": d_out.sum(axis=0),
        }
        d_pooled = d_out @ self.head_weight
        d_nf = np.broadcast_to(d_pooled[:, None, :] / nf.shape[-2], nf.shape)
        d_x = rms_norm_backward(nf, rf, d_nf)
        for i in reversed(range(len(self.blocks))):
            blk = self.blocks[i]
            (n1, r1), (n2, r2), hid, cache1, cache2 = tape[i]
            if self.use_adapters:
                g2 = adapter_backward(blk.adapter_2, cache2, d_x)
                _store(grads, f"block{i}.adapter_2", g2)
                d_x = g2.d_input
            d_hid = (d_x @ blk.mlp_w2.T) * gelu_grad(hid)
            d_x = d_x + rms_norm_backward(n2, r2, d_hid @ blk.mlp_w1.T)
            if self.use_adapters:
                g1 = adapter_backward(blk.adapter_1, cache1, d_x)
                _store(grads, f"block{i}.adapter_1", g1)
                d_x = g1.d_input
            d_x = d_x + rms_norm_backward(n1, r1, d_x @ blk.mixer_weight.T)
        return grads, d_x


def _store(grads: dict, prefix: str, g) -> None:
    for k, v in g.params().items():
        grads[f"{prefix}.{k}"] = v


@dataclass
class ParamPartition:
    """Named references into a model: frozen backbone vs trainable sets."""

    theta_F: dict[str, np.ndarray]
    theta_T: dict[str, np.ndarray]
    theta_A: dict[str, np.ndarray]

    def __post_init__(self):
        overlap = set(self.theta_F) & (set(self.theta_T) | set(self.theta_A))
        if overlap:
            raise ValueError(f"frozen and trainable sets overlap: {sorted(overlap)}")
        trainable_ids = {id(v) for v in self.omega.values()}
        if any(id(v) in trainable_ids for v in self.theta_F.values()):
            raise ValueError("a frozen array is also registered as trainable")

    @property
    def omega(self) -> dict[str, np.ndarray]:
        return {**self.theta_A, **self.theta_T}

    def sizes(self) -> dict[str, int]:
        f = sum(v.size for v in self.theta_F.values())
        t = sum(v.size for v in self.theta_T.values())
        a = sum(v.size for v in self.theta_A.values())
        return {"theta_F": f, "theta_T": t, "theta_A": a, "omega": t + a,
                "adapter_fraction": a / (a + t + f)}

    def snapshot_frozen(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.theta_F.items()}


def partition_of(model: ToyModel) -> ParamPartition:
    frozen, adapters = {}, {}
    for i, blk in enumerate(model.blocks):
        for name in ToyBlock.FROZEN:
            frozen[f"block{i}.{name}"] = getattr(blk, name)
        if model.use_adapters:
            for j, ad in enumerate(blk.adapters, start=1):
                for k, v in ad.params().items():
                    adapters[f"block{i}.adapter_{j}.{k}"] = v
    head = {"head.weight": model.head_weight, "head.bias": model.head_bias}
    return ParamPartition(frozen, head, adapters)


def build_toy_model(blocks: int, d: int, h: int, beta: int, alpha: int, rng: Rng,
                    out_dim: int | None = None, init: str = "svd",
                    use_adapters: bool = True, lam: float = DEFAULT_LAMBDA,
                    adapter_seed: int | None = None):
    """Random frozen backbone with two adapters per block and a linear head.

    ``init`` picks the adapter start: ``"svd"`` (orthogonal) or ``"random"``
    (kaiming factors, small diagonal kernels).  Backbone, adapter and head
    draws use separate child streams of ``rng``, so the backbone for a seed
    never depends on ``init``; ``adapter_seed`` swaps in a different adapter
    and head stream over the same backbone.
    """
    if beta > min(d, h):
        raise ShapeError(f"beta={beta} exceeds min(d, h)={min(d, h)}")
    if init not in INIT_MODES:
        raise ValueError(f"init must be one of {INIT_MODES}")
    out_dim = d if out_dim is None else out_dim
    backbone_rng = rng.spawn(1)
    if adapter_seed is None:
        adapter_rng, head_rng = rng.spawn(2), rng.spawn(3)
    else:
        adapter_rng, head_rng = Rng(adapter_seed).spawn(2), Rng(adapter_seed).spawn(3)

    built = []
    for _ in range(blocks):
        kw = dict(
            mixer_weight=kaiming_uniform(d, d, backbone_rng).T.copy(),
            mixer_bias=np.zeros(d),
            mlp_w1=kaiming_uniform(4 * d, d, backbone_rng).T.copy(),
            mlp_b1=np.zeros(4 * d),
            mlp_w2=kaiming_uniform(d, 4 * d, backbone_rng).T.copy(),
            mlp_b2=np.zeros(d),
        )
        pair = []
        for _ in range(2):
            ad = ColinAdapter.zeros(d, h, beta, alpha, lam=lam)
            ad = svd_init(ad, adapter_rng) if init == "svd" else random_factor_init(ad, adapter_rng)
            pair.append(ad)
        built.append(ToyBlock(adapter_1=pair[0], adapter_2=pair[1], **kw))
    model = ToyModel(
        blocks=built,
        head_weight=kaiming_uniform(out_dim, d, head_rng),
        head_bias=np.zeros(out_dim),
        use_adapters=use_adapters,
    )
    return model, partition_of(model)


@dataclass
class Dataset:
    x: np.ndarray  # samples x tokens x d
    y: np.ndarray  # samples x out

    def batches(self, batch: int, rng: Rng) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Endless minibatches: reshuffle every epoch, drop nothing."""
        n = self.x.shape[0]
        if batch >= n:
            while True:
                yield self.x, self.y
        while True:
            order = np.argsort(rng.random(n), kind="stable")
            for s in range(0, n, batch):
                idx = order[s:s + batch]
                yield self.x[idx], self.y[idx]

    def target_stats(self) -> tuple[float, float]:
        return float(self.y.mean()), float(self.y.var())


def make_teacher(blocks: int, d: int, h: int, beta: int, alpha: int, seed: int,
                 teacher_seed: int | None = None) -> ToyModel:
    """The student's frozen backbone carrying its own hidden adapters and head.

    A student built from ``Rng(seed)`` can match this teacher only by moving
    its adapters and head, which is what adapter tuning has to do.
    """
    teacher_seed = seed + 7919 if teacher_seed is None else teacher_seed
    model, _ = build_toy_model(blocks, d, h, beta, alpha, Rng(seed), init="svd",
                               adapter_seed=teacher_seed)
    return model


def make_synthetic_task(d: int, samples: int, rng: Rng, tokens: int = 4,
                        teacher="random", out_dim: int | None = None) -> Dataset:
    """Regression pairs ``(x, teacher(x))`` with standard-normal token sequences.

    ``teacher`` is a ``ToyModel`` (see ``make_teacher``), ``"identity"`` for
    ``y = mean_t(N(x))`` (what a block-free model with an identity head
    computes), or ``"random"`` for ``y = mean_t(GeLU(x A) B) + mean_t(x) C``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    x = rng.normal((samples, tokens, d))
    if isinstance(teacher, ToyModel):
        return Dataset(x, teacher.predict(x))
    if teacher == "identity":
        return Dataset(x, rms_norm(x)[0].mean(axis=1))
    if teacher != "random":
        raise ValueError(f"unknown teacher {teacher!r}")
    out_dim = d if out_dim is None else out_dim
    a = kaiming_uniform(2 * d, d, rng).T
    b = kaiming_uniform(out_dim, 2 * d, rng).T
    c = kaiming_uniform(out_dim, d, rng).T
    y = gelu(x @ a).mean(axis=1) @ b + x.mean(axis=1) @ c
    return Dataset(x, y)


def toy_task(blocks: int = 2, d: int = 16, h: int = 8, beta: int = 4, alpha: int = 2,
             samples: int = 128, tokens: int = 4, seed: int = 1, init: str = "svd",
             lam: float = DEFAULT_LAMBDA, use_adapters: bool = True):
    """The default adapter-tuning problem: a student and data from its teacher.

    Returns ``(model, partition, dataset)``.  The teacher and the student share
    the frozen backbone drawn from ``Rng(seed)``; inputs come from a separate
    child stream so they do not depend on ``init``.
    """
    teacher = make_teacher(blocks, d, h, beta, alpha, seed)
    data = make_synthetic_task(d, samples, Rng(seed).spawn(11), tokens=tokens, teacher=teacher)
    model, part = build_toy_model(blocks, d, h, beta, alpha, Rng(seed), init=init, lam=lam,
                                  use_adapters=use_adapters)
    return model, part, data


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    lam: float = DEFAULT_LAMBDA
    steps: int = 500
    batch: int = 32
    seed: int = 1
    momentum: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class TrainingTrace:
    task_loss: list[float] = field(default_factory=list)
    ortho_loss: list[float] = field(default_factory=list)
    total_loss: list[float] = field(default_factory=list)
    lam: float = 0.0
    final_params: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def to_csv(self) -> str:
        lines = ["step,task_loss,ortho_loss,total_loss"]
        for i, (a, b, c) in enumerate(zip(self.task_loss, self.ortho_loss, self.total_loss)):
            lines.append(f"{i},{a!r},{b!r},{c!r}")
        return "\n".join(lines) + "\n"


def mse(pred: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - y
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def evaluate(model: ToyModel, data: Dataset) -> float:
    return mse(model.predict(data.x), data.y)[0]


def train(model: ToyModel, partition: ParamPartition, data: Dataset,
          cfg: TrainConfig) -> TrainingTrace:
    """Gradient descent on the trainable set with the orthogonal penalty.

    Each step records the minibatch task loss ``L0``, the summed orthogonal
    loss of all adapters, and ``L0 + lam * L_ort`` before updating.  Frozen
    arrays are never written.
    """
    omega = partition.omega
    if model.use_adapters:
        expected = set(partition_of(model).omega)
        if expected != set(omega):
            raise ValueError("partition does not match the model")
    velocity = {k: np.zeros_like(v) for k, v in omega.items()}
    adapters = model.adapters if model.use_adapters else []
    prefixes = [f"block{i}.adapter_{j}" for i in range(len(model.blocks)) for j in (1, 2)]
    trace = TrainingTrace(lam=cfg.lam)
    batches = data.batches(cfg.batch, Rng(cfg.seed).spawn(7))

    for step in range(cfg.steps):
        xb, yb = next(batches)
        pred, state = model.forward(xb)
        l0, d_pred = mse(pred, yb)
        grads, _ = model.backward(state, d_pred)
        l_ort = 0.0
        for prefix, ad in zip(prefixes, adapters):
            loss, og = orthogonal_loss(ad)
            l_ort += loss
            if cfg.lam:
                for name, g in og.items():
                    grads[f"{prefix}.{name}"] = grads[f"{prefix}.{name}"] + cfg.lam * g
        total = l0 + cfg.lam * l_ort
        if not math.isfinite(total):
            raise TrainingDiverged(step)
        trace.task_loss.append(l0)
        trace.ortho_loss.append(l_ort)
        trace.total_loss.append(total)
        for name, arr in omega.items():
            v = velocity[name]
            v *= cfg.momentum
            v += grads[name]
            arr -= cfg.lr * v
    trace.final_params = {k: v.copy() for k, v in omega.items()}
    return trace
