"""Multi-branch low-rank adapter with shared factors.

Each projection weight is built as ``sum_i P^T K_i Q``.  One ``P``/``Q`` pair
belongs to the down-projection and one to the up-projection; the ``alpha``
kernels ``K_i`` are shared by both.  The adapter block is

    y = x + GeLU(DWConv(x W_D^T + b_D)) W_U^T + b_U

with an exact-erf GeLU and a width-3 depth-wise convolution over tokens.
Inputs are ``(tokens, d)`` or batched ``(batch, tokens, d)`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

from .linalg import Rng, ShapeError, kaiming_uniform, matrix_from_json, matrix_to_json, svd

FORMAT_TAG = "colin-adapter/1"
FUSED_FORMAT_TAG = "colin-fused/1"
DEFAULT_LAMBDA = 1e-4
DW_WIDTH = 3

TRAINABLE = ("p_down", "q_down", "p_up", "q_up", "kernels",
             "b_down", "b_up", "dw_kernel", "dw_bias")
FACTORS = ("p_down", "q_down", "p_up", "q_up")


# ---------------------------------------------------------------------------
# activation and depth-wise conv
# ---------------------------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + erf(z * _INV_SQRT2))


def gelu_grad(z: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(z * _INV_SQRT2))
    return cdf + z * _INV_SQRT2PI * np.exp(-0.5 * z * z)


def dwconv(z: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Per-channel width-3 convolution along the token axis (-2), zero padded.

    ``out[t, j] = k[j,0] z[t-1, j] + k[j,1] z[t, j] + k[j,2] z[t+1, j] + b[j]``
    """
    out = z * kernel[:, 1] + bias
    out[..., 1:, :] += z[..., :-1, :] * kernel[:, 0]
    out[..., :-1, :] += z[..., 1:, :] * kernel[:, 2]
    return out


def dwconv_backward(z: np.ndarray, kernel: np.ndarray, d_out: np.ndarray):
    """Gradients of ``dwconv`` w.r.t. its input, kernel and bias."""
    lead = tuple(range(d_out.ndim - 1))
    d_bias = d_out.sum(axis=lead)
    d_kernel = np.empty_like(kernel)
    d_kernel[:, 1] = (d_out * z).sum(axis=lead)
    d_kernel[:, 0] = (d_out[..., 1:, :] * z[..., :-1, :]).sum(axis=lead)
    d_kernel[:, 2] = (d_out[..., :-1, :] * z[..., 1:, :]).sum(axis=lead)
    d_z = d_out * kernel[:, 1]
    d_z[..., :-1, :] += d_out[..., 1:, :] * kernel[:, 0]
    d_z[..., 1:, :] += d_out[..., :-1, :] * kernel[:, 2]
    return d_z, d_kernel, d_bias


def identity_dw_kernel(channels: int) -> np.ndarray:
    k = np.zeros((channels, DW_WIDTH))
    k[:, DW_WIDTH // 2] = 1.0
    return k


# ---------------------------------------------------------------------------
# adapter state
# ---------------------------------------------------------------------------

@dataclass
class ColinAdapter:
    """Parameters of one adapter.

    ``h`` is the hidden (projection) width, ``beta`` the kernel size and
    ``alpha`` the branch count.  ``p_down``/``q_down`` compose the ``h x d``
    down weight, ``p_up``/``q_up`` the ``d x h`` up weight; ``kernels`` has
    shape ``(alpha, beta, beta)`` and feeds both.
    """

    p_down: np.ndarray
    q_down: np.ndarray
    p_up: np.ndarray
    q_up: np.ndarray
    kernels: np.ndarray
    b_down: np.ndarray
    b_up: np.ndarray
    dw_kernel: np.ndarray
    dw_bias: np.ndarray
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        for name in TRAINABLE:
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        self.validate()

    @property
    def beta(self) -> int:
        return self.kernels.shape[1]

    @property
    def alpha(self) -> int:
        return self.kernels.shape[0]

    @property
    def h(self) -> int:
        return self.p_down.shape[1]

    @property
    def d(self) -> int:
        return self.q_down.shape[1]

    def validate(self) -> None:
        if self.kernels.ndim != 3 or self.kernels.shape[1] != self.kernels.shape[2]:
            raise ShapeError(f"kernels must be (alpha, beta, beta), got {self.kernels.shape}")
        a, b = self.kernels.shape[:2]
        if a < 1:
            raise ShapeError("need at least one branch")
        h, d = self.p_down.shape[-1], self.q_down.shape[-1]
        expected = {
            "p_down": (b, h), "q_down": (b, d), "p_up": (b, d), "q_up": (b, h),
            "b_down": (h,), "b_up": (d,), "dw_kernel": (h, DW_WIDTH), "dw_bias": (h,),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {got}")
        if b > min(d, h):
            raise ShapeError(f"beta={b} exceeds min(d, h)={min(d, h)}")

    @classmethod
    def zeros(cls, d: int, h: int, beta: int, alpha: int, lam: float = DEFAULT_LAMBDA):
        """All factors, kernels and biases zero; depth-wise conv is the identity."""
        return cls(
            p_down=np.zeros((beta, h)), q_down=np.zeros((beta, d)),
            p_up=np.zeros((beta, d)), q_up=np.zeros((beta, h)),
            kernels=np.zeros((alpha, beta, beta)),
            b_down=np.zeros(h), b_up=np.zeros(d),
            dw_kernel=identity_dw_kernel(h), dw_bias=np.zeros(h), lam=lam,
        )

    @classmethod
    def random(cls, d: int, h: int, beta: int, alpha: int, rng: Rng,
               scale: float = 0.5, lam: float = DEFAULT_LAMBDA):
        """Every trainable entry drawn from N(0, scale^2); used by tests and checks."""
        def draw(*shape):
            return scale * rng.normal(shape)
        return cls(
            p_down=draw(beta, h), q_down=draw(beta, d), p_up=draw(beta, d), q_up=draw(beta, h),
            kernels=draw(alpha, beta, beta), b_down=draw(h), b_up=draw(d),
            dw_kernel=draw(h, DW_WIDTH), dw_bias=draw(h), lam=lam,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TRAINABLE}

    def copy(self) -> "ColinAdapter":
        return replace(self, **{k: v.copy() for k, v in self.params().items()})

    def num_params(self) -> int:
        return sum(v.size for v in self.params().values())

    def down_weight(self) -> np.ndarray:
        return compose_weight(self.p_down, self.kernels, self.q_down)

    def up_weight(self) -> np.ndarray:
        return compose_weight(self.p_up, self.kernels, self.q_up)

    def to_json(self) -> dict:
        out = {"format": FORMAT_TAG, "d": self.d, "h": self.h, "beta": self.beta,
               "alpha": self.alpha, "lambda": self.lam}
        for name in TRAINABLE:
            if name == "kernels":
                out[name] = [matrix_to_json(k) for k in self.kernels]
            else:
                out[name] = matrix_to_json(getattr(self, name))
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ColinAdapter":
        if obj.get("format") != FORMAT_TAG:
            raise ValueError(f"not a {FORMAT_TAG} document (format={obj.get('format')!r})")
        kw = {}
        for name in TRAINABLE:
            if name == "kernels":
                kw[name] = np.stack([matrix_from_json(k) for k in obj[name]])
            elif name in ("b_down", "b_up", "dw_bias"):
                kw[name] = matrix_from_json(obj[name]).ravel()
            else:
                kw[name] = matrix_from_json(obj[name])
        adapter = cls(lam=float(obj.get("lambda", DEFAULT_LAMBDA)), **kw)
        dims = (adapter.d, adapter.h, adapter.beta, adapter.alpha)
        if dims != (obj["d"], obj["h"], obj["beta"], obj["alpha"]):
            raise ShapeError(f"header dims {obj['d'], obj['h'], obj['beta'], obj['alpha']} "
                             f"disagree with matrices {dims}")
        return adapter


@dataclass
class AdapterGradients:
    p_down: np.ndarray
    q_down: np.ndarray
    p_up: np.ndarray
    q_up: np.ndarray
    kernels: np.ndarray
    b_down: np.ndarray
    b_up: np.ndarray
    dw_kernel: np.ndarray
    dw_bias: np.ndarray
    d_input: np.ndarray | None = None

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TRAINABLE}

    @classmethod
    def zeros_like(cls, adapter: ColinAdapter) -> "AdapterGradients":
        return cls(**{k: np.zeros_like(v) for k, v in adapter.params().items()})


@dataclass
class ForwardCache:
    x: np.ndarray
    w_down: np.ndarray
    w_up: np.ndarray
    z: np.ndarray  # x W_D^T + b_D
    c: np.ndarray  # dwconv(z)
    a: np.ndarray  # gelu(c)
    dims: tuple = field(default=())


@dataclass
class FusedAdapter:
    """Inference form: dense weights with the branches already summed."""

    w_down: np.ndarray
    w_up: np.ndarray
    b_down: np.ndarray
    b_up: np.ndarray
    dw_kernel: np.ndarray
    dw_bias: np.ndarray

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.w_down.shape[1]:
            raise ShapeError(f"input has {x.shape[-1]} features, adapter expects {self.w_down.shape[1]}")
        hidden = gelu(dwconv(x @ self.w_down.T + self.b_down, self.dw_kernel, self.dw_bias))
        return x + hidden @ self.w_up.T + self.b_up

    def to_json(self) -> dict:
        h, d = self.w_down.shape
        out = {"format": FUSED_FORMAT_TAG, "d": d, "h": h}
        for f in fields(self):
            out[f.name] = matrix_to_json(getattr(self, f.name))
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "FusedAdapter":
        if obj.get("format") != FUSED_FORMAT_TAG:
            raise ValueError(f"not a {FUSED_FORMAT_TAG} document")
        kw = {}
        for f in fields(cls):
            m = matrix_from_json(obj[f.name])
            kw[f.name] = m.ravel() if f.name in ("b_down", "b_up", "dw_bias") else m
        return cls(**kw)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def compose_weight(p, kernels, q) -> np.ndarray:
    """Return ``sum_i p^T K_i q`` for ``p`` (beta x m), ``q`` (beta x n).

    ``kernels`` may be a single ``beta x beta`` matrix or a stack / list of
    them.  Since ``p`` and ``q`` are shared the sum is taken over the kernels
    first, which costs one product instead of ``alpha``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    ks = np.asarray(kernels, dtype=np.float64)
    if ks.ndim == 2:
        ks = ks[None]
    if p.ndim != 2 or q.ndim != 2 or ks.ndim != 3:
        raise ShapeError("compose_weight expects 2-D factors and beta x beta kernels")
    beta = p.shape[0]
    if q.shape[0] != beta or ks.shape[1:] != (beta, beta):
        raise ShapeError(f"factor/kernel mismatch: p {p.shape}, q {q.shape}, kernels {ks.shape}")
    return p.T @ ks.sum(axis=0) @ q


def compose_weight_backward(p, kernels, q, g):
    """Gradients of ``<G, sum_i p^T K_i q>`` w.r.t. ``p``, each ``K_i`` and ``q``.

    ``dp = (sum K_i) q G^T``, ``dq = (sum K_i)^T p G`` and ``dK_i = p G q^T``
    (the same for every branch).  ``p`` and ``q`` accumulate over branches.
    """
    ks = np.asarray(kernels, dtype=np.float64)
    if ks.ndim == 2:
        ks = ks[None]
    k_sum = ks.sum(axis=0)
    dk = p @ g @ q.T
    return k_sum @ q @ g.T, np.broadcast_to(dk, ks.shape).copy(), k_sum.T @ p @ g


def adapter_forward(adapter: ColinAdapter, x) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError(f"input must be (tokens, d) or batched, got shape {x.shape}")
    if x.shape[-1] != adapter.d:
        raise ShapeError(f"input has {x.shape[-1]} features, adapter expects d={adapter.d}")
    w_down = adapter.down_weight()
    w_up = adapter.up_weight()
    z = x @ w_down.T + adapter.b_down
    c = dwconv(z, adapter.dw_kernel, adapter.dw_bias)
    a = gelu(c)
    y = x + a @ w_up.T + adapter.b_up
    dims = (adapter.d, adapter.h, adapter.beta, adapter.alpha)
    return y, ForwardCache(x=x, w_down=w_down, w_up=w_up, z=z, c=c, a=a, dims=dims)


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def adapter_backward(adapter: ColinAdapter, cache: ForwardCache, d_y) -> AdapterGradients:
    """Analytic gradients given the upstream gradient ``d_y``.

    The kernel gradient is the sum of the down- and up-projection
    contributions since both projections use the same ``K_i``.
    """
    dims = (adapter.d, adapter.h, adapter.beta, adapter.alpha)
    if cache.dims != dims:
        raise ShapeError(f"cache built for adapter dims {cache.dims}, got {dims}")
    d_y = np.asarray(d_y, dtype=np.float64)
    if d_y.shape != cache.x.shape:
        raise ShapeError(f"d_y shape {d_y.shape} does not match input shape {cache.x.shape}")

    lead = tuple(range(d_y.ndim - 1))
    d_b_up = d_y.sum(axis=lead)
    g_up = _flat(d_y).T @ _flat(cache.a)              # d x h
    d_a = d_y @ cache.w_up
    d_c = d_a * gelu_grad(cache.c)
    d_z, d_dw_kernel, d_dw_bias = dwconv_backward(cache.z, adapter.dw_kernel, d_c)
    d_b_down = d_z.sum(axis=lead)
    g_down = _flat(d_z).T @ _flat(cache.x)            # h x d
    d_x = d_y + d_z @ cache.w_down

    d_p_down, d_k_down, d_q_down = compose_weight_backward(
        adapter.p_down, adapter.kernels, adapter.q_down, g_down)
    d_p_up, d_k_up, d_q_up = compose_weight_backward(
        adapter.p_up, adapter.kernels, adapter.q_up, g_up)
    d_kernels = d_k_down + d_k_up

    return AdapterGradients(
        p_down=d_p_down, q_down=d_q_down, p_up=d_p_up, q_up=d_q_up, kernels=d_kernels,
        b_down=d_b_down, b_up=d_b_up, dw_kernel=d_dw_kernel, dw_bias=d_dw_bias, d_input=d_x,
    )


def gram_penalty(f: np.ndarray) -> tuple[float, np.ndarray]:
    """``||F F^T - I||_F^2`` and its gradient ``4 (F F^T - I) F``."""
    e = f @ f.T - np.eye(f.shape[0])
    return float(np.sum(e * e)), 4.0 * e @ f


def orthogonal_loss(adapter: ColinAdapter) -> tuple[float, dict[str, np.ndarray]]:
    """Sum of the row-Gram penalties of the four factor matrices."""
    total = 0.0
    grads = {}
    for name in FACTORS:
        loss, g = gram_penalty(getattr(adapter, name))
        total += loss
        grads[name] = g
    return total, grads


def composite_loss(task_loss: float, task_grads: Sequence[AdapterGradients],
                   adapters: Sequence[ColinAdapter], lam: float = DEFAULT_LAMBDA):
    """``L0 + lam * sum(orthogonal_loss)`` with gradients merged per adapter.

    Returns ``(total, ortho_sum, merged)`` where ``merged`` holds fresh
    gradient objects; the inputs are left untouched.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if len(task_grads) != len(adapters):
        raise ValueError("need one gradient set per adapter")
    ortho_sum = 0.0
    merged = []
    for g, ad in zip(task_grads, adapters):
        loss, og = orthogonal_loss(ad)
        ortho_sum += loss
        new = replace(g, **{k: v.copy() for k, v in g.params().items()})
        if lam != 0.0:
            for name in FACTORS:
                setattr(new, name, getattr(new, name) + lam * og[name])
        merged.append(new)
    return task_loss + lam * ortho_sum, ortho_sum, merged


def svd_init(adapter: ColinAdapter, rng: Rng) -> ColinAdapter:
    """Orthogonal start from truncated SVDs of kaiming-uniform draws.

    The down direction draws ``W0`` of shape ``h x d``: its top-``beta`` left
    and right singular vectors become the rows of ``p_down`` and ``q_down``,
    and ``diag(top singular values)`` seeds every kernel.  The up direction
    draws ``d x h`` and sets only ``p_up``/``q_up``.  Biases are zeroed and
    the depth-wise conv starts as the identity.
    """
    d, h, beta, alpha = adapter.d, adapter.h, adapter.beta, adapter.alpha
    down = svd(kaiming_uniform(h, d, rng))
    up = svd(kaiming_uniform(d, h, rng))
    kernel = np.diag(down.s[:beta])
    return replace(
        adapter,
        p_down=down.u[:, :beta].T.copy(), q_down=down.v[:, :beta].T.copy(),
        p_up=up.u[:, :beta].T.copy(), q_up=up.v[:, :beta].T.copy(),
        kernels=np.repeat(kernel[None], alpha, axis=0),
        b_down=np.zeros(h), b_up=np.zeros(d),
        dw_kernel=identity_dw_kernel(h), dw_bias=np.zeros(h),
    )


def random_factor_init(adapter: ColinAdapter, rng: Rng, kernel_scale: float = 1e-2) -> ColinAdapter:
    """Plain random start: kaiming-uniform factors, kernels ``kernel_scale * I``."""
    d, h, beta, alpha = adapter.d, adapter.h, adapter.beta, adapter.alpha
    return replace(
        adapter,
        p_down=kaiming_uniform(beta, h, rng), q_down=kaiming_uniform(beta, d, rng),
        p_up=kaiming_uniform(beta, d, rng), q_up=kaiming_uniform(beta, h, rng),
        kernels=np.repeat((kernel_scale * np.eye(beta))[None], alpha, axis=0),
        b_down=np.zeros(h), b_up=np.zeros(d),
        dw_kernel=identity_dw_kernel(h), dw_bias=np.zeros(h),
    )


def fuse(adapter: ColinAdapter) -> FusedAdapter:
    return FusedAdapter(
        w_down=adapter.down_weight(), w_up=adapter.up_weight(),
        b_down=adapter.b_down.copy(), b_up=adapter.b_up.copy(),
        dw_kernel=adapter.dw_kernel.copy(), dw_bias=adapter.dw_bias.copy(),
    )


@dataclass(frozen=True)
class ParamCount:
    colin: int
    dense_baseline: int
    reduction: Fraction
    factor_reduction: Fraction  # kernels left out, as in the 768/8 example


def param_count(d: int, h: int, beta: int, alpha: int = 0, gamma: int = 1) -> ParamCount:
    """Weight-parameter counts for ``gamma`` projections of shape ``d x h``.

    ``colin = gamma*beta*(d+h) + alpha*beta^2`` against a dense
    ``gamma*d*h``; biases are not counted.  ``alpha=0`` counts factors only.
    Reductions are exact fractions and are not clamped.
    """
    for name, v in (("d", d), ("h", h), ("beta", beta), ("gamma", gamma)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    factors = gamma * beta * (d + h)
    colin = factors + alpha * beta * beta
    dense = gamma * d * h
    return ParamCount(
        colin=colin, dense_baseline=dense,
        reduction=1 - Fraction(colin, dense),
        factor_reduction=1 - Fraction(factors, dense),
    )


def adapter_param_total(adapters: Iterable[ColinAdapter]) -> int:
    return sum(a.num_params() for a in adapters)
