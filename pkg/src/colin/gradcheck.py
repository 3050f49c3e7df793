"""Finite-difference oracles and first-order update experiments.

``fd_gradient`` is the reference every hand-written backward pass in the
package is checked against.  ``delta_w_experiment`` and
``orthogonality_efficiency_probe`` measure how a factored weight ``W = P Q``
actually moves under one gradient step on ``P`` and ``Q`` and compare it with
the first-order prediction ``-eta (G Q^T Q + P P^T G)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from .core import ColinAdapter, adapter_backward, adapter_forward, orthogonal_loss
from .linalg import Rng, frobenius_norm, kaiming_uniform, svd

DEFAULT_REL_STEP = 1e-6
DEFAULT_ETAS = (1e-3, 5e-4, 2.5e-4)


class NonFiniteError(FloatingPointError):
    def __init__(self, name: str, index: int):
        super().__init__(f"non-finite function value perturbing {name}[{index}]")
        self.name = name
        self.index = index


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def fd_gradient(f: Callable[[], float], params: Mapping[str, np.ndarray],
                rel_step: float = DEFAULT_REL_STEP, order: int = 2) -> dict[str, np.ndarray]:
    """Central differences of ``f`` w.r.t. every entry of every array in ``params``.

    ``f`` takes no arguments and reads the arrays in place; each coordinate is
    perturbed by ``h = rel_step * max(1, |theta|)`` and restored exactly.
    ``order=4`` uses the five-point stencil
    ``(-f(+2h) + 8 f(+h) - 8 f(-h) + f(-2h)) / 12h``.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"{name} must be contiguous so it can be perturbed in place")
        for i in range(flat.size):
            orig = flat[i]
            h = rel_step * max(1.0, abs(orig))
            offsets = (1, -1) if order == 2 else (2, 1, -1, -2)
            vals = []
            for o in offsets:
                flat[i] = orig + o * h
                vals.append(f())
            flat[i] = orig
            if not all(math.isfinite(v) for v in vals):
                raise NonFiniteError(name, i)
            if order == 2:
                g.reshape(-1)[i] = (vals[0] - vals[1]) / (2.0 * h)
            else:
                g.reshape(-1)[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12.0 * h)
        grads[name] = g
    return grads


@dataclass
class FdReport:
    max_rel_error: dict[str, float]
    rel_step: float
    tol: float
    passed: dict[str, bool] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def to_json(self) -> dict:
        return asdict(self) | {"ok": self.ok}


def compare(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray],
            tol: float, rel_step: float = DEFAULT_REL_STEP, floor: float = 1e-8) -> FdReport:
    errs = {k: float(relative_error(analytic[k], numeric[k], floor).max(initial=0.0))
            for k in numeric}
    return FdReport(errs, rel_step, tol, {k: v <= tol for k, v in errs.items()})


def check_adapter(adapter: ColinAdapter, x: np.ndarray, upstream: np.ndarray,
                  tol: float = 1e-5, rel_step: float = DEFAULT_REL_STEP,
                  order: int = 2, floor: float = 1e-8) -> FdReport:
    """Gradcheck of the adapter block under the loss ``sum(y * upstream)``.

    Covers every trainable array, the input, and the orthogonal loss.
    """
    adapter = adapter.copy()
    x = np.array(x, dtype=np.float64)

    def task():
        y, _ = adapter_forward(adapter, x)
        return float(np.sum(y * upstream))

    _, cache = adapter_forward(adapter, x)
    grads = adapter_backward(adapter, cache, upstream)
    analytic = dict(grads.params())
    analytic["d_input"] = grads.d_input
    numeric = fd_gradient(task, adapter.params() | {"d_input": x}, rel_step, order)

    _, ortho_grads = orthogonal_loss(adapter)
    ortho_numeric = fd_gradient(lambda: orthogonal_loss(adapter)[0],
                                {k: getattr(adapter, k) for k in ortho_grads}, rel_step, order)
    for k in ortho_grads:
        analytic[f"ortho_{k}"] = ortho_grads[k]
        numeric[f"ortho_{k}"] = ortho_numeric[k]
    return compare(analytic, numeric, tol, rel_step, floor)


def gradcheck_suite(configs, tol: float = 1e-5, rel_step: float = DEFAULT_REL_STEP,
                    order: int = 2, floor: float = 1e-8) -> list[tuple[dict, FdReport]]:
    """Run ``check_adapter`` for each ``dict(seed, d, h, beta, alpha, tokens)``."""
    out = []
    for cfg in configs:
        rng = Rng(cfg["seed"])
        ad = ColinAdapter.random(cfg["d"], cfg["h"], cfg["beta"], cfg["alpha"], rng)
        x = rng.normal((cfg["tokens"], cfg["d"]))
        g = rng.normal((cfg["tokens"], cfg["d"]))
        out.append((dict(cfg), check_adapter(ad, x, g, tol, rel_step, order, floor)))
    return out


# the ten configurations used by the acceptance suite and `gradcheck` CLI
GRADCHECK_CONFIGS = [
    dict(seed=5, d=8, h=6, beta=3, alpha=2, tokens=4),
    dict(seed=20, d=12, h=8, beta=4, alpha=3, tokens=4),
    dict(seed=12, d=4, h=4, beta=2, alpha=1, tokens=1),
    dict(seed=13, d=6, h=3, beta=3, alpha=2, tokens=3),
    dict(seed=14, d=10, h=7, beta=1, alpha=3, tokens=2),
    dict(seed=15, d=5, h=8, beta=4, alpha=1, tokens=4),
    dict(seed=16, d=12, h=2, beta=2, alpha=2, tokens=4),
    dict(seed=17, d=9, h=5, beta=2, alpha=3, tokens=3),
    dict(seed=18, d=7, h=6, beta=4, alpha=2, tokens=2),
    dict(seed=19, d=3, h=3, beta=1, alpha=1, tokens=4),
]


# ---------------------------------------------------------------------------
# first-order update analysis
# ---------------------------------------------------------------------------

def factor_step(p: np.ndarray, q: np.ndarray, target: np.ndarray, eta: float):
    """One simultaneous step on ``L = ||target - P Q||_F^2 / 2``.

    Returns ``(P', Q', G, gP, gQ)`` with ``G = dL/dW = P Q - target``.
    """
    g = p @ q - target
    gp = g @ q.T
    gq = p.T @ g
    return p - eta * gp, q - eta * gq, g, gp, gq


def predicted_delta(p: np.ndarray, q: np.ndarray, g: np.ndarray, eta: float) -> np.ndarray:
    return -eta * (g @ q.T @ q + p @ p.T @ g)


@dataclass
class DeltaWReport:
    eta: float
    residual: float          # ||dW_actual - dW_pred|| / ||dW_actual||
    abs_residual: float      # ||dW_actual - dW_pred||
    second_order_bound: float  # eta^2 ||gP|| ||gQ||
    bound_ratio: float       # abs_residual / second_order_bound
    slope: float = float("nan")  # log-log slope of residual vs eta over the sweep
    two_eta_residual: float | None = None  # ||dW + 2 eta G||, square orthonormal case
    two_eta_bound: float | None = None     # eta^2 ||G||^2

    def to_json(self) -> dict:
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                for k, v in asdict(self).items()}


def random_orthogonal(n: int, rng: Rng) -> np.ndarray:
    r = svd(kaiming_uniform(n, n, rng))
    return r.u @ r.v.T


def delta_w_experiment(m: int, k: int, n: int, etas=DEFAULT_ETAS, seed: int = 0,
                       orthonormal: bool = False, p=None, q=None, target=None) -> list[DeltaWReport]:
    """Measure ``P'Q' - PQ`` against the first-order prediction over an eta sweep.

    With ``orthonormal=True`` (requires ``m == k == n``) ``P`` and ``Q`` are
    random orthogonal matrices, so the prediction reduces to ``-2 eta G`` and
    the reports also carry that residual.  Explicit ``p``, ``q``, ``target``
    override the random draws.
    """
    rng = Rng(seed)
    if target is None:
        target = kaiming_uniform(m, n, rng)
    if p is None or q is None:
        if orthonormal:
            if not m == k == n:
                raise ValueError("orthonormal case needs m == k == n")
            p, q = random_orthogonal(m, rng), random_orthogonal(m, rng)
        else:
            p, q = kaiming_uniform(m, k, rng), kaiming_uniform(k, n, rng)
    square_orth = (np.allclose(p.T @ p, np.eye(k), atol=1e-10) and
                   np.allclose(q @ q.T, np.eye(k), atol=1e-10) and m == k == n)

    reports = []
    for eta in etas:
        p1, q1, g, gp, gq = factor_step(p, q, target, eta)
        actual = p1 @ q1 - p @ q
        err = frobenius_norm(actual - predicted_delta(p, q, g, eta))
        denom = frobenius_norm(actual)
        bound = eta * eta * frobenius_norm(gp) * frobenius_norm(gq)
        rep = DeltaWReport(
            eta=float(eta),
            residual=err / denom if denom > 0 else 0.0,
            abs_residual=err,
            second_order_bound=bound,
            bound_ratio=err / bound if bound > 0 else 0.0,
        )
        if square_orth:
            rep.two_eta_residual = frobenius_norm(actual + 2.0 * eta * g)
            rep.two_eta_bound = eta * eta * frobenius_norm(g) ** 2
        reports.append(rep)

    if len(reports) >= 2:
        le = np.log([r.eta for r in reports])
        lr = np.array([r.residual for r in reports])
        if np.all(lr > 0):
            slope = float(np.polyfit(le, np.log(lr), 1)[0])
            for r in reports:
                r.slope = slope
    return reports


def halving_ratios(reports: list[DeltaWReport]) -> list[float]:
    """residual(eta_{i+1}) / residual(eta_i) for consecutive sweep points."""
    return [b.residual / a.residual for a, b in zip(reports, reports[1:]) if a.residual > 0]


@dataclass
class EfficiencyCase:
    label: str
    d_loss: float            # L(P', Q') - L(P, Q)
    d_loss_predicted: float  # -eta tr(G^T (G Q^T Q + P P^T G))
    identity_residual: float  # |d_loss - predicted| / |predicted|
    ideal: float             # -2 eta ||G||^2


def orthogonality_efficiency_probe(m: int, k: int, n: int, seed: int = 0,
                                   eta: float = 1e-3, ill_factor: float = 10.0) -> dict:
    """Single-step loss decrease for orthonormal versus badly scaled factors.

    Both cases share the same product ``P Q`` (the ill-conditioned pair is
    ``(c P, Q / c)``) and the same target, so ``G`` is identical and any
    difference in ``d_loss`` comes from the factor geometry alone.
    """
    if k > min(m, n):
        raise ValueError("k must not exceed min(m, n)")
    rng = Rng(seed)
    target = kaiming_uniform(m, n, rng)
    p = svd(kaiming_uniform(m, k, rng)).u                  # orthonormal columns
    q = svd(kaiming_uniform(k, n, rng)).v.T                # orthonormal rows
    cases = {"orthonormal": (p, q), "ill_conditioned": (ill_factor * p, q / ill_factor)}

    def loss(pp, qq):
        r = pp @ qq - target
        return 0.5 * float(np.sum(r * r))

    out = {"m": m, "k": k, "n": n, "seed": seed, "eta": eta}
    for label, (pp, qq) in cases.items():
        p1, q1, g, _, _ = factor_step(pp, qq, target, eta)
        d_loss = loss(p1, q1) - loss(pp, qq)
        pred = -eta * float(np.sum(g * (g @ qq.T @ qq + pp @ pp.T @ g)))
        out[label] = EfficiencyCase(
            label=label,
            d_loss=d_loss,
            d_loss_predicted=pred,
            identity_residual=abs(d_loss - pred) / abs(pred) if pred != 0 else abs(d_loss),
            ideal=-2.0 * eta * frobenius_norm(g) ** 2,
        )
    return out
