"""Gradient-descent approximation of a random matrix by ``P^T Q``.

Two arms share every random draw: one descends ``||W - P^T Q||_F^2`` alone,
the other adds ``ol_weight * (||P P^T - I||_F^2 + ||Q Q^T - I||_F^2)``.
The recorded loss is always the unsquared approximation error
``||W - P^T Q||_F`` so the arms stay comparable.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import Rng, kaiming_uniform

ARMS = ("with_OL", "without_OL")


class SimulationDiverged(FloatingPointError):
    def __init__(self, iteration: int, seed: int | None = None, arm: str | None = None):
        where = f"iteration {iteration}"
        if seed is not None:
            where += f", seed {seed}"
        if arm is not None:
            where += f", arm {arm}"
        super().__init__(f"non-finite loss at {where}")
        self.iteration = iteration
        self.seed = seed
        self.arm = arm


@dataclass(frozen=True)
class SimConfig:
    m: int = 100
    k: int = 30
    n: int = 5000
    lr: float = 1e-5
    iters: int = 2000
    seeds: int = 20
    ol_weight: float = 1.0
    record_every: int = 1
    seed_offset: int = 0

    def __post_init__(self):
        if min(self.m, self.k, self.n) < 1:
            raise ValueError("m, k, n must be positive")
        if self.k > min(self.m, self.n):
            raise ValueError(f"k={self.k} exceeds min(m, n)={min(self.m, self.n)}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.iters < 1 or self.seeds < 1 or self.record_every < 1:
            raise ValueError("iters, seeds and record_every must be >= 1")
        if self.ol_weight < 0:
            raise ValueError("ol_weight must be non-negative")

    def seed_list(self) -> list[int]:
        return [self.seed_offset + s for s in range(self.seeds)]

    def recorded_iters(self) -> list[int]:
        its = list(range(0, self.iters, self.record_every))
        if its[-1] != self.iters - 1:
            its.append(self.iters - 1)
        return its


@dataclass
class SimTrace:
    arm: str
    seed: int
    iters: list[int]
    losses: np.ndarray


def initial_state(cfg: SimConfig, seed: int):
    """Target ``W`` (m x n) and starting ``P`` (k x m), ``Q`` (k x n) for a seed."""
    rng = Rng(seed)
    w = kaiming_uniform(cfg.m, cfg.n, rng)
    p = kaiming_uniform(cfg.k, cfg.m, rng)
    q = kaiming_uniform(cfg.k, cfg.n, rng)
    return w, p, q


def descend(w: np.ndarray, p: np.ndarray, q: np.ndarray, lr: float, iters: int,
            ol_weight: float = 0.0, record=None) -> tuple[list[int], np.ndarray]:
    """Full-gradient descent from ``(p, q)``.

    Iteration ``t`` evaluates ``||W - P^T Q||_F`` at the current factors, then
    (unless it is the last iteration) takes one step.  Returns the recorded
    iteration indices and losses.
    """
    record = set(range(iters)) if record is None else set(record)
    p = p.copy()
    q = q.copy()
    eye = np.eye(p.shape[0])
    its, losses = [], []
    for t in range(iters):
        r = w - p.T @ q
        if t in record:
            loss = math.sqrt(float(np.sum(r * r)))
            if not math.isfinite(loss):
                raise SimulationDiverged(t)
            its.append(t)
            losses.append(loss)
        if t == iters - 1:
            break
        gp = -2.0 * (q @ r.T)
        gq = -2.0 * (p @ r)
        if ol_weight:
            gp += ol_weight * 4.0 * ((p @ p.T - eye) @ p)
            gq += ol_weight * 4.0 * ((q @ q.T - eye) @ q)
        p -= lr * gp
        q -= lr * gq
    return its, np.asarray(losses)


def run_sim_single(cfg: SimConfig, seed: int, with_ol: bool, init=None) -> SimTrace:
    w, p, q = initial_state(cfg, seed) if init is None else init
    arm = ARMS[0] if with_ol else ARMS[1]
    try:
        its, losses = descend(w, p, q, cfg.lr, cfg.iters,
                              cfg.ol_weight if with_ol else 0.0, cfg.recorded_iters())
    except SimulationDiverged as exc:
        raise SimulationDiverged(exc.iteration, seed, arm) from None
    return SimTrace(arm, seed, its, losses)


@dataclass
class SimSummary:
    config: SimConfig
    iters: list[int]
    mean: dict[str, np.ndarray]
    min: dict[str, np.ndarray]
    max: dict[str, np.ndarray]
    traces: list[SimTrace] = field(default_factory=list, repr=False)

    def final_mean(self, arm: str) -> float:
        return float(self.mean[arm][-1])

    @property
    def final_gap(self) -> float:
        """Relative final-loss improvement of the OL arm: (noOL - OL) / noOL."""
        no, ol = self.final_mean("without_OL"), self.final_mean("with_OL")
        return (no - ol) / no

    def trace_csv(self) -> str:
        return traces_to_csv(self.traces)

    def summary_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["iter", "arm", "mean", "min", "max"])
        for i, it in enumerate(self.iters):
            for arm in ARMS:
                wr.writerow([it, arm, repr(float(self.mean[arm][i])),
                             repr(float(self.min[arm][i])), repr(float(self.max[arm][i]))])
        return buf.getvalue()


def traces_to_csv(traces: list[SimTrace]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["arm", "seed", "iter", "loss"])
    for tr in traces:
        for it, loss in zip(tr.iters, tr.losses):
            wr.writerow([tr.arm, tr.seed, it, repr(float(loss))])
    return buf.getvalue()


def aggregate(traces: list[SimTrace], cfg: SimConfig) -> SimSummary:
    """Per-iteration mean/min/max across seeds, for each arm.

    Traces are reduced in (arm, seed) order so the result does not depend on
    the order runs finished in.
    """
    traces = sorted(traces, key=lambda t: (ARMS.index(t.arm), t.seed))
    iters = traces[0].iters
    mean, lo, hi = {}, {}, {}
    for arm in ARMS:
        rows = [t.losses for t in traces if t.arm == arm]
        if not rows:
            continue
        stack = np.vstack(rows)
        mean[arm] = stack.mean(axis=0)
        lo[arm] = stack.min(axis=0)
        hi[arm] = stack.max(axis=0)
    return SimSummary(cfg, list(iters), mean, lo, hi, traces)


def run_sim(cfg: SimConfig, progress=None) -> SimSummary:
    """Both arms over every seed, paired on identical initial draws."""
    traces = []
    for seed in cfg.seed_list():
        init = initial_state(cfg, seed)
        for with_ol in (True, False):
            traces.append(run_sim_single(cfg, seed, with_ol, init=init))
        if progress is not None:
            progress(seed)
    return aggregate(traces, cfg)


def compare_sizes(base: SimConfig, n_values, progress=None) -> tuple[list[dict], dict[int, SimSummary]]:
    """Relative final-loss gap ``(noOL - OL) / noOL`` for each ``n``."""
    report, summaries = [], {}
    for n in n_values:
        if n < base.k:
            raise ValueError(f"n={n} is smaller than k={base.k}")
        summary = run_sim(replace(base, n=int(n)), progress)
        summaries[int(n)] = summary
        report.append({"n": int(n), "gap": summary.final_gap})
    return report, summaries


def gaps_from_trace_csv(text: str) -> float:
    """Recompute the final relative gap from a long-format trace CSV."""
    rows = list(csv.DictReader(io.StringIO(text)))
    last = max(int(r["iter"]) for r in rows)
    finals: dict[str, list[float]] = {arm: [] for arm in ARMS}
    for r in rows:
        if int(r["iter"]) == last:
            finals[r["arm"]].append(float(r["loss"]))
    no, ol = np.mean(finals["without_OL"]), np.mean(finals["with_OL"])
    return float((no - ol) / no)
