import math
from dataclasses import replace

import numpy as np
import pytest

from colin.linalg import Rng, kaiming_uniform
from colin.simulate import (
    SimConfig,
    SimTrace,
    SimulationDiverged,
    aggregate,
    compare_sizes,
    descend,
    gaps_from_trace_csv,
    initial_state,
    run_sim,
    run_sim_single,
)

SMALL = SimConfig(m=8, k=3, n=12, lr=1e-2, iters=50, seeds=3)


def scalar_oracle(w, p, q, lr, iters, ol):
    out = []
    for t in range(iters):
        out.append(abs(w - p * q))
        if t == iters - 1:
            break
        r = w - p * q
        gp = -2 * q * r + ol * 4 * (p * p - 1) * p
        gq = -2 * p * r + ol * 4 * (q * q - 1) * q
        p, q = p - lr * gp, q - lr * gq
    return out


@pytest.mark.parametrize("with_ol", [True, False])
def test_scalar_oracle(with_ol):
    cfg = SimConfig(m=1, k=1, n=1, lr=0.05, iters=40, seeds=1, ol_weight=0.7)
    w, p, q = (float(a[0, 0]) for a in initial_state(cfg, 4))
    want = scalar_oracle(w, p, q, cfg.lr, cfg.iters, 0.7 if with_ol else 0.0)
    got = run_sim_single(cfg, 4, with_ol).losses
    np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-15)


def test_initial_state_draw_order():
    cfg = SimConfig(m=4, k=2, n=5)
    rng = Rng(9)
    w, p, q = initial_state(cfg, 9)
    assert np.array_equal(w, kaiming_uniform(4, 5, rng))
    assert np.array_equal(p, kaiming_uniform(2, 4, rng))
    assert np.array_equal(q, kaiming_uniform(2, 5, rng))


def test_planted_optimum():
    rng = Rng(1)
    p, q = rng.normal((3, 6)), rng.normal((3, 9))
    w = p.T @ q
    _, losses = descend(w, p, q, 1e-3, 20)
    assert losses[0] <= 1e-12
    assert np.all(losses <= losses[0] + 1e-12)


def test_arm_pairing_with_zero_weight():
    cfg = replace(SMALL, ol_weight=0.0)
    a = run_sim_single(cfg, 2, True)
    b = run_sim_single(cfg, 2, False)
    assert np.array_equal(a.losses, b.losses)
    assert (a.arm, b.arm) == ("with_OL", "without_OL")


def test_arms_differ_with_ol():
    a = run_sim_single(SMALL, 2, True)
    b = run_sim_single(SMALL, 2, False)
    assert a.losses[0] == b.losses[0]
    assert not np.array_equal(a.losses, b.losses)


def test_recording_schedule():
    cfg = replace(SMALL, iters=10, record_every=4)
    assert cfg.recorded_iters() == [0, 4, 8, 9]
    tr = run_sim_single(cfg, 0, True)
    full = run_sim_single(replace(cfg, record_every=1), 0, True)
    assert tr.iters == [0, 4, 8, 9]
    assert np.array_equal(tr.losses, full.losses[[0, 4, 8, 9]])


def test_determinism():
    s1, s2 = run_sim(SMALL), run_sim(SMALL)
    assert s1.trace_csv() == s2.trace_csv()
    assert s1.summary_csv() == s2.summary_csv()


def test_single_seed_aggregation():
    s = run_sim(replace(SMALL, seeds=1))
    for arm in ("with_OL", "without_OL"):
        assert np.array_equal(s.mean[arm], s.min[arm])
        assert np.array_equal(s.mean[arm], s.max[arm])


def test_aggregation_of_hand_made_traces():
    traces = [
        SimTrace("with_OL", 0, [0, 1], np.array([3.0, 1.0])),
        SimTrace("with_OL", 1, [0, 1], np.array([5.0, 2.0])),
        SimTrace("with_OL", 2, [0, 1], np.array([4.0, 6.0])),
        SimTrace("without_OL", 2, [0, 1], np.array([1.0, 1.0])),
    ]
    s = aggregate(list(reversed(traces)), SMALL)
    assert s.mean["with_OL"].tolist() == [4.0, 3.0]
    assert s.min["with_OL"].tolist() == [3.0, 1.0]
    assert s.max["with_OL"].tolist() == [5.0, 6.0]
    assert s.mean["without_OL"].tolist() == [1.0, 1.0]
    assert [t.seed for t in s.traces[:3]] == [0, 1, 2]


def test_summary_invariants_and_csv():
    s = run_sim(SMALL)
    for arm in s.mean:
        assert np.all(s.min[arm] <= s.mean[arm]) and np.all(s.mean[arm] <= s.max[arm])
        assert np.all(np.isfinite(s.mean[arm])) and np.all(s.min[arm] >= 0)
    lines = s.trace_csv().splitlines()
    assert lines[0] == "arm,seed,iter,loss"
    assert len(lines) == 1 + 2 * SMALL.seeds * SMALL.iters
    summary = s.summary_csv().splitlines()
    assert summary[0] == "iter,arm,mean,min,max"
    assert len(summary) == 1 + 2 * SMALL.iters


def test_gap_recomputed_from_csv():
    report, sums = compare_sizes(SMALL, [12])
    assert len(report) == 1 and report[0]["n"] == 12
    assert gaps_from_trace_csv(sums[12].trace_csv()) == pytest.approx(report[0]["gap"], rel=1e-12)


def test_compare_sizes_rejects_small_n():
    with pytest.raises(ValueError):
        compare_sizes(SMALL, [2])


@pytest.mark.parametrize("kw", [dict(k=20), dict(lr=0.0), dict(seeds=0), dict(iters=0),
                                dict(ol_weight=-1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        replace(SMALL, **kw)


def test_divergence_reports_iteration_and_seed():
    cfg = replace(SMALL, lr=10.0, iters=200)
    with pytest.raises(SimulationDiverged) as info:
        with np.errstate(over="ignore", invalid="ignore"):
            run_sim_single(cfg, 3, False)
    assert info.value.seed == 3 and info.value.arm == "without_OL"
    assert 0 < info.value.iteration < 200


@pytest.mark.slow
def test_full_size_smoke_monotone():
    cfg = SimConfig(seeds=1)
    for with_ol in (True, False):
        losses = run_sim_single(cfg, 0, with_ol).losses
        assert math.isfinite(losses[-1]) and losses[-1] < losses[0]
        for start in range(0, cfg.iters - 100, 100):
            assert losses[start + 100] <= 1.01 * losses[start]
