"""``colin`` command line: experiments, checks, fusion and parameter counts.

Every subcommand prints its resolved configuration as one JSON line before
running.  Values come from built-in defaults, then ``--config`` (a JSON
object), then explicit flags.  Exit codes: 0 ok, 1 runtime/IO or failed
check, 2 usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import backbone, gradcheck, simulate
from .core import ColinAdapter, FusedAdapter, adapter_forward, fuse, param_count, svd_init
from .linalg import Rng

log = logging.getLogger("colin")

FUSE_TOL = 1e-10
FUSE_PROBES = 8


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

SIM_DEFAULTS = dict(m=100, k=30, n=5000, lr=1e-5, iters=2000, seeds=20, ol_weight=1.0,
                    record_every=1, seed=0, n_values=None, out="sim_out")


def cmd_simulate(cfg: dict) -> int:
    base = simulate.SimConfig(m=cfg["m"], k=cfg["k"], n=cfg["n"], lr=cfg["lr"],
                              iters=cfg["iters"], seeds=cfg["seeds"],
                              ol_weight=cfg["ol_weight"], record_every=cfg["record_every"],
                              seed_offset=cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    n_values = cfg["n_values"] or [base.n]
    progress = lambda s: log.info("seed %d done", s)  # noqa: E731
    report, summaries = simulate.compare_sizes(base, n_values, progress)
    for n, summary in summaries.items():
        suffix = "" if len(summaries) == 1 else f"_n{n}"
        (out / f"trace{suffix}.csv").write_text(summary.trace_csv())
        (out / f"summary{suffix}.csv").write_text(summary.summary_csv())
        print(f"n={n} final mean loss: with_OL={summary.final_mean('with_OL')!r} "
              f"without_OL={summary.final_mean('without_OL')!r} gap={summary.final_gap!r}")
    (out / "gaps.json").write_text(_dump(report))
    return 0


GRADCHECK_DEFAULTS = dict(seed=None, d=8, h=6, beta=3, alpha=2, tokens=4, tol=1e-5,
                          rel_step=gradcheck.DEFAULT_REL_STEP, out=None)


def cmd_gradcheck(cfg: dict) -> int:
    if cfg["seed"] is None:
        configs = gradcheck.GRADCHECK_CONFIGS
    else:
        configs = [{k: cfg[k] for k in ("seed", "d", "h", "beta", "alpha", "tokens")}]
    results = gradcheck.gradcheck_suite(configs, cfg["tol"], cfg["rel_step"])
    doc = {"ok": all(r.ok for _, r in results),
           "results": [{"config": c, **r.to_json()} for c, r in results]}
    _write(cfg["out"], _dump(doc))
    if not doc["ok"]:
        raise CheckFailed("gradient check exceeded tolerance")
    return 0


DELTAW_DEFAULTS = dict(m=6, k=6, n=6, eta=list(gradcheck.DEFAULT_ETAS), seed=0,
                       orthonormal=None, out=None)


def cmd_deltaw(cfg: dict) -> int:
    etas = cfg["eta"] if isinstance(cfg["eta"], list) else [cfg["eta"]]
    square = cfg["m"] == cfg["k"] == cfg["n"]
    orth = square if cfg["orthonormal"] is None else cfg["orthonormal"]
    reports = gradcheck.delta_w_experiment(cfg["m"], cfg["k"], cfg["n"], etas,
                                           cfg["seed"], orthonormal=orth)
    ratios = gradcheck.halving_ratios(reports)
    checks = {"second_order_bound": all(r.bound_ratio <= 1.5 for r in reports)}
    if len(reports) > 1:
        checks["linear_in_eta"] = all(0.4 <= q <= 0.6 for q in ratios)
    if orth:
        checks["two_eta"] = all(r.two_eta_residual <= r.two_eta_bound * (1 + 1e-9)
                                for r in reports)
    doc = {"ok": all(checks.values()), "checks": checks, "halving_ratios": ratios,
           "reports": [r.to_json() for r in reports]}
    _write(cfg["out"], _dump(doc))
    if not doc["ok"]:
        raise CheckFailed("delta-W first-order identity outside its bound")
    return 0


TRAIN_DEFAULTS = dict(blocks=2, d=16, h=8, beta=4, alpha=2, samples=128, tokens=4,
                      lr=0.1, lam=1e-4, steps=500, batch=32, seed=1, momentum=0.0,
                      init="svd", out="train_trace.csv")


def cmd_train_toy(cfg: dict) -> int:
    model, part, data = backbone.toy_task(
        cfg["blocks"], cfg["d"], cfg["h"], cfg["beta"], cfg["alpha"], cfg["samples"],
        cfg["tokens"], cfg["seed"], init=cfg["init"], lam=cfg["lam"])
    tc = backbone.TrainConfig(lr=cfg["lr"], lam=cfg["lam"], steps=cfg["steps"],
                              batch=cfg["batch"], seed=cfg["seed"], momentum=cfg["momentum"])
    print("partition:", json.dumps(part.sizes(), sort_keys=True))
    trace = backbone.train(model, part, data, tc)
    _write(cfg["out"], trace.to_csv())
    print(f"task loss: first={trace.task_loss[0]!r} last={trace.task_loss[-1]!r}")
    return 0


PARAMS_DEFAULTS = dict(m=384, n=768, beta=8, gamma=1, alpha=1, out=None)


def cmd_params(cfg: dict) -> int:
    pc = param_count(cfg["m"], cfg["n"], cfg["beta"], cfg["alpha"], cfg["gamma"])
    doc = {
        "colin": pc.colin,
        "dense_baseline": pc.dense_baseline,
        "reduction": float(pc.reduction),
        "reduction_exact": str(pc.reduction),
        "factor_reduction": float(pc.factor_reduction),
        "factor_reduction_exact": str(pc.factor_reduction),
    }
    _write(cfg["out"], _dump(doc))
    return 0


FUSE_DEFAULTS = dict(adapter=None, seed=0, tokens=4, out="fused.json")


def verify_fusion(adapter: ColinAdapter, fused: FusedAdapter, rng: Rng,
                  probes: int = FUSE_PROBES, tokens: int = 4) -> float:
    worst = 0.0
    for _ in range(probes):
        x = rng.normal((tokens, adapter.d))
        y, _ = adapter_forward(adapter, x)
        worst = max(worst, float(np.max(np.abs(y - fused.forward(x)))))
    return worst


def cmd_fuse(cfg: dict) -> int:
    if not cfg["adapter"]:
        raise UsageError("fuse needs --adapter <path to adapter JSON>")
    adapter = ColinAdapter.from_json(json.loads(Path(cfg["adapter"]).read_text()))
    fused = fuse(adapter)
    worst = verify_fusion(adapter, fused, Rng(cfg["seed"]), FUSE_PROBES, cfg["tokens"])
    print(f"fusion check: max |fused - multi-branch| = {worst!r} over {FUSE_PROBES} probes")
    if not worst <= FUSE_TOL:
        raise CheckFailed(f"fused output deviates by {worst} > {FUSE_TOL}; nothing written")
    _write(cfg["out"], _dump(fused.to_json()))
    return 0


BENCH_DEFAULTS = dict(d=768, h=100, beta=28, alpha=4, tokens=196, reps=1000, warmup=50,
                      seed=0, out=None)


def _timed(fn, reps: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return times


def bench_fuse(d: int, h: int, beta: int, alpha: int, tokens: int, reps: int = 1000,
               warmup: int = 50, seed: int = 0) -> dict:
    """Time the compose-per-call forward against the fused dense forward."""
    rng = Rng(seed)
    adapter = svd_init(ColinAdapter.zeros(d, h, beta, alpha), rng)
    # non-trivial branches so the sum over kernels is not degenerate
    adapter.kernels += 0.1 * rng.normal(adapter.kernels.shape)
    fused = fuse(adapter)
    x = rng.normal((tokens, d))
    deviation = float(np.max(np.abs(adapter_forward(adapter, x)[0] - fused.forward(x))))
    if not deviation <= FUSE_TOL:
        raise CheckFailed(f"fused and multi-branch outputs differ by {deviation}")
    unfused = _timed(lambda: adapter_forward(adapter, x), reps, warmup)
    dense = _timed(lambda: fused.forward(x), reps, warmup)

    def stats(ts):
        return {"median_s": statistics.median(ts), "p90_s": float(np.quantile(ts, 0.9))}

    return {"shape": dict(d=d, h=h, beta=beta, alpha=alpha, tokens=tokens),
            "reps": reps, "warmup": warmup, "max_abs_deviation": deviation,
            "unfused": stats(unfused), "fused": stats(dense),
            "fused_faster": statistics.median(dense) <= statistics.median(unfused)}


def cmd_bench_fuse(cfg: dict) -> int:
    report = bench_fuse(cfg["d"], cfg["h"], cfg["beta"], cfg["alpha"], cfg["tokens"],
                        cfg["reps"], cfg["warmup"], cfg["seed"])
    _write(cfg["out"], _dump(report))
    return 0


COMMANDS = {
    "simulate": (cmd_simulate, SIM_DEFAULTS),
    "gradcheck": (cmd_gradcheck, GRADCHECK_DEFAULTS),
    "deltaw": (cmd_deltaw, DELTAW_DEFAULTS),
    "train-toy": (cmd_train_toy, TRAIN_DEFAULTS),
    "params": (cmd_params, PARAMS_DEFAULTS),
    "fuse": (cmd_fuse, FUSE_DEFAULTS),
    "bench-fuse": (cmd_bench_fuse, BENCH_DEFAULTS),
}


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="colin", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        # defaults are None so that unset flags do not override --config values
        p.add_argument("--config", help="JSON file with option values")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output path ('-' for stdout where applicable)")
        return p

    p = common(sub.add_parser("simulate", help="P^T Q convergence with and without OL"))
    for flag in ("m", "k", "n", "iters", "seeds", "record-every"):
        p.add_argument(f"--{flag}", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--ol-weight", type=float)
    p.add_argument("--n-values", type=int, nargs="+", help="sweep several n values")

    p = common(sub.add_parser("gradcheck", help="finite-difference check of adapter gradients"))
    for flag in ("d", "h", "beta", "alpha", "tokens"):
        p.add_argument(f"--{flag}", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--rel-step", type=float)

    p = common(sub.add_parser("deltaw", help="first-order dW identity over an eta sweep"))
    for flag in ("m", "k", "n"):
        p.add_argument(f"--{flag}", type=int)
    p.add_argument("--eta", type=float, nargs="+")
    p.add_argument("--orthonormal", action=argparse.BooleanOptionalAction, default=None)

    p = common(sub.add_parser("train-toy", help="adapter-tune the toy backbone"))
    for flag in ("blocks", "d", "h", "beta", "alpha", "samples", "tokens", "steps", "batch"):
        p.add_argument(f"--{flag}", type=int)
    for flag in ("lr", "lam", "momentum"):
        p.add_argument(f"--{flag}", type=float)
    p.add_argument("--init", choices=backbone.INIT_MODES)

    p = common(sub.add_parser("params", help="parameter counts and reduction"))
    for flag in ("m", "n", "beta", "gamma", "alpha"):
        p.add_argument(f"--{flag}", type=int)

    p = common(sub.add_parser("fuse", help="fold branches into dense weights"))
    p.add_argument("--adapter", help="adapter JSON to fuse")
    p.add_argument("--tokens", type=int)

    p = common(sub.add_parser("bench-fuse", help="time fused vs multi-branch forward"))
    for flag in ("d", "h", "beta", "alpha", "tokens", "reps", "warmup"):
        p.add_argument(f"--{flag}", type=int)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    defaults = COMMANDS[args.command][1]
    cfg = dict(defaults)
    if args.config:
        from_file = json.loads(Path(args.config).read_text())
        unknown = set(from_file) - set(defaults)
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {sorted(unknown)}")
        cfg.update(from_file)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve(args)
        print("config:", json.dumps({"command": args.command, **cfg}, sort_keys=True), flush=True)
        return COMMANDS[args.command][0](cfg)
    except (UsageError, ValueError) as exc:
        print(f"colin {args.command}: {exc}", file=sys.stderr)
        return 2
    except (CheckFailed, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"colin {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
