"""Command-line front end.

    sale-core calibrate  per-head thresholds -> profile JSON
    sale-core run        sparse pipeline vs dense baseline -> RunReport
    sale-core sweep      (tau, sparsity, Err) table over a tau or theta grid
    sale-core mask       RLE mask dump plus per-row selected-block histogram
    sale-core generate   write a synthetic workload as a tensor file

Settings resolve as built-in defaults < ``--config`` JSON < flags. Exit
codes: 0 success, 1 check failure, 2 input error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .calibrate import (DEFAULT_MAX_HALVINGS, DEFAULT_TAU0, DEFAULT_THETA, FLOOR_REACHED,
                        CalibrationProfile, PreparedSample, calibrate_model, l1_error)
from .core import HeadInput, ShapeError, full_attention
from .quant import quantize_k, quantize_q
from .selection import BlockMask, SelectionConfig, plan_selection, write_mask_dump
from .sparse_exec import block_sparse_attention, flop_accounting
from .workloads import KINDS, generate, read_tensor_file, spec_from_dict, write_tensor_file

REPORT_VERSION = 1
TIMING_LABEL = "CPU reference"
# sections that vary between otherwise identical runs
TIMING_KEYS = ("timings", "derived")

EXIT_OK, EXIT_CHECK, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


class CheckFailure(Exception):
    pass


# -- settings -----------------------------------------------------------------------

def _load_config(path) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except OSError as exc:
        raise InputError(f"cannot read config {p}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config {p} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise InputError(f"config {p} must hold a JSON object")
    return data, p.resolve().parent


class Settings:
    def __init__(self, args):
        self.args = args
        self.config, self.base = _load_config(args.config)

    def get(self, flag: str, key: str | None = None, default=None):
        value = getattr(self.args, flag, None)
        if value is not None:
            return value
        return self.config.get(key or flag, default)

    def path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def selection(self, tau: float) -> SelectionConfig:
        extra = self.config.get("selection", {})
        try:
            return SelectionConfig(tau=tau, **extra)
        except TypeError as exc:
            raise InputError(f"bad selection settings: {exc}") from None

    def threads(self) -> int:
        n = self.args.threads
        if n is None and not os.environ.get("SALE_CORE_THREADS"):
            n = self.config.get("threads")
        return kernels.set_threads(n)

    def _workload_from_flags(self):
        a = self.args
        if a.workload is None:
            return None
        fields = {"kind": a.workload}
        for name in ("n", "d", "heads"):
            if getattr(a, name) is not None:
                fields[name] = getattr(a, name)
        return fields

    def resolve(self, source, index: int = 0):
        """A tensor-file path, or the workload fields with the effective seed filled in."""
        if isinstance(source, str):
            return source
        if not isinstance(source, dict):
            raise InputError(f"input must be a tensor file path or a workload object, got {source!r}")
        fields = dict(source)
        seed = self.args.seed if self.args.seed is not None else self.config.get("seed")
        if seed is not None:
            fields["seed"] = seed + index
        else:
            fields["seed"] = fields.get("seed", 0) + index
        return fields

    def load(self, source, index: int = 0) -> list[HeadInput]:
        source = self.resolve(source, index)
        if isinstance(source, str):
            return read_tensor_file(self.path(source))
        return generate(spec_from_dict(source))

    def input_source(self):
        if self.args.input is not None:
            return str(Path(self.args.input).resolve())
        flags = self._workload_from_flags()
        if flags is not None:
            return flags
        if "input" not in self.config:
            raise InputError("no input: pass --input FILE, --workload KIND or set 'input' in the config")
        return self.config["input"]

    def describe(self, source) -> dict:
        source = self.resolve(source)
        return {"file": source} if isinstance(source, str) else {"workload": source}

    def profile(self) -> CalibrationProfile | None:
        path = self.args.profile or self.config.get("profile")
        if path is None:
            return None
        p = Path(path) if self.args.profile else self.path(path)
        try:
            return CalibrationProfile.load(p)
        except OSError as exc:
            raise InputError(f"cannot read profile {p}: {exc.strerror}") from None


def _taus_for(settings: Settings, heads, profile) -> list[float]:
    tau = settings.args.tau if getattr(settings.args, "tau", None) is not None else None
    if tau is None and profile is not None:
        if len(profile.heads) != len(heads):
            raise InputError(f"profile has {len(profile.heads)} heads, input has {len(heads)}")
        return [profile.tau_for(h) for h in range(len(heads))]
    if tau is None:
        tau = settings.config.get("tau", settings.config.get("tau0", DEFAULT_TAU0))
    return [float(tau)] * len(heads)


def _strict_profile(settings: Settings, profile) -> None:
    if settings.args.strict and profile is not None:
        floor = [h.head for h in profile.heads if h.flag == FLOOR_REACHED]
        if floor:
            raise CheckFailure(f"profile has floor-reached heads {floor}")


def _emit(settings: Settings, report: dict, table: list[str]) -> None:
    out = settings.args.json_out
    text = json.dumps(report, indent=2) + "\n"
    if out == "-":
        sys.stdout.write(text)
        return
    print("\n".join(table))
    if out:
        Path(out).write_text(text)


def strip_timings(report: dict) -> dict:
    """The report minus fields that legitimately vary between runs."""
    return {k: v for k, v in report.items() if k not in TIMING_KEYS}


# -- commands -------------------------------------------------------------------------

def cmd_calibrate(settings: Settings) -> int:
    a = settings.args
    theta = float(settings.get("theta", default=DEFAULT_THETA))
    tau0 = float(settings.get("tau0", default=DEFAULT_TAU0))
    max_halvings = int(settings.get("max_halvings", default=DEFAULT_MAX_HALVINGS))
    settings.threads()

    if a.input is not None or a.workload is not None:
        source = settings.input_source()
        sources = [source] * (1 if isinstance(source, str) else (a.samples or 1))
    else:
        sources = settings.config.get("samples") or [settings.input_source()]
    sources = [settings.resolve(src, i) for i, src in enumerate(sources)]
    samples = [settings.load(src) for src in sources]
    ids = [src if isinstance(src, str) else json.dumps(src, sort_keys=True) for src in sources]

    profile = calibrate_model(samples, theta, tau0, max_halvings, settings.selection(tau0),
                              sample_ids=ids)
    out = a.profile or settings.config.get("profile")
    if out:
        profile.save(out if a.profile else settings.path(out))
    table = [f"{'layer':>5} {'head':>4} {'tau':>12} {'halvings':>8} {'err':>10}  flag"]
    for h in profile.heads:
        table.append(f"{h.layer:>5} {h.head:>4} {h.tau:>12.6g} {h.halvings:>8} {h.err:>10.4g}  {h.flag}")
    _emit(settings, profile.to_dict(), table)
    _strict_profile(settings, profile)
    return EXIT_OK


def _coverage(cov: np.ndarray) -> dict:
    n = cov.size
    return {"min": int(cov.min()), "mean": float(cov.mean()), "max": int(cov.max()),
            "fraction": float(cov.sum() / (n * (n + 1) // 2))}


def derived_fields(t: dict) -> dict:
    def ratio(num, den):
        return num / den if den > 0 else None
    return {"overhead_ratio": ratio(t["quantization_ms"] + t["selection_ms"], t["dense_ms"]),
            "computation_speedup": ratio(t["dense_ms"], t["computation_ms"])}


def _warm_up() -> None:
    # pay JIT compilation or cache loading before the clock starts
    rng = np.random.default_rng(0)
    head = HeadInput(*rng.standard_normal((3, 96, 8)))
    config = SelectionConfig(tau=DEFAULT_TAU0)
    grid = config.grid(head.n)
    mask = plan_selection(head, quantize_q(head.q), quantize_k(head.k, grid), config).mask()
    block_sparse_attention(head, mask, grid)
    full_attention(head)


def cmd_run(settings: Settings) -> int:
    a = settings.args
    source = settings.input_source()
    heads = settings.load(source)
    profile = settings.profile()
    dense_mask = a.dense_mask
    taus = [None] * len(heads) if dense_mask else _taus_for(settings, heads, profile)
    threads = settings.threads()
    _warm_up()
    clock = dict.fromkeys(("quantization_ms", "selection_ms", "computation_ms", "dense_ms"), 0.0)

    def timed(key, fn, *args):
        t0 = time.perf_counter()
        out = fn(*args)
        clock[key] += (time.perf_counter() - t0) * 1e3
        return out

    rows = []
    base = settings.selection(DEFAULT_TAU0)
    for h, (head, tau) in enumerate(zip(heads, taus)):
        grid = base.grid(head.n)
        if dense_mask:
            mask = BlockMask.full(grid)
        else:
            config = dataclasses.replace(base, tau=tau)
            qq, kq = timed("quantization_ms", lambda: (quantize_q(head.q), quantize_k(head.k, grid)))
            mask = timed("selection_ms", lambda: plan_selection(head, qq, kq, config).mask())
        sparse = timed("computation_ms", block_sparse_attention, head, mask, grid)
        dense = timed("dense_ms", full_attention, head)
        flops = flop_accounting(mask, grid)
        rows.append({"head": h, "tau": tau,
                     "blocks": {"computed": flops.computed, "skipped": flops.skipped, "total": flops.total},
                     "sparsity": flops.sparsity, "err": l1_error(dense, sparse.o),
                     "coverage": _coverage(sparse.coverage)})

    check = None
    if a.check:
        theta = a.theta if a.theta is not None else (
            profile.theta if profile is not None else settings.config.get("theta", DEFAULT_THETA))
        failed = [r["head"] for r in rows if not r["err"] <= theta]
        check = {"theta": theta, "passed": not failed, "failed_heads": failed}

    timings = {"label": TIMING_LABEL, "backend": kernels.ACTIVE_BACKEND, "threads": threads, **clock}
    report = {"version": REPORT_VERSION, "command": "run", "input": settings.describe(source),
              "n": heads[0].n, "d": heads[0].d, "dense_mask": dense_mask, "heads": rows,
              "check": check, "timings": timings, "derived": derived_fields(timings)}

    table = [f"{'head':>4} {'tau':>10} {'computed':>8} {'total':>7} {'sparsity':>8} {'err':>10}"]
    for r in rows:
        tau = "dense" if r["tau"] is None else f"{r['tau']:.4g}"
        table.append(f"{r['head']:>4} {tau:>10} {r['blocks']['computed']:>8} {r['blocks']['total']:>7} "
                     f"{r['sparsity']:>8.3f} {r['err']:>10.4g}")
    d = report["derived"]
    table.append(f"{TIMING_LABEL} timings (ms): quant {clock['quantization_ms']:.2f}  "
                 f"selection {clock['selection_ms']:.2f}  computation {clock['computation_ms']:.2f}  "
                 f"dense {clock['dense_ms']:.2f}")
    table.append(f"overhead ratio {_fmt(d['overhead_ratio'])}  computation speedup {_fmt(d['computation_speedup'])}")
    _emit(settings, report, table)

    _strict_profile(settings, profile)
    if check and not check["passed"]:
        raise CheckFailure(f"Err > theta={check['theta']} on heads {check['failed_heads']}")
    return EXIT_OK


def _fmt(x):
    return "n/a" if x is None else f"{x:.3f}"


def _grid(text, name, lo, hi):
    try:
        values = [float(v) for v in text.split(",")] if isinstance(text, str) else [float(v) for v in text]
    except ValueError:
        raise InputError(f"{name} grid must be comma-separated numbers, got {text!r}") from None
    if not values:
        raise InputError(f"{name} grid is empty")
    for v in values:
        if not (lo < v < hi):
            raise InputError(f"{name} grid value {v} outside ({lo}, {hi})")
    return sorted(set(values), reverse=True)


def cmd_sweep(settings: Settings) -> int:
    a = settings.args
    source = settings.input_source()
    heads = settings.load(source)
    settings.threads()
    tau0 = float(settings.get("tau0", default=DEFAULT_TAU0))
    thetas = settings.get("thetas")
    if a.taus is not None or thetas is None:
        taus = settings.get("taus") or [tau0 / 2**k for k in range(5)]
        mode, grid = "tau", _grid(taus, "tau", 0.0, 1.0)
    else:
        mode, grid = "theta", _grid(thetas, "theta", 0.0, float("inf"))

    config = settings.selection(tau0)
    rows = []
    for h, head in enumerate(heads):
        prep = PreparedSample(head, config)
        for g in grid:
            if mode == "tau":
                rows.append({"head": h, "tau": g, "sparsity": prep.sparsity(g), "err": prep.error(g)})
                continue
            max_halvings = int(settings.get("max_halvings", default=DEFAULT_MAX_HALVINGS))
            prof = calibrate_model([[head]], g, tau0, max_halvings, config)
            tau = prof.heads[0].tau
            rows.append({"head": h, "theta": g, "tau": tau, "flag": prof.heads[0].flag,
                         "sparsity": prep.sparsity(tau), "err": prof.heads[0].err})

    violations = []
    for h in range(len(heads)):
        mine = sorted((r for r in rows if r["head"] == h), key=lambda r: -r["tau"])
        for big, small in zip(mine, mine[1:]):
            if small["sparsity"] > big["sparsity"]:
                violations.append({"head": h, "tau": [big["tau"], small["tau"]]})
    report = {"version": REPORT_VERSION, "command": "sweep", "mode": mode,
              "input": settings.describe(source), "rows": rows, "monotone": not violations}

    cols = ["head"] + (["theta"] if mode == "theta" else []) + ["tau", "sparsity", "err"]
    table = [" ".join(f"{c:>10}" for c in cols)]
    for r in rows:
        table.append(" ".join(f"{r[c]:>10}" if c == "head" else f"{r[c]:>10.4g}" for c in cols))
    _emit(settings, report, table)
    if violations:
        raise CheckFailure(f"sparsity not monotone in tau: {violations}")
    return EXIT_OK


def _select_heads(text: str, count: int) -> list[int]:
    if text == "all":
        return list(range(count))
    try:
        picked = [int(x) for x in text.split(",")]
    except ValueError:
        raise InputError(f"head selector must be 'all' or comma-separated indices, got {text!r}") from None
    for h in picked:
        if not 0 <= h < count:
            raise InputError(f"head {h} out of range: input has {count} heads")
    return picked


def cmd_mask(settings: Settings) -> int:
    a = settings.args
    source = settings.input_source()
    heads = settings.load(source)
    profile = settings.profile()
    taus = _taus_for(settings, heads, profile)
    settings.threads()
    selected = _select_heads(a.head, len(heads))
    base = settings.selection(DEFAULT_TAU0)

    records, summary, table = [], [], []
    for h in selected:
        head = heads[h]
        grid = base.grid(head.n)
        config = dataclasses.replace(base, tau=taus[h])
        mask = plan_selection(head, quantize_q(head.q), quantize_k(head.k, grid), config).mask()
        records.append((h, taus[h], mask))
        causal = grid.causal_bits()
        per_row = (mask.bits & causal).sum(axis=1)
        reachable = causal.sum(axis=1)
        summary.append({"head": h, "tau": taus[h], "n_q": grid.n_q, "n_k": grid.n_k,
                        "selected_per_row": per_row.tolist(), "causal_per_row": reachable.tolist(),
                        "sparsity": flop_accounting(mask, grid).sparsity})
        table.append(f"head {h}  tau {taus[h]:.4g}  sparsity {summary[-1]['sparsity']:.3f}")
        width = 40
        for i, (sel, tot) in enumerate(zip(per_row, reachable)):
            bar = "#" * round(width * sel / tot)
            table.append(f"  q-block {i:>4} {sel:>5}/{tot:<5} {bar}")
    write_mask_dump(a.out, records)
    report = {"version": REPORT_VERSION, "command": "mask", "input": settings.describe(source),
              "dump": str(a.out), "heads": summary}
    _emit(settings, report, table)
    _strict_profile(settings, profile)
    return EXIT_OK


def cmd_generate(settings: Settings) -> int:
    source = settings.input_source()
    if isinstance(source, str):
        raise InputError("generate needs a workload, not a tensor file")
    heads = settings.load(source)
    write_tensor_file(settings.args.out, heads)
    print(f"wrote {len(heads)} heads of {heads[0].n}x{heads[0].d} to {settings.args.out}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON settings file; flags override its values")
    common.add_argument("--profile", help="calibration profile JSON (written by calibrate, read otherwise)")
    common.add_argument("--seed", type=int, help="base seed for synthetic workloads")
    common.add_argument("--threads", type=_positive_int,
                        help="worker threads (default: $SALE_CORE_THREADS, then config, then all)")
    common.add_argument("--strict", action="store_true", help="treat floor-reached heads as failures")
    common.add_argument("--json-out", metavar="PATH", help="write the JSON report here ('-' for stdout)")
    src = common.add_argument_group("input")
    src.add_argument("--input", metavar="FILE", help="tensor file")
    src.add_argument("--workload", choices=KINDS, help="synthetic workload kind")
    src.add_argument("--n", type=_positive_int, help="sequence length for --workload")
    src.add_argument("--d", type=_positive_int, help="head dimension for --workload")
    src.add_argument("--heads", type=_positive_int, help="head count for --workload")

    parser = argparse.ArgumentParser(prog="sale-core", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", parents=[common], help="calibrate per-head thresholds")
    p.add_argument("--theta", type=float)
    p.add_argument("--tau0", type=float)
    p.add_argument("--max-halvings", type=int)
    p.add_argument("--samples", type=_positive_int, help="synthetic samples per head (seeds seed..seed+k-1)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", parents=[common], help="sparse vs dense comparison")
    p.add_argument("--tau", type=float, help="uniform threshold overriding the profile")
    p.add_argument("--dense-mask", action="store_true", help="select every block")
    p.add_argument("--check", action="store_true", help="exit 1 unless every head has Err <= theta")
    p.add_argument("--theta", type=float, help="bound for --check (default: profile theta)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="sparsity and error over a threshold grid")
    p.add_argument("--taus", help="comma-separated tau grid (default: 5 halvings of tau0)")
    p.add_argument("--thetas", help="comma-separated theta grid; calibrates per value")
    p.add_argument("--tau0", type=float)
    p.add_argument("--max-halvings", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("mask", parents=[common], help="dump block masks")
    p.add_argument("--head", default="all", help="'all' or comma-separated head indices")
    p.add_argument("--tau", type=float, help="uniform threshold overriding the profile")
    p.add_argument("--out", required=True, help="mask dump path")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic workload to a tensor file")
    p.add_argument("--out", required=True, help="tensor file path")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(Settings(args))
    except CheckFailure as exc:
        print(f"sale-core: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (InputError, ShapeError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        if isinstance(exc, OSError) and exc.filename:
            msg = f"{exc.strerror}: {exc.filename}"
        print(f"sale-core: error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
