"""Command-line front end: ``pcbf {cert,filter,rollout,sweep,sigma0,bench}``.

Experiment commands read an optional flat config file (one ``key = value``
per line, keys are :class:`pcbf.sim.SimConfig` fields, ``#`` starts a
comment); command-line flags override file values.  Every experiment run
writes its CSV files plus ``manifest.json`` listing SHA-256 hashes.

Exit codes: 0 success (an infeasible filter is a result), 1 internal
error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time

import numpy as np

from . import __version__, cert
from .kernels import BACKEND
from .sim import (
    FILTERS,
    METHODS,
    VARIANTS,
    SimConfig,
    batch_dataset,
    bench,
    bench_csv,
    build_filter_constraint,
    monte_carlo,
    sigma0_search,
    sweep,
    sweep_csv,
    trajectory_csv,
    write_text,
)

log = logging.getLogger("pcbf")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files

_FIELDS = {f.name: f for f in dataclasses.fields(SimConfig)}


def _coerce(name, text):
    default = _FIELDS[name].default
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise UsageError(f"{name}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(t) for t in text.replace("[", "").replace("]", "").split(",") if t.strip())
    return text


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"line {lineno}: expected 'key = value'")
        if key not in _FIELDS:
            raise UsageError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, val)
        except ValueError as exc:
            raise UsageError(f"line {lineno}: {exc}") from None
    return values


def format_config(config: SimConfig) -> str:
    lines = []
    for name, value in dataclasses.asdict(config).items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        elif isinstance(value, (tuple, list)):
            text = ", ".join(repr(float(v)) for v in value)
        else:
            text = str(value)
        lines.append(f"{name} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path=None, **overrides) -> SimConfig:
    values = {}
    if path:
        try:
            with open(path) as fh:
                values = parse_config_text(fh.read())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return SimConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


# ---------------------------------------------------------------------------
# helpers


def _open_unit(name):
    def conv(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number") from None
        if not 0.0 < v < 1.0:
            raise argparse.ArgumentTypeError(f"{name} must lie in (0, 1)")
        return v
    return conv


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _methods(text, allowed=METHODS + VARIANTS):
    names = [t.strip() for t in text.split(",") if t.strip()]
    if not names:
        raise argparse.ArgumentTypeError("method list is empty")
    bad = [n for n in names if n not in allowed]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown method(s): {', '.join(bad)}")
    return names


def _floats(text):
    try:
        vals = [float(t) for t in text.replace(" ", ",").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty value list")
    return vals


def _state(values):
    if len(values) == 1:
        values = values[0].replace("[", "").replace("]", "").replace(",", " ").split()
    try:
        x = np.array([float(v) for v in values])
    except ValueError:
        raise UsageError(f"malformed state {' '.join(values)!r}") from None
    if x.shape != (3,) or not np.all(np.isfinite(x)):
        raise UsageError("state must be three finite numbers: x y theta")
    return x


def _prepare_out_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir, command, config, files, started, extra=None):
    manifest = {
        "tool": "pcbf",
        "version": __version__,
        "kernel_backend": BACKEND,
        "command": command,
        "master_seed": config.master_seed,
        "config": format_config(config),
        "wall_clock_s": round(time.time() - started, 3),
        "outputs": [{"file": os.path.basename(f), "sha256": _sha256(f)} for f in files],
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _config_from_args(args) -> SimConfig:
    over = {
        "master_seed": getattr(args, "seed", None),
        "jobs": getattr(args, "jobs", None),
        "sigma": getattr(args, "sigma", None),
        "n_traj": getattr(args, "n_traj", None),
        "horizon": getattr(args, "horizon", None),
        "backend": getattr(args, "backend", None),
    }
    if getattr(args, "timing", False):
        over["record_timing"] = True
    return load_config(getattr(args, "config", None), **over)


# ---------------------------------------------------------------------------
# commands


def cmd_cert(args) -> int:
    budget = cert.HorizonBudget(
        epsilon=args.epsilon, H=args.horizon, beta_total=args.beta_total,
        delta_step=args.delta_step, beta_step=args.beta_step,
    )
    try:
        report = cert.horizon_guarantee(budget, args.mode)
    except cert.BudgetError as exc:
        print(f"budget violation: {exc}", file=sys.stderr)
        return 2
    for line in report.lines():
        print(line)
    delta = args.delta if args.delta is not None else report.delta_step
    beta = args.beta if args.beta is not None else (report.beta_step or args.beta_total)
    print()
    print(f"sample sizes at delta={delta:.6g}, beta={beta:.6g}")
    exact, suff = cert.scenario_min_samples(delta, beta, args.dim)
    print(f"  scenario   N_min={exact}  sufficient={suff}  (dim={args.dim})")
    try:
        print(f"  conformal  N_min={cert.conformal_min_samples(delta, beta)}")
    except cert.InsufficientSamplesError as exc:
        print(f"  conformal  {exc}")
    eps_h = cert.hoeffding_epsilon(args.n_hoeffding, beta, 0.0, args.range)
    print(f"  hoeffding  epsilon_h={eps_h:.6g} for N={args.n_hoeffding}, b-a={args.range:g}")
    return 0


def cmd_filter(args) -> int:
    config = _config_from_args(args)
    x = _state(args.state)
    method = args.method or config.method
    from .core import corridor_nominal
    from .solver import safety_filter

    u_nom = corridor_nominal(x)
    print(f"state     {' '.join(repr(float(v)) for v in x)}")
    print(f"u_nom     {' '.join(repr(float(v)) for v in u_nom)}")
    if method == "none":
        print(f"u_star    {' '.join(repr(float(v)) for v in u_nom)}")
        print("status    nominal")
        return 0
    data = batch_dataset(config, method)
    con = build_filter_constraint(config, method, x, data)
    res = safety_filter(u_nom, [con], backend=config.backend)
    print(f"method    {method}")
    print(f"u_star    {' '.join(repr(float(v)) for v in res.u_star)}")
    print(f"status    {res.status}")
    print(f"margin    {res.worst_margin!r}")
    print(f"backend   {res.backend}")
    if res.certificate is not None:
        print(f"phase1    {res.certificate!r}")
    print(f"solve_ms  {res.solve_time * 1e3:.4f}")
    return 0


def cmd_rollout(args) -> int:
    config = _config_from_args(args)
    _prepare_out_dir(args.out_dir)
    started = time.time()
    files = []
    for method in args.methods:
        mc = monte_carlo(config, method, config.jobs)
        path = os.path.join(args.out_dir, f"trajectories_{method}.csv")
        write_text(path, trajectory_csv(mc.records))
        files.append(path)
        print(f"{method:10s} unsafe {mc.n_unsafe}/{mc.n_traj}  infeasible {mc.n_infeasible}")
    write_manifest(args.out_dir, "rollout", config, files, started)
    return 0


def cmd_sweep(args) -> int:
    config = _config_from_args(args)
    _prepare_out_dir(args.out_dir)
    started = time.time()
    values = args.values
    if values is None:
        values = [0.02, 0.04, 0.06, 0.08, 0.1, 0.12] if args.axis == "sigma" else [5, 10, 15, 20, 25, 30]
    if args.axis == "horizon":
        if any(v != int(v) or v < 1 for v in values):
            raise UsageError("horizon values must be positive integers")
        values = [int(v) for v in values]
    rows = sweep(config, args.axis, values, args.methods, config.jobs)
    path = os.path.join(args.out_dir, f"sweep_{args.axis}.csv")
    write_text(path, sweep_csv(rows))
    for r in rows:
        print(f"{r['method']:10s} {args.axis}={r['value']!s:6s} unsafe {r['n_unsafe']}/{r['n_traj']}  "
              f"infeasible {r['n_infeasible']}")
    write_manifest(args.out_dir, "sweep", config, [path], started)
    return 0


def cmd_sigma0(args) -> int:
    config = _config_from_args(args)
    _prepare_out_dir(args.out_dir)
    started = time.time()
    methods = [m for m in args.methods if m != "none"]
    if not methods:
        raise UsageError("sigma0 needs at least one filter method")
    summary, scan = ["method,sigma0"], ["method,sigma,worst_margin"]
    for method in methods:
        s0, rows = sigma0_search(config, method)
        summary.append(f"{method},{'none' if s0 is None else repr(s0)}")
        scan.extend(f"{method},{s!r},{v!r}" for s, v in rows)
        print(f"{method:10s} sigma0 = {'none found' if s0 is None else s0}")
    p1 = os.path.join(args.out_dir, "sigma0.csv")
    p2 = os.path.join(args.out_dir, "sigma0_scan.csv")
    write_text(p1, "\n".join(summary) + "\n")
    write_text(p2, "\n".join(scan) + "\n")
    write_manifest(args.out_dir, "sigma0", config, [p1, p2], started)
    return 0


def cmd_bench(args) -> int:
    config = _config_from_args(args)
    _prepare_out_dir(args.out_dir)
    started = time.time()
    rows = bench(config, args.methods, args.n_solves, tuple(args.backends), args.source)
    path = os.path.join(args.out_dir, "bench.csv")
    write_text(path, bench_csv(rows))
    for r in rows:
        print(f"{r['method']:10s} {r['backend']:8s} mean {r['mean_ms']:8.3f} ms  "
              f"median {r['median_ms']:8.3f} ms  infeasible {r['n_infeasible']}")
    write_manifest(args.out_dir, "bench", config, [path], started,
                   extra={"note": "timings are hardware dependent and not reproducible byte for byte"})
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcbf", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"pcbf {__version__} ({BACKEND} kernels)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cert", help="per-step risk/confidence allocation and sample sizes")
    p.add_argument("--epsilon", type=_open_unit("epsilon"), default=0.1)
    p.add_argument("--horizon", type=_positive_int, default=20)
    p.add_argument("--beta-total", type=_open_unit("beta-total"), default=0.01)
    p.add_argument("--delta-step", type=float, default=None, help="override the per-step risk")
    p.add_argument("--beta-step", type=float, default=None, help="override the per-step confidence")
    p.add_argument("--mode", "--method", dest="mode", choices=("moment", "data"), default="data")
    p.add_argument("--delta", type=_open_unit("delta"), default=None,
                   help="per-step risk for the sample-size table (default: delta_step)")
    p.add_argument("--beta", type=_open_unit("beta"), default=None,
                   help="confidence for the sample-size table (default: beta_step)")
    p.add_argument("--dim", type=_positive_int, default=3, help="decision dimension for scenario sizes")
    p.add_argument("--range", type=float, default=1.0, help="b - a for the Hoeffding slack")
    p.add_argument("--n-hoeffding", type=_positive_int, default=3252)
    p.set_defaults(func=cmd_cert)

    def common(p, methods=True):
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--sigma", type=float, default=None)
        p.add_argument("--backend", default=None, choices=("auto", "generic"))
        if methods:
            p.add_argument("--methods", type=_methods, default=list(METHODS))
            p.add_argument("--out-dir", default="out")
            p.add_argument("--jobs", type=_positive_int, default=None)
            p.add_argument("--n-traj", type=_positive_int, default=None)
            p.add_argument("--horizon", type=_positive_int, default=None)

    p = sub.add_parser("filter", help="one filter solve at a given state")
    common(p, methods=False)
    p.add_argument("--state", nargs="+", required=True, help="x y theta (or 'x,y,theta')")
    p.add_argument("--method", choices=METHODS + VARIANTS, default=None)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("rollout", help="trajectory dumps for each method")
    common(p)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("sweep", help="unsafe-trajectory counts over sigma or horizon")
    common(p)
    p.add_argument("--axis", choices=("sigma", "horizon"), default="sigma")
    p.add_argument("--values", type=_floats, default=None)
    p.add_argument("--timing", action="store_true", help="fill the mean_solve_ms column")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("sigma0", help="smallest infeasible sigma per method")
    common(p)
    p.set_defaults(func=cmd_sigma0, methods=list(FILTERS))

    p = sub.add_parser("bench", help="filter-step timing")
    common(p)
    p.add_argument("--n-solves", type=_positive_int, default=1000)
    p.add_argument("--backends", type=lambda t: [b for b in t.split(",") if b], default=["generic", "auto"])
    p.add_argument("--source", choices=("rollout", "uniform"), default="rollout",
                   help="states visited by closed-loop rollouts, or uniform draws from the safe set")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit with 2, --help/--version with 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pcbf: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, cert.InsufficientSamplesError) as exc:
        print(f"pcbf: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"pcbf: internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
