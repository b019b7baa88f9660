"""Command line driver: ``fracnls <subcommand> [--flags]``.

Subcommands: evolve, sample, invariance, tails, converge, lambda, partition,
growth.  Flags take explicit long names; ``--config FILE`` supplies defaults
as flat ``key = value`` lines (keys are flag names with or without the
leading dashes).  Outputs go to ``--out`` (a directory); each run writes a
``config.json`` with the fully resolved configuration, and JSON reports embed
it as well.  One summary line goes to stdout, diagnostics to stderr.

Exit codes: 0 success, 1 configuration error, 2 numerical abort, 3 a checked
inequality failed.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from typing import Sequence

import numpy as np

from . import dynamics, experiments, measures, spectral, streams

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ASSERT = 0, 1, 2, 3

# keys that never influence results and are kept out of the resolved config
_RUNTIME_KEYS = {"workers", "out", "config", "command", "handler"}


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


# ---------------------------------------------------------------------------
# parsing helpers

def _float_list(text: str) -> list[float]:
    return [float(x) for x in str(text).replace(" ", "").split(",") if x]


def _int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).replace(" ", "").split(",") if x]


def read_config_file(path: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{num}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def parse_init(spec: str, n_modes: int):
    """``plane_wave:n:a`` | ``power_law:s:delta:seed`` | ``file:path``."""
    kind, _, rest = spec.partition(":")
    parts = rest.split(":") if rest else []
    try:
        if kind == "plane_wave":
            n, a = int(parts[0]), complex(parts[1].replace(" ", ""))
            if abs(n) > n_modes:
                raise ConfigError(f"plane wave mode {n} exceeds --modes {n_modes}")
            return spectral.SpectralState.from_modes(n_modes, {n: a})
        if kind == "power_law":
            s = float(parts[0])
            delta = float(parts[1]) if len(parts) > 1 else 0.01
            seed = int(parts[2]) if len(parts) > 2 else 0
            return spectral.power_law_state(n_modes, s, delta, seed)
        if kind == "file":
            state, _ = spectral.load_state(rest)
            if state.n_modes != n_modes:
                raise ConfigError(f"state file has N={state.n_modes}, --modes is {n_modes}")
            return state
    except (IndexError, ValueError) as exc:
        raise ConfigError(f"bad --init {spec!r}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read initial state: {exc}") from exc
    raise ConfigError(f"unknown --init kind {kind!r} (plane_wave, power_law, file)")


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise ConfigError("missing required option(s): "
                          + ", ".join("--" + n.replace("_", "-") for n in missing))


def _params(args) -> spectral.ModelParams:
    _require(args, "alpha", "gamma", "modes")
    try:
        return spectral.ModelParams(args.alpha, int(args.gamma), args.modes,
                                    args.s if args.s is not None else 0.2)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _measure(args, params, method=None) -> measures.MeasureConfig:
    try:
        return measures.MeasureConfig(params, args.l2_cutoff, args.zero_mode, args.sigma0,
                                      method or args.method)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def resolved_config(args) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in _RUNTIME_KEYS}
    cfg["command"] = args.command
    return cfg


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _finish(args, reports: dict[str, object]) -> None:
    out = _outdir(args)
    cfg = resolved_config(args)
    _write_json(os.path.join(out, "config.json"), cfg)
    for name, obj in reports.items():
        _write_json(os.path.join(out, name), dict(obj, run_config=cfg))


# ---------------------------------------------------------------------------
# subcommands

def cmd_evolve(args) -> int:
    params = _params(args)
    _require(args, "init", "time")
    state = parse_init(args.init, params.n_modes)
    dt = args.dt if args.dt is not None else dynamics.default_dt(params)
    sigmas = tuple(_float_list(args.sigmas)) if args.sigmas else (0.0, params.s)
    try:
        cfg = dynamics.IntegratorConfig(args.scheme, dt, args.record_every, args.substep, sigmas)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    final, log = dynamics.evolve(state, params, cfg, args.time)
    out = _outdir(args)
    log.write_csv(os.path.join(out, "trajectory.csv"))
    spectral.save_state(os.path.join(out, "final_state.json"), final, params.alpha)
    _finish(args, {})
    print(f"evolve: T={args.time!r} mass_drift={log.max_drift('mass'):.3e} "
          f"hamiltonian_drift={log.max_drift('hamiltonian'):.3e}")
    return EXIT_OK


def cmd_sample(args) -> int:
    params = _params(args)
    _require(args, "count")
    config = _measure(args, params)
    batch = measures.draw_gibbs(config, args.seed, args.count, args.workers)
    out = _outdir(args)
    with open(os.path.join(out, "samples.jsonl"), "w") as fh:
        for line in measures.iter_jsonl(batch.samples(), params.alpha):
            fh.write(line + "\n")
    if np.isfinite(batch.log_weights).any():
        report = measures.estimate_all(batch, measures.default_observables(params))
        estimates = report.to_dict()
        q = report["quartic"]
        note = f"E[quartic] = {q.estimate:.6g} +- {q.std_error:.2g} (ess {q.ess:.1f})"
    else:
        # every draw violated the cutoff: nothing to average
        estimates = None
        note = "all weights are zero, no estimates"
    _finish(args, {"summary.json": {
        "count": len(batch), "n_proposed": batch.n_proposed,
        "acceptance_rate": batch.acceptance_rate, "estimates": estimates}})
    print(f"sample: {len(batch)} draws, acceptance {batch.acceptance_rate:.4g}, {note}")
    return EXIT_OK


def _integrator(args, params) -> dynamics.IntegratorConfig:
    dt = args.dt if args.dt is not None else 1e-3
    try:
        return dynamics.IntegratorConfig(args.scheme, dt, 1, args.substep)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_invariance(args) -> int:
    params = _params(args)
    _require(args, "time", "count")
    config = _measure(args, params)
    nested = _int_list(args.nested) if args.nested else []
    report = experiments.invariance_test(config, args.time, args.count,
                                         integrator=_integrator(args, params), seed=args.seed,
                                         workers=args.workers, nested=nested)
    out = _outdir(args)
    report.write_csv(os.path.join(out, "invariance.csv"))
    _finish(args, {"invariance.json": report.to_dict()})
    ok = invariance_passes(report, args.z_max, args.drift_max)
    zs = " ".join(f"{k}={v.z_score:+.2f}" for k, v in report.stats.items())
    print(f"invariance: {'pass' if ok else 'FAIL'} ess={report.ess:.0f} {zs}")
    if report.underpowered:
        print("invariance: effective sample size below 30, test underpowered", file=sys.stderr)
    return EXIT_OK if ok else EXIT_ASSERT


def invariance_passes(report, z_max: float = 3.0, drift_max: float = 1e-10) -> bool:
    """|z| < z_max for statistical observables, |mean_diff| < drift_max for mass."""
    for rep in [report, *report.nested.values()]:
        for name, st in rep.stats.items():
            if name in measures.PATHWISE_CONSERVED:
                if not abs(st.mean_diff) < drift_max:
                    return False
            elif not abs(st.z_score) < z_max:
                return False
    return True


def cmd_tails(args) -> int:
    params = _params(args)
    _require(args, "count")
    config = _measure(args, params, method="importance")
    ks = _float_list(args.k_grid)
    report = experiments.tail_test(config, ks, args.count, args.seed, args.workers)
    out = _outdir(args)
    report.write_csv(os.path.join(out, "tails.csv"))
    _finish(args, {"tails.json": report.to_dict()})
    ok = report.holds and report.monotone
    print(f"tails: {'pass' if ok else 'FAIL'} C={report.constant:.4g} "
          f"(bound P <= C exp(-K^2/4) on {len(ks)} K values)")
    return EXIT_OK if ok else EXIT_ASSERT


def cmd_converge(args) -> int:
    params = _params(args)
    _require(args, "s", "s_prime", "n_list", "n_ref", "time")
    ns = _int_list(args.n_list)
    if args.n_ref < 4 * max(ns):
        raise ConfigError("--n-ref must be at least 4 * max(--n-list)")
    table = experiments.convergence_study(params, args.s, args.s_prime, ns, args.n_ref,
                                          args.time, args.delta, args.init_seed, args.dt)
    out = _outdir(args)
    table.write_csv(os.path.join(out, "convergence.csv"))
    _finish(args, {"convergence.json": table.to_dict()})
    target = args.s_prime - args.s
    ok = abs(table.slope - target) <= args.slope_tol * (args.s - args.s_prime)
    print(f"converge: slope {table.slope:.4f} (target {target:.4f} +- "
          f"{args.slope_tol * (args.s - args.s_prime):.4f}) {'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_ASSERT


def cmd_lambda(args) -> int:
    _require(args, "alpha", "s", "k_max")
    lams = measures.lambda_k(args.alpha, args.s, args.k_max)
    out = _outdir(args)
    if args.rows == "all":
        ks = np.arange(1, args.k_max + 1)
    else:
        ks = sorted({2 ** j for j in range(int(math.log2(args.k_max)) + 1)} | {args.k_max})
    with open(os.path.join(out, "lambda.csv"), "w") as fh:
        fh.write("k,lambda_k\n")
        for k in ks:
            fh.write(f"{int(k)},{float(lams[k - 1])!r}\n")
    diag = measures.classify_growth(lams) if args.k_max >= 4 else None
    _finish(args, {"lambda.json": {
        "final": float(lams[-1]),
        "kind": diag.kind if diag else None,
        "exponent": diag.exponent if diag else None}})
    kind = diag.kind if diag else "undetermined"
    verdict = "convergent" if diag and diag.convergent else "divergent"
    print(f"lambda: lambda_{args.k_max} = {float(lams[-1])!r} growth {kind} ({verdict})")
    return EXIT_OK


def cmd_partition(args) -> int:
    _require(args, "n_list", "count")
    ns = _int_list(args.n_list)
    if not ns:
        raise ConfigError("--n-list is empty")
    if args.modes is None:
        args.modes = ns[0]
    params = _params(args)
    config = _measure(args, params, method="importance")
    rows = measures.partition_stability(config, ns, args.count, args.seed, args.workers)
    out = _outdir(args)
    with open(os.path.join(out, "partition.csv"), "w") as fh:
        fh.write("N,Z,std_error,ess\n")
        for r in rows:
            fh.write(f"{r.n_modes},{r.z!r},{r.std_error!r},{r.ess!r}\n")
    ok = measures.no_growth(rows)
    _finish(args, {"partition.json": {
        "rows": [dict(vars(r), degenerate=r.degenerate) for r in rows], "no_growth": ok}})
    for r in rows:
        if r.degenerate:
            print(f"partition: N={r.n_modes} has ESS {r.ess:.1f} < 10", file=sys.stderr)
    print("partition: " + " ".join(f"Z_{r.n_modes}={r.z:.4g}+-{r.std_error:.2g}" for r in rows)
          + f" {'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_ASSERT


def cmd_growth(args) -> int:
    params = _params(args)
    _require(args, "time", "count", "checkpoints")
    config = _measure(args, params)
    sigma = args.sigma if args.sigma is not None else params.s
    table = experiments.norm_growth(config, args.time, _float_list(args.checkpoints),
                                    args.count, sigma, args.seed,
                                    _integrator(args, params), args.workers)
    out = _outdir(args)
    table.write_csv(os.path.join(out, "growth.csv"))
    _finish(args, {"growth.json": table.to_dict()})
    if table.aborted:
        print(f"growth: integration aborted: {table.message}", file=sys.stderr)
        return EXIT_NUMERIC
    fit = table.fit(0.99) if len(table.times) >= 3 else None
    note = "" if fit is None else f" log-model preferred: {fit.prefers_log}"
    print(f"growth: {len(table.times)} checkpoints, max KS {max(table.ks, default=0):.3g} "
          f"(limit {table.ks_limit:.3g}){note}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _common(p: argparse.ArgumentParser, model=True):
    p.add_argument("--config", help="file of key = value defaults")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: available cores)")
    if model:
        p.add_argument("--alpha", type=float)
        p.add_argument("--gamma", type=int, choices=(-1, 1))
        p.add_argument("--modes", type=int, help="truncation order N")
    p.add_argument("--s", type=float, help="regularity index")


def _measure_flags(p):
    p.add_argument("--l2-cutoff", type=float, default=None, help="L2 cutoff B (focusing)")
    p.add_argument("--zero-mode", choices=measures.ZERO_MODES, default="pinned")
    p.add_argument("--sigma0", type=float, default=1.0)


def _time_flags(p, default_scheme="strang"):
    p.add_argument("--time", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--scheme", choices=dynamics.SCHEMES, default=default_scheme)
    p.add_argument("--substep", choices=("midpoint", "pointwise"), default="midpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fracnls", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("evolve", help="integrate one initial state")
    _common(p)
    _time_flags(p)
    p.add_argument("--init", help="plane_wave:n:a | power_law:s:delta:seed | file:path")
    p.add_argument("--record-every", type=int, default=1)
    p.add_argument("--sigmas", help="comma-separated Sobolev indices to log")
    p.set_defaults(handler=cmd_evolve)

    p = sub.add_parser("sample", help="draw from the Gibbs measure")
    _common(p)
    _measure_flags(p)
    p.add_argument("--count", type=int)
    p.add_argument("--method", choices=measures.METHODS, default="rejection")
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser("invariance", help="paired invariance test")
    _common(p)
    _measure_flags(p)
    _time_flags(p)
    p.add_argument("--count", type=int)
    p.add_argument("--method", choices=measures.METHODS, default="rejection")
    p.add_argument("--nested", help="comma-separated smaller counts also reported")
    p.add_argument("--z-max", type=float, default=3.0)
    p.add_argument("--drift-max", type=float, default=1e-10)
    p.set_defaults(handler=cmd_invariance, alpha=0.75, gamma=-1, zero_mode="gaussian")

    p = sub.add_parser("tails", help="Gaussian tail test of the H^s norm")
    _common(p)
    _measure_flags(p)
    p.add_argument("--count", type=int)
    p.add_argument("--k-grid", default="1,1.5,2,2.5,3,3.5,4")
    p.set_defaults(handler=cmd_tails, gamma=-1)

    p = sub.add_parser("converge", help="truncation convergence study")
    _common(p)
    _time_flags(p, default_scheme="rk4")
    p.add_argument("--s-prime", type=float)
    p.add_argument("--n-list", help="comma-separated truncation orders")
    p.add_argument("--n-ref", type=int)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--init-seed", type=int, default=0, help="seed of the initial phases")
    p.add_argument("--slope-tol", type=float, default=0.3,
                   help="accepted slope deviation as a fraction of s - s'")
    p.set_defaults(handler=cmd_converge, modes=8)

    p = sub.add_parser("lambda", help="partial sums of the covariance trace")
    _common(p, model=False)
    p.add_argument("--alpha", type=float)
    p.add_argument("--k-max", type=int)
    p.add_argument("--rows", choices=("dyadic", "all"), default="dyadic")
    p.set_defaults(handler=cmd_lambda)

    p = sub.add_parser("partition", help="normalizing constant across N")
    _common(p)
    _measure_flags(p)
    p.add_argument("--n-list")
    p.add_argument("--count", type=int)
    p.set_defaults(handler=cmd_partition)

    p = sub.add_parser("growth", help="ensemble norm quantiles along the flow")
    _common(p)
    _measure_flags(p)
    _time_flags(p)
    p.add_argument("--count", type=int)
    p.add_argument("--method", choices=measures.METHODS, default="rejection")
    p.add_argument("--checkpoints", help="comma-separated times")
    p.add_argument("--sigma", type=float)
    p.set_defaults(handler=cmd_growth)
    return parser


def _apply_config_file(parser, sub_parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = read_config_file(args.config)
        known = {a.dest: a for a in sub_parser._actions}
        defaults = {}
        for key, text in values.items():
            action = known.get(key)
            if action is None or key in ("config", "help"):
                raise ConfigError(f"unknown config key {key!r}")
            conv = action.type or str
            try:
                defaults[key] = conv(text)
            except ValueError as exc:
                raise ConfigError(f"config key {key}: {exc}") from exc
            if action.choices is not None and defaults[key] not in action.choices:
                raise ConfigError(f"config key {key}: {text!r} not in {list(action.choices)}")
        sub_parser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _usage_for(parser, argv) -> None:
    choices = parser._subparsers._group_actions[0].choices
    cmd = next((a for a in argv if a in choices), None)
    (choices[cmd] if cmd else parser).print_usage(sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_CONFIG
        sub_parser = parser._subparsers._group_actions[0].choices[args.command]
        args = _apply_config_file(parser, sub_parser, argv)
        if args.workers is None:
            args.workers = streams.default_workers()
        return args.handler(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        _usage_for(parser, argv)
        print(f"fracnls: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (dynamics.IntegrationError, dynamics.ContractionError,
            measures.SamplingError) as exc:
        print(f"fracnls: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, spectral.DimensionError) as exc:
        print(f"fracnls: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
