"""Command-line front end: ``jiqlab {analytic,fluid,simulate,experiment}``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import analytic, experiments, fluid, sim
from .model import FluidStateBlocking, ParameterError, Scenario, uniform, validate


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _vector(text: Optional[str], R: Optional[int], name: str) -> tuple[Optional[list[float]], Optional[int]]:
    if text is None:
        return None, R
    if text.strip().lower() == "uniform":
        if R is None:
            raise ParameterError(f"--{name} uniform needs --R")
        return list(uniform(R)), R
    vals = _floats(text)
    if R is not None and len(vals) != R:
        raise ParameterError(f"--{name} has {len(vals)} entries but --R is {R}")
    return vals, len(vals)


def _json_default(o: Any):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Scenario):
        return o.value
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _emit(record: dict[str, Any], out: Optional[str]) -> None:
    text = json.dumps(record, indent=2, default=_json_default)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def params_from_args(args: argparse.Namespace, scenario: Optional[str] = None):
    """Build validated SystemParams from the shared system flags."""
    alpha, R = _vector(args.alpha, args.R, "alpha")
    if alpha is None:
        raise ParameterError("--alpha is required (comma-separated fractions or 'uniform')")
    beta, _ = _vector(args.beta, R, "beta")
    N = None if getattr(args, "limit", False) else args.N
    raw = {
        "n_servers": N,
        "n_dispatchers": R,
        "lambda": args.lam,
        "alpha": alpha,
        "nu": args.nu,
        "scenario": scenario or args.scenario,
    }
    if beta is not None:
        raw["beta"] = beta
    return validate(raw)


def _add_system_flags(p: argparse.ArgumentParser, *, need_N: bool, scenario: bool = True) -> None:
    p.add_argument("--N", type=int, default=None, required=need_N, help="number of servers")
    p.add_argument("--R", type=int, default=None, help="number of dispatchers (inferred from --alpha)")
    p.add_argument("--lambda", dest="lam", type=float, required=True, help="per-server arrival rate")
    p.add_argument("--alpha", required=True, help="arrival fractions a1,a2,... or 'uniform'")
    p.add_argument("--beta", default=None, help="token allotment b1,b2,... or 'uniform' (default uniform)")
    p.add_argument("--nu", type=float, default=0.0, help="token exchange rate")
    if scenario:
        p.add_argument("--scenario", choices=[s.value for s in Scenario], default="blocking")
    p.add_argument("--out", default=None, help="output file")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_analytic(args: argparse.Namespace) -> int:
    if args.limit and args.N is not None:
        raise ParameterError("use either --N or --limit, not both")
    if not args.limit and args.N is None:
        raise ParameterError("give --N or --limit")
    params = params_from_args(args, "blocking")
    B, used = analytic.blocking_probability(params, args.method)
    record = {"B": B, "method": used, "params": params.to_json_dict()}
    if args.bounds:
        better, worse = analytic.bounding_systems(params.R, params.N, params.lam, params.alpha)
        record["bounds"] = {"better": better, "worse": worse}
    _emit(record, args.out)
    return 0


def cmd_fluid(args: argparse.Namespace) -> int:
    params = params_from_args(args)
    if args.action == "fixedpoint":
        _emit(fluid.fixed_point(params).to_dict(), args.out)
        return 0
    u0 = None
    if args.init is not None:
        if params.scenario is not Scenario.BLOCKING:
            raise ParameterError("--init is supported for the blocking scenario only")
        u0 = FluidStateBlocking(np.array(_floats(args.init)))
    traj = fluid.trajectory(params, args.T, args.h, u0=u0, sample_dt=args.sample_dt, K=args.K)
    comment = "params " + json.dumps(params.to_json_dict(), sort_keys=True)
    if args.out:
        traj.to_csv(args.out, header_comment=comment)
    else:
        traj.to_csv(sys.stdout, header_comment=comment)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    params = params_from_args(args)
    if params.N is None:
        raise ParameterError("simulation needs a finite --N")
    seed = experiments.seed_from_env(args.seed)
    if args.trace:
        sim.export_trace(params, seed, args.trace_events, args.trace)
    st = sim.replicate(params, seed, args.reps, args.horizon, args.warmup, jobs=args.jobs)
    record = st.to_dict()
    record["params"] = params.to_json_dict()
    record["base_seed"] = seed
    _emit(record, args.out)
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    if args.from_manifest:
        name, settings = experiments.load_manifest(args.from_manifest)
        if args.name is not None and args.name != name:
            raise ParameterError(f"manifest is for {name}, not {args.name}")
        out = Path(args.out) if args.out else Path(args.from_manifest).parent
    else:
        name = args.name
        if name is None:
            raise ParameterError("name an experiment or pass --from-manifest")
        settings = experiments.default_settings(name, quick=args.quick)
        if args.N is not None:
            if name not in ("table1", "table3", "fig2", "fig3"):
                raise ParameterError(f"--N does not apply to {name}")
            settings["N"] = args.N if name in ("table1", "table3") else args.N[0]
        if args.nu is not None:
            if name not in ("fig4", "fig5"):
                raise ParameterError(f"--nu does not apply to {name}")
            settings["nu"] = args.nu
        if args.grid is not None:
            if "grid" not in settings:
                raise ParameterError(f"--grid does not apply to {name}")
            settings["grid"] = args.grid
        if args.reps is not None:
            if "reps" not in settings:
                raise ParameterError(f"--reps does not apply to {name}")
            settings["reps"] = args.reps
        if "seed" in settings:
            settings["seed"] = experiments.seed_from_env(args.seed)
        if name == "custom":
            if not args.config:
                raise ParameterError("custom experiment needs --config FILE.json")
            with open(args.config) as fh:
                settings.update(json.load(fh))
        out = Path(args.out or f"results/{name}")
    spec = experiments.ExperimentSpec(name=name, settings=settings, out=out, jobs=args.jobs)
    res = experiments.run_experiment(spec)
    for f in res.files:
        print(f)
    if not res.ok:
        print(f"{len(res.failures)} computation(s) failed:", file=sys.stderr)
        for msg in res.failures:
            print(f"  {msg}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jiqlab", description="JIQ load balancing with multiple dispatchers")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analytic", help="exact blocking probability")
    _add_system_flags(p, need_N=False, scenario=False)
    p.add_argument("--limit", action="store_true", help="many-server limit (N = infinity)")
    p.add_argument("--method", choices=analytic.METHODS, default="auto")
    p.add_argument("--bounds", action="store_true", help="also report the two comparison systems")
    p.set_defaults(func=cmd_analytic)

    p = sub.add_parser("fluid", help="fluid-limit fixed point or trajectory")
    p.add_argument("action", choices=["fixedpoint", "trajectory"])
    _add_system_flags(p, need_N=False)
    p.add_argument("--T", type=float, default=50.0, help="trajectory end time")
    p.add_argument("--h", type=float, default=0.01, help="RK4 step")
    p.add_argument("--sample-dt", type=float, default=None, help="output spacing (default every step)")
    p.add_argument("--K", type=int, default=None, help="queue-length truncation (queueing)")
    p.add_argument("--init", default=None, help="initial x_0,...,x_R (blocking)")
    p.set_defaults(func=cmd_fluid)

    p = sub.add_parser("simulate", help="discrete-event simulation")
    _add_system_flags(p, need_N=True)
    p.add_argument("--seed", type=int, default=None, help="base seed (fallback: $JIQLAB_SEED)")
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--warmup", type=float, default=None)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--trace", default=None, help="also write an event trace CSV here")
    p.add_argument("--trace-events", type=int, default=1000)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="reproduce a named table or figure as data files")
    p.add_argument("name", nargs="?", choices=experiments.EXPERIMENTS)
    p.add_argument("--out", default=None, help="output directory (default results/<name>)")
    p.add_argument("--quick", action="store_true", help="fewer replications / coarser grid")
    p.add_argument("--N", type=_ints, default=None, help="override server counts")
    p.add_argument("--nu", type=_floats, default=None, help="override exchange rates (fig4/fig5)")
    p.add_argument("--grid", type=_ints, default=None, help="grid resolution, e.g. 61,51")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="base seed (fallback: $JIQLAB_SEED)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--config", default=None, help="JSON settings for the custom experiment")
    p.add_argument("--from-manifest", default=None, help="rerun exactly from a manifest.json")
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParameterError as exc:
        print(f"jiqlab: error: {exc}", file=sys.stderr)
        return 2
    except fluid.FluidBlowUp as exc:
        print(f"jiqlab: integration failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
