"""Named experiments: parameter grids, output files and manifests."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import __version__
from . import analytic, fluid, sim
from .model import ParameterError, Scenario, make_params, validate

EXPERIMENTS = ("table1", "table3", "fig2", "fig3", "fig4", "fig5", "custom")
DEFAULT_SEED = 20240601


@dataclass
class ExperimentSpec:
    """Fully resolved experiment: ``settings`` alone determines every output value."""

    name: str
    settings: dict[str, Any]
    out: Path
    jobs: int = 1

    def manifest(self) -> dict[str, Any]:
        return {
            "experiment": self.name,
            "settings": self.settings,
            "versions": versions(),
        }


@dataclass
class ExperimentResult:
    files: list[Path] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    manifest_hash: str = ""

    @property
    def ok(self) -> bool:
        return not self.failures


def versions() -> dict[str, str]:
    import numba
    import scipy

    return {
        "jiqlab": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def manifest_hash(manifest: dict[str, Any]) -> str:
    return hashlib.sha256(canonical_json(manifest).encode()).hexdigest()


def seed_from_env(seed: Optional[int]) -> int:
    if seed is not None:
        return int(seed)
    env = os.environ.get("JIQLAB_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ParameterError(f"JIQLAB_SEED must be an integer, got {env!r}") from None
    return DEFAULT_SEED


# ---------------------------------------------------------------------------
# Defaults
# ---------------------------------------------------------------------------

def default_settings(name: str, *, quick: bool = False) -> dict[str, Any]:
    if name == "table1":
        s = {"lambda": 0.9, "alpha1": [0.8, 0.6], "N": [10, 20, 50, 100],
             "reps": 10, "min_arrivals": 1e6, "seed": DEFAULT_SEED}
        if quick:
            s.update(reps=3, min_arrivals=1e5)
    elif name == "table3":
        s = {"lambda": 0.9, "alpha1": [0.8, 0.6], "N": [10, 20, 50, 100, 200, 500, 1000],
             "reps": 10, "min_arrivals": 1e6, "seed": DEFAULT_SEED}
        if quick:
            s.update(reps=3, min_arrivals=1e5)
    elif name == "fig2":
        n_lam, n_alpha = (61, 51) if not quick else (13, 11)
        s = {"N": 100_000, "lambda_range": [0.5, 1.5], "alpha1_range": [0.5, 0.99],
             "grid": [n_lam, n_alpha]}
    elif name == "fig3":
        s = {"lambda": 0.9, "alpha1": 0.8, "N": 100, "T": 20.0, "h": 0.01, "sample_dt": 0.1,
             "bin_width": 0.1, "reps": 50 if not quick else 5, "seed": DEFAULT_SEED}
    elif name in ("fig4", "fig5"):
        n_beta, n_nu = (61, 51) if not quick else (11, 6)
        s = {"lambda": 0.9, "alpha1": 0.7, "beta1_range": [0.0, 1.0], "nu_range": [0.0, 5.0],
             "grid": [n_beta, n_nu]}
    elif name == "custom":
        s = {"engine": "analytic", "points": [], "method": "auto", "reps": 1,
             "horizon": None, "warmup": None, "seed": DEFAULT_SEED}
    else:
        raise ParameterError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    return s


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]], digest: str) -> Path:
    with open(path, "w", newline="") as fh:
        fh.write(f"# manifest sha256={digest}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path: str | os.PathLike) -> tuple[str, list[dict[str, str]]]:
    """Return (manifest hash, rows) of a file written by :func:`write_csv`."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        digest = first.split("sha256=", 1)[1] if first.startswith("#") and "sha256=" in first else ""
        return digest, list(csv.DictReader(fh))


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))
    return [fn(i) for i in items]


def _safe(fn: Callable, label: str, failures: list[str]) -> Any:
    try:
        return fn()
    except (ParameterError, fluid.FluidBlowUp, ArithmeticError, AssertionError) as exc:
        failures.append(f"{label}: {exc}")
        return None


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def _cell_seed(base: int, cell: int) -> int:
    return base + 1000 * cell


def _sim_cell(params, seed, reps, min_arrivals, jobs):
    horizon = sim.default_horizon(params, min_arrivals=min_arrivals)
    st = sim.replicate(params, seed, reps, horizon, 0.2 * horizon, jobs=jobs)
    return st.rep_mean, st.ci_halfwidth


def _table1(spec: ExperimentSpec, digest: str, res: ExperimentResult) -> None:
    s = spec.settings
    lam = s["lambda"]
    header = ["N"]
    for a in s["alpha1"]:
        header += [f"jackson_alpha1={a}", f"simulation_alpha1={a}", f"ci95_alpha1={a}"]
    rows = []
    cell = 0
    for N in s["N"]:
        row: list[Any] = [N]
        for a in s["alpha1"]:
            p = make_params(lam, (a, 1 - a), N=N)
            b = _safe(lambda: analytic.blocking_probability(p)[0], f"N={N} alpha1={a} jackson", res.failures)
            seed = _cell_seed(s["seed"], cell)
            cell += 1
            out = _safe(lambda: _sim_cell(p, seed, s["reps"], s["min_arrivals"], spec.jobs),
                        f"N={N} alpha1={a} simulation", res.failures)
            row += [b, *(out if out else (None, None))]
        rows.append(row)
    fl: list[Any] = ["inf"]
    for a in s["alpha1"]:
        p = make_params(lam, (a, 1 - a))
        fl += [_safe(lambda: analytic.blocking_probability(p, "limit")[0], f"fluid alpha1={a}", res.failures),
               None, None]
    rows.append(fl)
    res.files.append(write_csv(spec.out / "table1.csv", header, rows, digest))


def _table3(spec: ExperimentSpec, digest: str, res: ExperimentResult) -> None:
    s = spec.settings
    lam = s["lambda"]
    header = ["N"]
    for a in s["alpha1"]:
        header += [f"simulation_alpha1={a}", f"ci95_alpha1={a}"]
    rows = []
    cell = 0
    for N in s["N"]:
        row: list[Any] = [N]
        for a in s["alpha1"]:
            p = make_params(lam, (a, 1 - a), N=N, scenario=Scenario.QUEUEING)
            seed = _cell_seed(s["seed"], cell)
            cell += 1
            out = _safe(lambda: _sim_cell(p, seed, s["reps"], s["min_arrivals"], spec.jobs),
                        f"N={N} alpha1={a} simulation", res.failures)
            row += list(out) if out else [None, None]
        rows.append(row)
    fl: list[Any] = ["inf"]
    for a in s["alpha1"]:
        p = make_params(lam, (a, 1 - a), scenario=Scenario.QUEUEING)
        rep = _safe(lambda: fluid.fixed_point_queueing(p), f"fluid alpha1={a}", res.failures)
        fl += [rep.mean_wait_EW if rep else None, None]
    rows.append(fl)
    res.files.append(write_csv(spec.out / "table3.csv", header, rows, digest))


def _fig2_point(args):
    N, lam, a1 = args
    try:
        return analytic.blocking_r2_closed_form(N, lam, (a1, 1 - a1)), None
    except (ParameterError, ArithmeticError) as exc:
        return None, f"lambda={lam} alpha1={a1}: {exc}"


def crossover_alpha1(lam: float) -> float:
    """alpha1 on the curve 2(1 - alpha1) = 1/lam."""
    return 1.0 - 1.0 / (2.0 * lam)


def _fig2(spec: ExperimentSpec, digest: str, res: ExperimentResult) -> None:
    s = spec.settings
    lams = np.round(np.linspace(*s["lambda_range"], s["grid"][0]), 12)
    alphas = np.round(np.linspace(*s["alpha1_range"], s["grid"][1]), 12)
    pts = [(s["N"], float(l), float(a)) for l in lams for a in alphas]
    out = _pmap(_fig2_point, pts, spec.jobs)
    rows = []
    for (_, l, a), (b, err) in zip(pts, out):
        if err:
            res.failures.append(err)
        rows.append([l, a, b])
    res.files.append(write_csv(spec.out / "fig2.csv", ["lambda", "alpha1", "B"], rows, digest))
    lo, hi = s["alpha1_range"]
    curve = []
    for l in lams:
        a = crossover_alpha1(float(l))
        if lo <= a <= hi:
            curve.append([float(l), a])
    res.files.append(write_csv(spec.out / "fig2_crossover.csv", ["lambda", "alpha1"], curve, digest))


def _fig3(spec: ExperimentSpec, digest: str, res: ExperimentResult) -> None:
    s = spec.settings
    a = s["alpha1"]
    p_inf = make_params(s["lambda"], (a, 1 - a))
    traj = _safe(lambda: fluid.trajectory(p_inf, s["T"], s["h"], sample_dt=s["sample_dt"]), "fluid", res.failures)
    if traj is not None:
        path = spec.out / "fig3_fluid.csv"
        traj.to_csv(path, header_comment=f"manifest sha256={digest}")
        res.files.append(path)
    p = make_params(s["lambda"], (a, 1 - a), N=s["N"])
    init = [0.0, *p.beta]

    def run():
        return sim.replicate(p, s["seed"], s["reps"], s["T"], 0.0, jobs=spec.jobs,
                             bin_width=s["bin_width"], init=init)

    st = _safe(run, "simulation", res.failures)
    if st is not None:
        bins = st.extras["bins"]
        t = (np.arange(bins.shape[0]) + 0.5) * s["bin_width"]
        rows = [[float(ti), *map(float, b)] for ti, b in zip(t, bins)]
        res.files.append(write_csv(spec.out / "fig3_sim.csv", ["t", *st.labels], rows, digest))


def _fig45_point(args):
    scenario, lam, a1, b1, nu = args
    try:
        p = make_params(lam, (a1, 1 - a1), beta=(b1, 1 - b1), nu=nu, scenario=scenario)
        rep = fluid.fixed_point(p)
        v = rep.blocking_B if scenario is Scenario.BLOCKING else rep.mean_wait_EW
        return v, None
    except (ParameterError, fluid.FluidBlowUp, ArithmeticError) as exc:
        return None, f"beta1={b1} nu={nu}: {exc}"


def _fig45(spec: ExperimentSpec, digest: str, res: ExperimentResult) -> None:
    s = spec.settings
    scenario = Scenario.BLOCKING if spec.name == "fig4" else Scenario.QUEUEING
    betas = np.round(np.linspace(*s["beta1_range"], s["grid"][0]), 12)
    nus = s["nu"] if s.get("nu") is not None else np.round(np.linspace(*s["nu_range"], s["grid"][1]), 12).tolist()
    pts = [(scenario, s["lambda"], s["alpha1"], float(b), float(n)) for b in betas for n in nus]
    out = _pmap(_fig45_point, pts, spec.jobs)
    col = "B" if scenario is Scenario.BLOCKING else "EW"
    rows = []
    for (_, _, _, b, n), (v, err) in zip(pts, out):
        if err:
            res.failures.append(err)
        rows.append([b, n, v])
    res.files.append(write_csv(spec.out / f"{spec.name}.csv", ["beta1", "nu", col], rows, digest))


def _custom_point(args):
    engine, raw, method, seed, reps, horizon, warmup = args
    p = validate(raw)
    if engine == "analytic":
        b, used = analytic.blocking_probability(p, method)
        return {"value": b, "ci95": None, "method": used}
    if engine == "fluid":
        rep = fluid.fixed_point(p)
        v = rep.blocking_B if p.scenario is Scenario.BLOCKING else rep.mean_wait_EW
        return {"value": v, "ci95": None, "method": rep.method}
    if engine == "sim":
        st = sim.replicate(p, seed, reps, horizon, warmup)
        return {"value": st.rep_mean, "ci95": st.ci_halfwidth, "method": "simulation"}
    raise ParameterError(f"unknown engine {engine!r}; choose analytic, fluid or sim")


def _custom(spec: ExperimentSpec, digest: str, res: ExperimentResult) -> None:
    s = spec.settings
    if not s["points"]:
        raise ParameterError("custom experiment needs a non-empty 'points' list in its config")
    rows = []
    for i, raw in enumerate(s["points"]):
        args = (s["engine"], raw, s["method"], _cell_seed(s["seed"], i), s["reps"], s["horizon"], s["warmup"])
        out = _safe(lambda: _custom_point(args), f"point {i}", res.failures)
        out = out or {"value": None, "ci95": None, "method": "error"}
        rows.append([i, canonical_json(raw), out["value"], out["ci95"], out["method"]])
    res.files.append(write_csv(spec.out / "custom.csv", ["point", "params", "value", "ci95", "method"], rows, digest))


RUNNERS = {
    "table1": _table1,
    "table3": _table3,
    "fig2": _fig2,
    "fig3": _fig3,
    "fig4": _fig45,
    "fig5": _fig45,
    "custom": _custom,
}


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    try:
        spec.out.mkdir(parents=True, exist_ok=True)
        probe = spec.out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ParameterError(f"output directory {spec.out} is not writable: {exc}") from None
    manifest = spec.manifest()
    digest = manifest_hash(manifest)
    res = ExperimentResult(manifest_hash=digest)
    mpath = spec.out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    res.files.append(mpath)
    RUNNERS[spec.name](spec, digest, res)
    return res


def load_manifest(path: str | os.PathLike) -> tuple[str, dict[str, Any]]:
    with open(path) as fh:
        m = json.load(fh)
    if m.get("experiment") not in EXPERIMENTS or not isinstance(m.get("settings"), dict):
        raise ParameterError(f"{path} is not an experiment manifest")
    if m.get("versions", {}).get("jiqlab") != __version__:
        print(f"warning: manifest written by jiqlab {m.get('versions', {}).get('jiqlab')}, "
              f"running {__version__}", file=sys.stderr)
    return m["experiment"], m["settings"]
