"""Shared domain types and parameter validation for all three engines."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields
from typing import Any, Mapping, Optional, Sequence

import numpy as np

PROB_TOL = 1e-12
PROB_HARD_TOL = 1e-6


class ParameterError(ValueError):
    """Raised for inconsistent or out-of-range system parameters."""


class Scenario(str, enum.Enum):
    BLOCKING = "blocking"
    QUEUEING = "queueing"

    @classmethod
    def parse(cls, value: "Scenario | str") -> "Scenario":
        if isinstance(value, Scenario):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ParameterError(f"unknown scenario {value!r}; expected blocking or queueing") from None


def _probability_vector(name: str, values: Sequence[float], strict: bool) -> tuple[float, ...]:
    vec = np.asarray(values, dtype=float)
    if vec.ndim != 1 or vec.size == 0:
        raise ParameterError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(vec)):
        raise ParameterError(f"{name} has non-finite entries")
    if strict and np.any(vec <= 0):
        raise ParameterError(f"every {name}_r must be > 0")
    if np.any(vec < 0):
        raise ParameterError(f"every {name}_r must be >= 0")
    total = float(vec.sum())
    if abs(total - 1.0) > PROB_HARD_TOL:
        raise ParameterError(f"{name} sums to {total:.12g}, not 1")
    if abs(total - 1.0) > PROB_TOL:
        vec = vec / total
    return tuple(float(v) for v in vec)


def default_truncation(lam: float) -> int:
    """Queue-length truncation: max(200, smallest K with lam**K < 1e-12)."""
    if lam <= 0:
        return 200
    k = math.floor(math.log(1e-12) / math.log(lam)) + 1
    return max(200, k)


@dataclass(frozen=True)
class SystemParams:
    """Normalized system parameterization.

    Dispatchers are stored with ``alpha`` nonincreasing.  ``order[i]`` is the
    caller's (0-based) index of stored dispatcher ``i``; use
    :meth:`to_caller_order` to map per-dispatcher outputs back.

    ``n_servers`` may be ``None`` for many-server (fluid) computations.
    """

    n_servers: Optional[int]
    n_dispatchers: int
    lam: float
    alpha: tuple[float, ...]
    beta: tuple[float, ...]
    nu: float = 0.0
    scenario: Scenario = Scenario.BLOCKING
    order: tuple[int, ...] = ()

    @property
    def R(self) -> int:
        return self.n_dispatchers

    @property
    def N(self) -> Optional[int]:
        return self.n_servers

    @property
    def is_basic(self) -> bool:
        """Uniform token allotment and no token exchange."""
        R = self.n_dispatchers
        return self.nu == 0.0 and all(abs(b - 1.0 / R) <= PROB_TOL for b in self.beta)

    @property
    def is_symmetric(self) -> bool:
        R = self.n_dispatchers
        return all(abs(a - 1.0 / R) <= PROB_TOL for a in self.alpha)

    def to_caller_order(self, values: Sequence[Any]) -> list:
        if len(values) != self.n_dispatchers:
            raise ValueError("expected one value per dispatcher")
        out: list = [None] * self.n_dispatchers
        for stored, caller in enumerate(self.order):
            out[caller] = values[stored]
        return out

    def replace(self, **changes: Any) -> "SystemParams":
        """Return validated parameters with some fields changed (caller order preserved)."""
        raw = self.to_dict()
        raw["alpha"] = self.to_caller_order(self.alpha)
        raw["beta"] = self.to_caller_order(self.beta)
        raw.update(changes)
        if "alpha" in changes and "n_dispatchers" not in changes:
            raw["n_dispatchers"] = len(changes["alpha"])
            if "beta" not in changes:
                raw.pop("beta")
        return validate(raw)

    def to_dict(self) -> dict[str, Any]:
        """JSON-schema dict (vectors in stored order)."""
        return {
            "n_servers": self.n_servers,
            "n_dispatchers": self.n_dispatchers,
            "lambda": self.lam,
            "alpha": list(self.alpha),
            "beta": list(self.beta),
            "nu": self.nu,
            "scenario": self.scenario.value,
        }

    def to_json_dict(self) -> dict[str, Any]:
        """JSON-schema dict in the caller's dispatcher order."""
        d = self.to_dict()
        d["alpha"] = self.to_caller_order(self.alpha)
        d["beta"] = self.to_caller_order(self.beta)
        return d


JSON_KEYS = frozenset({"n_servers", "n_dispatchers", "lambda", "alpha", "beta", "nu", "scenario"})


def validate(raw: "SystemParams | Mapping[str, Any]") -> SystemParams:
    """Normalize raw parameters (JSON-schema mapping or SystemParams).

    Sorts alpha nonincreasing (stable), fills defaults (beta uniform, nu 0,
    scenario blocking) and rejects inconsistent input.  Idempotent.
    """
    if isinstance(raw, SystemParams):
        prior_order = raw.order or tuple(range(raw.n_dispatchers))
        data: dict[str, Any] = raw.to_dict()
    else:
        unknown = set(raw) - JSON_KEYS
        if unknown:
            raise ParameterError(f"unknown parameter keys: {sorted(unknown)}")
        data = dict(raw)
        prior_order = None

    if "lambda" not in data or "alpha" not in data:
        raise ParameterError("lambda and alpha are required")
    try:
        lam = float(data["lambda"])
    except (TypeError, ValueError):
        raise ParameterError("lambda must be a real number") from None
    if not math.isfinite(lam) or lam <= 0:
        raise ParameterError("lambda must be > 0")

    alpha = _probability_vector("alpha", data["alpha"], strict=True)
    R = data.get("n_dispatchers")
    if R is None:
        R = len(alpha)
    if int(R) != R or R < 1:
        raise ParameterError("n_dispatchers must be a positive integer")
    R = int(R)
    if len(alpha) != R:
        raise ParameterError(f"alpha has length {len(alpha)} but n_dispatchers = {R}")

    beta_raw = data.get("beta")
    beta = tuple([1.0 / R] * R) if beta_raw is None else _probability_vector("beta", beta_raw, strict=False)
    if len(beta) != R:
        raise ParameterError(f"beta has length {len(beta)} but n_dispatchers = {R}")

    nu = float(data.get("nu", 0.0) or 0.0)
    if not math.isfinite(nu) or nu < 0:
        raise ParameterError("nu must be >= 0")

    N = data.get("n_servers")
    if N is not None:
        if isinstance(N, float) and math.isinf(N):
            N = None
        elif int(N) != N or N < 1:
            raise ParameterError("n_servers must be a positive integer")
        else:
            N = int(N)

    scenario = Scenario.parse(data.get("scenario", Scenario.BLOCKING))
    if scenario is Scenario.QUEUEING and lam >= 1.0:
        raise ParameterError(f"queueing scenario is unstable for lambda = {lam} >= 1")

    perm = sorted(range(R), key=lambda i: -alpha[i])
    alpha_s = tuple(alpha[i] for i in perm)
    beta_s = tuple(beta[i] for i in perm)
    order = tuple(perm) if prior_order is None else tuple(prior_order[i] for i in perm)
    return SystemParams(
        n_servers=N,
        n_dispatchers=R,
        lam=lam,
        alpha=alpha_s,
        beta=beta_s,
        nu=nu,
        scenario=scenario,
        order=order,
    )


def make_params(
    lam: float,
    alpha: Sequence[float],
    *,
    N: Optional[int] = None,
    beta: Optional[Sequence[float]] = None,
    nu: float = 0.0,
    scenario: "Scenario | str" = Scenario.BLOCKING,
) -> SystemParams:
    """Keyword-friendly front end to :func:`validate`."""
    raw: dict[str, Any] = {"lambda": lam, "alpha": list(alpha), "nu": nu, "scenario": scenario}
    raw["n_servers"] = N
    if beta is not None:
        raw["beta"] = list(beta)
    return validate(raw)


def uniform(R: int) -> tuple[float, ...]:
    return tuple([1.0 / R] * R)


# ---------------------------------------------------------------------------
# Fluid states
# ---------------------------------------------------------------------------

def _clamp_small_negatives(v: np.ndarray, name: str) -> np.ndarray:
    if np.any(v < -1e-12):
        raise ParameterError(f"{name} has negative components")
    return np.where(v < 0, 0.0, v)


@dataclass(frozen=True)
class FluidStateBlocking:
    """x[0] busy-server fraction, x[r] token fraction at dispatcher r."""

    x: np.ndarray

    def __post_init__(self) -> None:
        x = _clamp_small_negatives(np.array(self.x, dtype=float), "x")
        if abs(x.sum() - 1.0) > 1e-9:
            raise ParameterError(f"blocking fluid state must sum to 1 (got {x.sum():.12g})")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @classmethod
    def all_idle(cls, params: SystemParams) -> "FluidStateBlocking":
        return cls(np.concatenate([[0.0], params.beta]))

    def as_vector(self) -> np.ndarray:
        return self.x.copy()


@dataclass(frozen=True)
class FluidStateQueueing:
    """y[i] fraction of servers with i jobs (i <= K); x[r] token fractions."""

    y: np.ndarray
    x: np.ndarray

    def __post_init__(self) -> None:
        y = _clamp_small_negatives(np.array(self.y, dtype=float), "y")
        x = _clamp_small_negatives(np.array(self.x, dtype=float), "x")
        if abs(y.sum() - 1.0) > 1e-8:
            raise ParameterError(f"queue-length distribution must sum to 1 (got {y.sum():.12g})")
        if abs(x.sum() - y[0]) > 1e-8:
            raise ParameterError("token mass must equal the idle-server fraction y[0]")
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def K(self) -> int:
        return self.y.size - 1

    @classmethod
    def all_idle(cls, params: SystemParams, K: Optional[int] = None) -> "FluidStateQueueing":
        K = default_truncation(params.lam) if K is None else K
        y = np.zeros(K + 1)
        y[0] = 1.0
        return cls(y, np.array(params.beta, dtype=float))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.y, self.x])


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FixedPointReport:
    """Solved fluid fixed point of either scenario."""

    scenario: Scenario
    params: SystemParams
    # blocking
    x0_star: Optional[float] = None
    blocking_B: Optional[float] = None
    # queueing
    lambda1_star: Optional[float] = None
    lambda2_star: Optional[float] = None
    mean_wait_EW: Optional[float] = None
    y0_star: Optional[float] = None
    # token placement; token_split is None when the split is not unique
    token_split: Optional[tuple[float, ...]] = None
    token_holders: tuple[int, ...] = ()
    token_mass: float = 0.0
    z_star: tuple[float, ...] = ()
    iterations: int = 0
    residual: float = 0.0
    method: str = ""

    @property
    def split_unique(self) -> bool:
        return self.token_split is not None

    def queue_length_distribution(self, K: int) -> np.ndarray:
        """Fixed-point y_0..y_K (queueing scenario)."""
        if self.scenario is not Scenario.QUEUEING:
            raise ValueError("queue-length distribution only exists for the queueing scenario")
        lam = self.params.lam
        l2 = self.lambda2_star
        y = np.empty(K + 1)
        y[0] = 1.0 - lam
        k = np.arange(1, K + 1)
        y[1:] = lam * (1.0 - l2) * np.power(l2, k - 1)
        return y

    def fluid_state(self, K: Optional[int] = None):
        """A fluid state realizing this fixed point (uniform split over holders if non-unique)."""
        R = self.params.n_dispatchers
        if self.token_split is not None:
            x = np.array(self.token_split)
        else:
            x = np.zeros(R)
            x[list(self.token_holders)] = self.token_mass / len(self.token_holders)
        if self.scenario is Scenario.BLOCKING:
            return FluidStateBlocking(np.concatenate([[self.x0_star], x]))
        K = default_truncation(self.params.lam) if K is None else K
        return FluidStateQueueing(self.queue_length_distribution(K), x)

    def to_dict(self) -> dict[str, Any]:
        p = self.params
        out: dict[str, Any] = {"scenario": self.scenario.value, "params": p.to_json_dict()}
        if self.scenario is Scenario.BLOCKING:
            out.update(x0_star=self.x0_star, B=self.blocking_B)
        else:
            out.update(
                lambda1_star=self.lambda1_star,
                lambda2_star=self.lambda2_star,
                EW=self.mean_wait_EW,
                y0_star=self.y0_star,
            )
        if self.token_split is not None:
            out["token_split"] = p.to_caller_order(list(self.token_split))
        else:
            out["token_split"] = "non-unique"
            out["token_holders"] = sorted(p.order[i] for i in self.token_holders)
            out["token_mass"] = self.token_mass
        out["z_star"] = p.to_caller_order(list(self.z_star))
        out["diagnostics"] = {"iterations": self.iterations, "residual": self.residual, "method": self.method}
        return out


@dataclass
class SimStats:
    """Counters and time averages from one simulation run, or an aggregate of runs.

    Aggregates keep the per-replication estimates in ``rep_estimates`` and
    pool the counters; :meth:`merge` is associative.
    """

    scenario: Scenario
    total_arrivals: int = 0
    blocked_jobs: int = 0
    random_routed: int = 0
    n_waits: int = 0
    sum_wait: float = 0.0
    sum_wait_sq: float = 0.0
    observed_time: float = 0.0
    time_avg_state: Optional[np.ndarray] = None
    labels: tuple[str, ...] = ()
    warmup_cut: float = 0.0
    horizon: float = 0.0
    events: int = 0
    seeds: list[int] = field(default_factory=list)
    rep_estimates: list[float] = field(default_factory=list)
    extras: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.blocked_jobs > self.total_arrivals:
            raise ValueError("blocked_jobs exceeds total_arrivals")

    @property
    def blocking_probability(self) -> float:
        return self.blocked_jobs / self.total_arrivals if self.total_arrivals else float("nan")

    @property
    def mean_wait(self) -> float:
        return self.sum_wait / self.n_waits if self.n_waits else float("nan")

    @property
    def estimate(self) -> float:
        """Primary per-run estimate: blocking probability or mean wait."""
        if self.scenario is Scenario.BLOCKING:
            return self.blocking_probability
        return self.mean_wait

    @property
    def n_reps(self) -> int:
        return len(self.rep_estimates)

    @property
    def rep_mean(self) -> float:
        return float(np.mean(self.rep_estimates)) if self.rep_estimates else float("nan")

    @property
    def ci_halfwidth(self) -> Optional[float]:
        """95% normal-approximation half-width over replications (None below 2 reps)."""
        n = len(self.rep_estimates)
        if n < 2:
            return None
        return 1.959963984540054 * float(np.std(self.rep_estimates, ddof=1)) / math.sqrt(n)

    def time_average(self, label: str) -> float:
        return float(self.time_avg_state[self.labels.index(label)])

    def merge(self, other: "SimStats") -> "SimStats":
        if other.scenario is not self.scenario:
            raise ValueError("cannot merge statistics of different scenarios")
        if self.time_avg_state is None:
            tavg = other.time_avg_state
        elif other.time_avg_state is None:
            tavg = self.time_avg_state
        else:
            w = self.observed_time + other.observed_time
            tavg = (self.time_avg_state * self.observed_time + other.time_avg_state * other.observed_time) / w
        extras = dict(self.extras)
        for key, val in other.extras.items():
            if key in extras and isinstance(val, np.ndarray):
                if key.startswith("occupancy"):
                    extras[key] = extras[key] + val
                else:
                    w = self.observed_time + other.observed_time
                    extras[key] = (extras[key] * self.observed_time + val * other.observed_time) / w
            else:
                extras.setdefault(key, val)
        return SimStats(
            scenario=self.scenario,
            total_arrivals=self.total_arrivals + other.total_arrivals,
            blocked_jobs=self.blocked_jobs + other.blocked_jobs,
            random_routed=self.random_routed + other.random_routed,
            n_waits=self.n_waits + other.n_waits,
            sum_wait=self.sum_wait + other.sum_wait,
            sum_wait_sq=self.sum_wait_sq + other.sum_wait_sq,
            observed_time=self.observed_time + other.observed_time,
            time_avg_state=tavg,
            labels=self.labels or other.labels,
            warmup_cut=self.warmup_cut,
            horizon=self.horizon,
            events=self.events + other.events,
            seeds=self.seeds + other.seeds,
            rep_estimates=self.rep_estimates + other.rep_estimates,
            extras=extras,
        )

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("time_avg_state", "extras")}
        out["scenario"] = self.scenario.value
        out["labels"] = list(self.labels)
        if self.time_avg_state is not None:
            out["time_avg_state"] = dict(zip(self.labels, map(float, self.time_avg_state)))
        out["estimate"] = self.estimate
        out["rep_mean"] = self.rep_mean
        out["ci_halfwidth"] = self.ci_halfwidth
        return out
