"""Many-server fluid limits: right-hand sides, RK4 trajectories and fixed points."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .model import (
    FixedPointReport,
    FluidStateBlocking,
    FluidStateQueueing,
    ParameterError,
    Scenario,
    SystemParams,
)

EPS_ZERO = 1e-9
BLOWUP = 10.0
PROJECT_TOL = 1e-9
QUEUE_MAX_ITER = 10_000
QUEUE_TOL = 1e-13

FluidState = Union[FluidStateBlocking, FluidStateQueueing]


class FluidBlowUp(RuntimeError):
    pass


@dataclass(frozen=True)
class FluidDerivative:
    """Time derivative of a fluid state plus the token-use rates behind it."""

    d: np.ndarray
    z: np.ndarray
    lambda1: float
    lambda2: float
    leak: float = 0.0

    @property
    def max_norm(self) -> float:
        return float(np.max(np.abs(self.d)))


# ---------------------------------------------------------------------------
# Right-hand sides.  The *_vec kernels work on flat vectors for the integrator.
# ---------------------------------------------------------------------------

def _blocking_vec(v: np.ndarray, alam: np.ndarray, beta: np.ndarray, nu: float):
    R = beta.size
    x0 = v[0]
    xr = v[1:]
    inflow = beta * x0 + nu * (1.0 - x0) / R
    z = np.where(xr <= EPS_ZERO, np.minimum(alam, inflow), alam)
    d = np.empty_like(v)
    d[0] = z.sum() - x0
    d[1:] = inflow - nu * xr - z
    return d, z


def _queueing_vec(v: np.ndarray, lam: float, alam: np.ndarray, beta: np.ndarray, nu: float):
    R = beta.size
    y = v[:-R]
    xr = v[-R:]
    y0, y1 = y[0], y[1]
    inflow = beta * y1 + nu * y0 / R
    z = np.where(xr <= EPS_ZERO, np.minimum(alam, inflow), alam)
    l1 = float(z.sum())
    l2 = lam - l1
    d = np.empty_like(v)
    dy = d[:-R]
    dy[0] = y1 - l1 - l2 * y0
    dy[1:] = l2 * y[:-1] - (1.0 + l2) * y[1:]
    dy[1:-1] += y[2:]
    dy[1] += l1
    d[-R:] = inflow - nu * xr - z - l2 * xr
    return d, z, l1, l2, l2 * y[-1]


def _consts(params: SystemParams):
    return np.asarray(params.alpha) * params.lam, np.asarray(params.beta, dtype=float)


def rhs_blocking(x: Union[FluidStateBlocking, np.ndarray], params: SystemParams) -> FluidDerivative:
    v = x.x if isinstance(x, FluidStateBlocking) else np.asarray(x, dtype=float)
    alam, beta = _consts(params)
    d, z = _blocking_vec(v, alam, beta, params.nu)
    l1 = float(z.sum())
    return FluidDerivative(d=d, z=z, lambda1=l1, lambda2=params.lam - l1)


def rhs_queueing(u: Union[FluidStateQueueing, np.ndarray], params: SystemParams) -> FluidDerivative:
    """Queueing-scenario derivative; y beyond the truncation level is taken as 0
    and the outflow lambda2 * y_K past it is reported as ``leak``."""
    v = u.as_vector() if isinstance(u, FluidStateQueueing) else np.asarray(u, dtype=float)
    alam, beta = _consts(params)
    d, z, l1, l2, leak = _queueing_vec(v, params.lam, alam, beta, params.nu)
    return FluidDerivative(d=d, z=z, lambda1=l1, lambda2=l2, leak=leak)


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    scenario: Scenario
    R: int
    t: np.ndarray
    states: np.ndarray  # blocking: x_0..x_R; queueing: y_0..y_K, x_1..x_R
    z: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray
    leak: np.ndarray  # cumulative truncation leak

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def y(self) -> np.ndarray:
        return self.states[:, : -self.R]

    def x(self) -> np.ndarray:
        """Token fractions per dispatcher (blocking: excludes x_0)."""
        return self.states[:, -self.R:]

    def conservation_error(self) -> float:
        if self.scenario is Scenario.BLOCKING:
            return float(np.max(np.abs(self.states.sum(axis=1) - 1.0)))
        y, x = self.y(), self.x()
        tok = np.max(np.abs(x.sum(axis=1) - y[:, 0]))
        mass = np.max(np.abs(y.sum(axis=1) - 1.0) - self.leak)
        return float(max(tok, mass, 0.0))

    def to_csv(self, path, k_display: int = 10, header_comment: Optional[str] = None) -> None:
        R = self.R
        if self.scenario is Scenario.BLOCKING:
            cols = ["t"] + [f"x_{i}" for i in range(R + 1)]
            rows = np.column_stack([self.t, self.states])
        else:
            y = self.y()
            kd = min(k_display, y.shape[1] - 1)
            cols = ["t"] + [f"y_{i}" for i in range(kd + 1)] + [f"x_{r}" for r in range(1, R + 1)]
            cols += ["lambda1", "lambda2"]
            rows = np.column_stack([self.t, y[:, : kd + 1], self.x(), self.lambda1, self.lambda2])
        fh = path if hasattr(path, "write") else open(path, "w", newline="")
        try:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(cols)
            for row in rows:
                w.writerow([repr(float(c)) for c in row])
        finally:
            if fh is not path:
                fh.close()


def _project_blocking(v: np.ndarray) -> np.ndarray:
    neg = v[1:] < 0
    if np.any(neg):
        # tokens over-used within a step: hand the overshoot back to the busy pool
        v[0] += v[1:][neg].sum()
        v[1:][neg] = 0.0
    if v[0] < 0:
        v[0] = 0.0
    s = v.sum()
    if abs(s - 1.0) > PROJECT_TOL:
        v /= s
    return v


def _project_queueing(v: np.ndarray, R: int) -> np.ndarray:
    y = v[:-R]
    x = v[-R:]
    neg = x < 0
    if np.any(neg):
        over = -x[neg].sum()
        x[neg] = 0.0
        y[0] += over
        y[1] -= over
    np.maximum(y, 0.0, out=y)
    s = y.sum()
    if abs(s - 1.0) > PROJECT_TOL:
        y /= s
    tok = x.sum()
    if abs(tok - y[0]) > PROJECT_TOL:
        if tok > 0:
            x *= y[0] / tok
        else:
            x[:] = y[0] / R
    return v


def integrate(
    rhs: Callable,
    u0: FluidState,
    params: SystemParams,
    T: float,
    h: float = 0.01,
    sample_dt: Optional[float] = None,
) -> Trajectory:
    """Fixed-step classical RK4 from ``u0`` up to time ``T``.

    ``rhs`` is :func:`rhs_blocking` or :func:`rhs_queueing`.  States are
    sampled every ``sample_dt`` (default: every step).
    """
    if T <= 0 or h <= 0:
        raise ValueError("T and h must be positive")
    alam, beta = _consts(params)
    nu, lam, R = params.nu, params.lam, params.n_dispatchers
    if rhs is rhs_blocking or isinstance(u0, FluidStateBlocking):
        scenario = Scenario.BLOCKING
        v = u0.as_vector() if isinstance(u0, FluidStateBlocking) else np.array(u0, dtype=float)

        def f(w):
            d, z = _blocking_vec(w, alam, beta, nu)
            return d, 0.0

        def info(w):
            _, z = _blocking_vec(w, alam, beta, nu)
            l1 = float(z.sum())
            return z, l1, lam - l1

        project = _project_blocking
    else:
        scenario = Scenario.QUEUEING
        v = u0.as_vector()

        def f(w):
            d, _, _, _, leak = _queueing_vec(w, lam, alam, beta, nu)
            return d, leak

        def info(w):
            _, z, l1, l2, _ = _queueing_vec(w, lam, alam, beta, nu)
            return z, l1, l2

        def project(w):
            return _project_queueing(w, R)

    n_steps = int(math.ceil(T / h - 1e-9))
    every = 1 if sample_dt is None else max(1, int(round(sample_dt / h)))
    ts, rows, zs, l1s, l2s, leaks = [], [], [], [], [], []
    leak_total = 0.0

    def record(t, w):
        z, l1, l2 = info(w)
        ts.append(t)
        rows.append(w.copy())
        zs.append(z)
        l1s.append(l1)
        l2s.append(l2)
        leaks.append(leak_total)

    record(0.0, v)
    t = 0.0
    for step in range(1, n_steps + 1):
        hh = min(h, T - t) if step == n_steps else h
        k1, q1 = f(v)
        k2, q2 = f(v + 0.5 * hh * k1)
        k3, q3 = f(v + 0.5 * hh * k2)
        k4, q4 = f(v + hh * k3)
        v = v + (hh / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        leak_total += (hh / 6.0) * (q1 + 2 * q2 + 2 * q3 + q4)
        v = project(v)
        t = step * h if step < n_steps else T
        if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > BLOWUP:
            raise FluidBlowUp(f"fluid state blew up at t={t:.4g}")
        if step % every == 0 or step == n_steps:
            record(t, v)

    return Trajectory(
        scenario=scenario,
        R=R,
        t=np.asarray(ts),
        states=np.asarray(rows),
        z=np.asarray(zs),
        lambda1=np.asarray(l1s),
        lambda2=np.asarray(l2s),
        leak=np.asarray(leaks),
    )


# ---------------------------------------------------------------------------
# Fixed points
# ---------------------------------------------------------------------------

def _token_use_blocking(x0: float, alam: Sequence[float], beta: Sequence[float], nu: float) -> list[float]:
    R = len(beta)
    return [min(b * x0 + nu * (1.0 - x0) / R, a) for a, b in zip(alam, beta)]


def fixed_point_blocking(params: SystemParams) -> FixedPointReport:
    """Fluid fixed point of the blocking scenario.

    Solves x0 = sum_r min{beta_r x0 + nu (1 - x0)/R, alpha_r lam}.  Without
    token exchange the right side equals x0 on a whole interval, and the
    fixed point is its upper end min{1, min_r alpha_r lam / beta_r}.
    """
    R, lam, nu = params.n_dispatchers, params.lam, params.nu
    alam = [a * lam for a in params.alpha]
    beta = list(params.beta)

    def h(x0: float) -> float:
        return sum(_token_use_blocking(x0, alam, beta, nu)) - x0

    iterations = 0
    ratios = [a / b if b > 0 else math.inf for a, b in zip(alam, beta)]
    plateau_end = min(1.0, min(ratios))
    if nu == 0.0:
        x0 = plateau_end
        method = "plateau-endpoint"
    else:
        # exchange only adds tokens, so the root lies at or beyond the nu = 0 plateau
        # end; bracketing from there avoids h ~ 0 rounding on the plateau
        lo, hi = plateau_end, 1.0
        if h(1.0) >= 0.0:
            x0 = 1.0
        else:
            while hi - lo > 1e-12:
                mid = 0.5 * (lo + hi)
                iterations += 1
                if h(mid) > 0.0:
                    lo = mid
                else:
                    hi = mid
            x0 = 0.5 * (lo + hi)
            # h is piecewise linear: solve exactly on the active piece
            active = [b * x0 + nu * (1 - x0) / R < a for a, b in zip(alam, beta)]
            slope = 1.0 - sum(b - nu / R for b, act in zip(beta, active) if act)
            const = sum(nu / R if act else a for a, act in zip(alam, active))
            if slope > 0:
                exact = const / slope
                if 0.0 <= exact <= 1.0 and abs(h(exact)) <= abs(h(x0)):
                    x0 = exact
        method = "bisection"

    z = _token_use_blocking(x0, alam, beta, nu)
    residual = abs(sum(z) - x0)
    mass = max(0.0, 1.0 - x0)
    if nu > 0:
        split = tuple(max(0.0, (b * x0 + nu * (1 - x0) / R - zr) / nu) for b, zr in zip(beta, z))
        holders = tuple(r for r, s in enumerate(split) if s > 0)
    elif x0 >= 1.0:
        split, holders = tuple([0.0] * R), ()
    else:
        m = min(ratios)
        holders = tuple(r for r, q in enumerate(ratios) if q <= m * (1 + 1e-12))
        if len(holders) == 1:
            s = [0.0] * R
            s[holders[0]] = mass
            split = tuple(s)
        else:
            split = None
    B = min(1.0, max(0.0, 1.0 - x0 / lam))
    return FixedPointReport(
        scenario=Scenario.BLOCKING,
        params=params,
        x0_star=x0,
        blocking_B=B,
        token_split=split,
        token_holders=holders,
        token_mass=mass,
        z_star=tuple(z),
        iterations=iterations,
        residual=residual,
        method=method,
    )


def fixed_point_queueing(params: SystemParams) -> FixedPointReport:
    """Fluid fixed point of the queueing scenario.

    Iterates lambda1 <- sum_r min{beta_r lam (1 - lam + lambda1) + nu (1 - lam)/R,
    alpha_r lam} from 0; the map has slope at most lam < 1.
    """
    R, lam, nu = params.n_dispatchers, params.lam, params.nu
    if lam >= 1.0:
        raise ParameterError("queueing fixed point needs lambda < 1")
    alam = [a * lam for a in params.alpha]
    beta = list(params.beta)
    ex = nu * (1.0 - lam) / R

    def q(l1: float) -> list[float]:
        return [b * lam * (1.0 - lam + l1) + ex for b in beta]

    def F(l1: float) -> float:
        return sum(min(qr, a) for qr, a in zip(q(l1), alam))

    l1 = 0.0
    iterations = 0
    converged = False
    method = "contraction"
    while iterations < QUEUE_MAX_ITER:
        nxt = F(l1)
        iterations += 1
        if abs(nxt - l1) <= QUEUE_TOL:
            l1 = nxt
            converged = True
            break
        l1 = nxt
    if not converged:
        lo, hi = 0.0, lam
        while hi - lo > 1e-15:
            mid = 0.5 * (lo + hi)
            if F(mid) > mid:
                lo = mid
            else:
                hi = mid
        l1 = 0.5 * (lo + hi)
        method = "bisection"

    qs = q(l1)
    active = [qr < a for qr, a in zip(qs, alam)]
    slope = 1.0 - lam * sum(b for b, act in zip(beta, active) if act)
    const = sum(b * lam * (1.0 - lam) + ex if act else a for a, b, act in zip(alam, beta, active))
    exact = const / slope
    if 0.0 <= exact <= lam and abs(F(exact) - exact) <= abs(F(l1) - l1):
        l1 = exact
    l1 = min(l1, lam)

    l2 = max(0.0, lam - l1)
    qs = q(l1)
    z = [min(qr, a) for qr, a in zip(qs, alam)]
    residual = abs(sum(z) - l1)
    mass = 1.0 - lam
    damp = l2 + nu
    if damp > 1e-14:
        split = tuple(max(0.0, (qr - zr) / damp) for qr, zr in zip(qs, z))
        holders = tuple(r for r, s in enumerate(split) if s > 0)
    else:
        holders = tuple(r for r, (qr, a) in enumerate(zip(qs, alam)) if qr >= a * (1 - 1e-12))
        if len(holders) == 1:
            s = [0.0] * R
            s[holders[0]] = mass
            split = tuple(s)
        else:
            split = None
    return FixedPointReport(
        scenario=Scenario.QUEUEING,
        params=params,
        lambda1_star=l1,
        lambda2_star=l2,
        mean_wait_EW=l2 / (1.0 - l2),
        y0_star=1.0 - lam,
        token_split=split,
        token_holders=holders,
        token_mass=mass,
        z_star=tuple(z),
        iterations=iterations,
        residual=residual,
        method=method,
    )


def fixed_point(params: SystemParams) -> FixedPointReport:
    if params.scenario is Scenario.BLOCKING:
        return fixed_point_blocking(params)
    return fixed_point_queueing(params)


def mean_wait_closed_form(R: int, lam: float, alpha: Sequence[float]) -> tuple[int, float, float]:
    """Basic-JIQ many-server limit: (r_star, forwarding rate lambda2, mean wait).

    r_star is the largest r with alpha_r > (1/R)(1 - lam S_r)/(1 - lam r/R),
    S_r the sum of the r largest alphas; 0 if there is none.
    """
    if lam >= 1.0:
        raise ParameterError("mean wait limit needs lambda < 1")
    a = sorted(alpha, reverse=True)
    r_star = 0
    s = 0.0
    s_star = 0.0
    for r in range(1, R + 1):
        s += a[r - 1]
        threshold = (1.0 - lam * s) / (1.0 - lam * r / R) / R
        if a[r - 1] - threshold > 1e-14:
            r_star, s_star = r, s
    if r_star == 0:
        return 0, 0.0, 0.0
    l2 = 1.0 - (1.0 - lam * s_star) / (1.0 - lam * r_star / R)
    return r_star, l2, l2 / (1.0 - l2)


def exchange_rate_threshold(R: int, lam: float, alpha: Sequence[float]) -> float:
    """Smallest token-exchange rate that removes many-server blocking and wait."""
    if lam >= 1.0:
        raise ParameterError("the exchange-rate threshold needs lambda < 1")
    return max(0.0, lam * (max(alpha) * R - 1.0) / (1.0 - lam))


def default_initial_state(params: SystemParams, K: Optional[int] = None) -> FluidState:
    if params.scenario is Scenario.BLOCKING:
        return FluidStateBlocking.all_idle(params)
    return FluidStateQueueing.all_idle(params, K)


def trajectory(params: SystemParams, T: float, h: float = 0.01, u0: Optional[FluidState] = None,
               sample_dt: Optional[float] = None, K: Optional[int] = None) -> Trajectory:
    u0 = default_initial_state(params, K) if u0 is None else u0
    rhs = rhs_blocking if params.scenario is Scenario.BLOCKING else rhs_queueing
    return integrate(rhs, u0, params, T, h, sample_dt)
