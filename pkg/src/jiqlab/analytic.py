"""Exact blocking analysis through the closed Jackson network of tokens.

Tokens circulate among an infinite-server station 0 (busy servers, unit
rate) and R single-server stations (dispatchers, rate alpha_r * lam * N).
An idle server routes its token to dispatcher r with probability beta_r.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import gammaincc, gammaln, logsumexp

from .model import ParameterError, Scenario, SystemParams

ENUM_LIMIT = 10**7
DEGENERATE_TOL = 1e-9


def _clamp01(b: float) -> float:
    return min(1.0, max(0.0, float(b)))


def log_partial_exp_sum(a: float, N: int) -> float:
    """log of sum_{n=0}^{N} a**n / n!, without overflow."""
    if a <= 0:
        return 0.0
    # regularized upper incomplete gamma: sum = e^a Q(N+1, a)
    q = float(gammaincc(N + 1, a))
    if q > 1e-250:
        return a + math.log(q)
    # a well above N: sum backwards from n = N, terms shrink by (N - j) / a
    head = N * math.log(a) - float(gammaln(N + 1))
    k = min(N, 4096)
    log_t = np.concatenate([[0.0], np.cumsum(np.log((N - np.arange(k)) / a))])
    if k == N or log_t[-1] < -50:
        return head + float(logsumexp(log_t))
    n = np.arange(N + 1)
    return float(logsumexp(n * math.log(a) - gammaln(n + 1)))


@dataclass(frozen=True)
class JacksonSpec:
    """Closed-network description: service rates and relative throughputs."""

    N: int
    mu: np.ndarray
    gamma: np.ndarray

    @classmethod
    def from_params(cls, params: SystemParams) -> "JacksonSpec":
        if params.n_servers is None:
            raise ParameterError("the Jackson representation needs a finite n_servers")
        N = params.n_servers
        alpha = np.asarray(params.alpha)
        mu = np.concatenate([[1.0], alpha * params.lam * N])
        gamma = np.concatenate([[1.0], params.beta])
        return cls(N=N, mu=mu, gamma=gamma)

    @property
    def routing(self) -> np.ndarray:
        R = self.mu.size - 1
        P = np.zeros((R + 1, R + 1))
        P[0, 1:] = self.gamma[1:]
        P[1:, 0] = 1.0
        return P

    def log_ratios(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.gamma) - np.log(self.mu)


def product_form_log_weight(n: Sequence[int], spec: JacksonSpec) -> float:
    """Log of the unnormalized stationary weight of token configuration n.

    n[0] counts busy servers, n[r] tokens at dispatcher r.  Returns -inf for
    states that cannot occur because some beta_r = 0.
    """
    n = np.asarray(n)
    if n.shape != spec.mu.shape or np.any(n < 0) or int(n.sum()) != spec.N:
        raise ParameterError(f"state {n.tolist()} is not on the simplex of total {spec.N}")
    lr = spec.log_ratios()
    total = -float(gammaln(n[0] + 1)) + n[0] * float(lr[0])
    for r in range(1, n.size):
        if n[r]:
            total += n[r] * float(lr[r])
    return total


@lru_cache(maxsize=64)
def _simplex(N: int, parts: int) -> np.ndarray:
    """All nonnegative integer vectors of length ``parts`` summing to N."""
    if parts == 1:
        return np.array([[N]], dtype=np.int64)
    blocks = []
    for first in range(N + 1):
        rest = _simplex(N - first, parts - 1)
        blocks.append(np.column_stack([np.full(len(rest), first, dtype=np.int64), rest]))
    return np.vstack(blocks)


def state_space_size(N: int, R: int) -> int:
    return math.comb(N + R, R)


def stationary_distribution(params: SystemParams) -> tuple[np.ndarray, np.ndarray]:
    """Enumerate S and return (states, probabilities); states[:, 0] = busy servers."""
    if params.nu != 0:
        raise ParameterError("token exchange breaks the product form; use the simulator")
    spec = JacksonSpec.from_params(params)
    R = params.n_dispatchers
    size = state_space_size(spec.N, R)
    if size > ENUM_LIMIT:
        raise ParameterError(f"state space has {size} states (limit {ENUM_LIMIT}); use a closed form")
    states = _simplex(spec.N, R + 1)
    lr = spec.log_ratios()
    logw = -gammaln(states[:, 0] + 1) + states[:, 0] * lr[0]
    for r in range(1, R + 1):
        with np.errstate(invalid="ignore"):
            contrib = np.where(states[:, r] > 0, states[:, r] * lr[r], 0.0)
        logw = logw + contrib
    logw = logw - logsumexp(logw)
    return states, np.exp(logw)


def blocking_exact_enum(params: SystemParams) -> float:
    """Blocking probability by brute-force summation of the product form."""
    if params.scenario is not Scenario.BLOCKING:
        raise ParameterError("enumeration applies to the blocking scenario only")
    states, probs = stationary_distribution(params)
    B = 0.0
    for r, a in enumerate(params.alpha, start=1):
        B += a * float(probs[states[:, r] == 0].sum())
    return _clamp01(B)


def erlang_b(N: int, a: float) -> float:
    """Erlang loss probability of M/M/N/N with offered load a."""
    if N < 0 or a <= 0:
        raise ParameterError("erlang_b needs N >= 0 and a > 0")
    b = 1.0
    for k in range(1, N + 1):
        b = a * b / (k + a * b)
    return b


def _log_comb(m: np.ndarray, k: int) -> np.ndarray:
    return gammaln(m + 1) - gammaln(k + 1) - gammaln(m - k + 1)


def blocking_symmetric_direct(R: int, N: int, lam: float) -> float:
    """Blocking with equal loads and uniform tokens, as a ratio of binomial-weighted sums."""
    if R < 2:
        raise ParameterError("use erlang_b for a single dispatcher")
    n = np.arange(N + 1)
    t = n * math.log(lam * N) - gammaln(n + 1)
    num = logsumexp(t + _log_comb(N + R - 2 - n, R - 2))
    den = logsumexp(t + _log_comb(N + R - 1 - n, R - 1))
    return _clamp01(math.exp(num - den))


def blocking_symmetric_recursive(R: int, N: int, lam: float) -> float:
    """Same quantity as :func:`blocking_symmetric_direct`, via the recursion in R."""
    if R < 1:
        raise ParameterError("R must be >= 1")
    # forward recursion amplifies rounding when lam > 1; run it in extended precision
    one = np.longdouble(1)
    a = np.longdouble(lam) * N
    b = one
    for k in range(1, N + 1):
        b = a * b / (k + a * b)
    for k in range(1, R):
        b = k / (N + k - a * (one - b))
    return _clamp01(float(b))


def blocking_r2_closed_form(
    N: int, lam: float, alpha: Sequence[float], beta: Sequence[float] = (0.5, 0.5)
) -> float:
    """Exact blocking for two dispatchers with arbitrary token allotment."""
    a1, a2 = map(float, alpha)
    b1, b2 = map(float, beta)
    if b1 == 0.0 or b2 == 0.0:
        # only one dispatcher ever holds tokens: an Erlang loss system plus certain loss
        a_on, a_off = (a2, a1) if b1 == 0.0 else (a1, a2)
        return _clamp01(a_off + a_on * erlang_b(N, a_on * lam * N))
    g1, g2 = a1 / (2 * b1), a2 / (2 * b2)
    if g1 < g2:
        a1, a2, g1, g2 = a2, a1, g2, g1
    if abs(g1 - g2) < DEGENERATE_TOL:
        return blocking_symmetric_direct(2, N, lam)
    log_z = (
        (N + 1) * math.log(g2 / g1)
        + log_partial_exp_sum(2 * g1 * lam * N, N)
        - log_partial_exp_sum(2 * g2 * lam * N, N)
    )
    z = math.exp(log_z)
    one_minus_z = -math.expm1(log_z)
    B = (g1 - g2) * (1.0 + (a2 / a1) * (g1 / g2) * z) / ((g1 / a1) * one_minus_z)
    return _clamp01(B)


def blocking_limit(R: int, lam: float, alpha: Sequence[float]) -> float:
    """Many-server blocking under basic JIQ: max{1 - R*min(alpha), 1 - 1/lam}."""
    a_min = min(alpha)
    return _clamp01(max(1.0 - R * a_min, 1.0 - 1.0 / lam))


def blocking_limit_r2_nonuniform(lam: float, alpha: Sequence[float], beta: Sequence[float]) -> float:
    """Many-server blocking for two dispatchers with token allotment beta."""
    a1, a2 = map(float, alpha)
    b1, b2 = map(float, beta)
    # order so that dispatcher 1 has the larger alpha/beta ratio
    if a1 * b2 < a2 * b1:
        a1, a2, b1, b2 = a2, a1, b2, b1
    # b2 > 0 here; with b1 = 0 the expression tends to 1 - a2/b2 = a1
    skew = b1 * (a1 / b1 - a2 / b2) if b1 > 0 else 1.0 - a2 / b2
    return _clamp01(max(skew, 1.0 - 1.0 / lam))


def bounding_systems(R: int, N: int, lam: float, alpha: Sequence[float]) -> tuple[float, float]:
    """Blocking of the merged 'better' and thinned 'worse' comparison systems.

    Better: dispatchers 1..R-1 merged, tokens sent there w.p. (R-1)/R.
    Worse: arrivals thinned to an equal-load system of per-server load
    min(R*alpha_R*lam, 1).
    """
    if R < 2:
        raise ParameterError("bounding systems need R >= 2")
    a_min = min(alpha)
    better = blocking_r2_closed_form(N, lam, (1.0 - a_min, a_min), ((R - 1) / R, 1.0 / R))
    lam_thin = min(R * a_min * lam, 1.0)
    admitted = min(R * a_min, 1.0 / lam)
    worse = 1.0 - admitted * (1.0 - blocking_symmetric_direct(R, N, lam_thin))
    return better, _clamp01(worse)


METHODS = ("auto", "enum", "closed-form-r2", "symmetric-direct", "symmetric-recursive", "limit")


def blocking_probability(params: SystemParams, method: str = "auto") -> tuple[float, str]:
    """Dispatch to one of the exact methods; returns (B, method used)."""
    if params.scenario is not Scenario.BLOCKING:
        raise ParameterError("exact analysis exists only for the blocking scenario")
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    R, N, lam = params.n_dispatchers, params.n_servers, params.lam
    if params.nu != 0 and method != "limit":
        raise ParameterError("no product form with token exchange (nu > 0); use the fluid or sim engines")

    if method == "auto":
        if N is None:
            method = "limit"
        elif R == 1:
            return erlang_b(N, lam * N), "erlang-b"
        elif params.is_symmetric and params.is_basic:
            method = "symmetric-direct"
        elif R == 2:
            method = "closed-form-r2"
        elif state_space_size(N, R) <= ENUM_LIMIT:
            method = "enum"
        else:
            raise ParameterError(
                f"no exact method for R={R}, N={N} with this load profile; "
                "the state space is too large to enumerate (try --method limit)"
            )

    if method == "limit":
        if R == 2 and not params.is_basic and params.nu == 0:
            return blocking_limit_r2_nonuniform(lam, params.alpha, params.beta), method
        if params.is_basic:
            return blocking_limit(R, lam, params.alpha), method
        from .fluid import fixed_point_blocking

        return fixed_point_blocking(params).blocking_B, "fluid-fixed-point"
    if N is None:
        raise ParameterError(f"method {method} needs a finite --N")
    if method == "enum":
        return blocking_exact_enum(params), method
    if method == "closed-form-r2":
        if R != 2:
            raise ParameterError("closed-form-r2 needs exactly two dispatchers")
        return blocking_r2_closed_form(N, lam, params.alpha, params.beta), method
    if not (params.is_symmetric and params.is_basic):
        raise ParameterError(f"{method} needs equal loads (alpha uniform) and uniform tokens")
    if method == "symmetric-direct":
        if R == 1:
            return erlang_b(N, lam * N), "erlang-b"
        return blocking_symmetric_direct(R, N, lam), method
    return blocking_symmetric_recursive(R, N, lam), method

