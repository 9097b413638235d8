"""Continuous-time Markov chain simulation of the finite-N system.

Events are drawn Gillespie-style from the aggregate rate.  Categories are
ordered (arrival at dispatcher 1..R, service completion, token exchange)
and picked with a single uniform draw.

Random numbers come from ``numpy.random.Generator(Philox(seed))``, a
counter-based generator; replication ``i`` of :func:`replicate` is keyed
by ``base_seed + i``.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np

from .model import ParameterError, Scenario, SimStats, SystemParams

EV_TOKEN = 0  # arrival served through a token
EV_BLOCKED = 1  # arrival without token, discarded
EV_RANDOM = 2  # arrival without token, sent to a random busy server
EV_RANDOM_IDLE = 3  # arrival without token, random server was idle (token revoked)
EV_DONE = 4  # completion, next job in queue starts
EV_DONE_IDLE = 5  # completion leaving the server idle, token issued
EV_EXCHANGE = 6

EVENT_NAMES = ("token", "blocked", "random", "random_idle", "completion", "completion_idle", "exchange")

K_DISPLAY = 10
INITIAL_FIFO_CAP = 16  # power of two; ring indices use a bit mask
MAX_OCCUPANCY_CELLS = 2_000_000


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


# ---------------------------------------------------------------------------
# jitted kernels
# ---------------------------------------------------------------------------

@numba.njit(cache=True, inline="always")
def _pick(cum, u):
    r = 0
    n = cum.size
    while r < n - 1 and u >= cum[r]:
        r += 1
    return r


@numba.njit(cache=True, inline="always")
def _blocking_event(st, N, alam_cum, beta_cum, lamN, nu, rng):
    """Apply one event to st = (busy, tokens_1..tokens_R) in place."""
    R = beta_cum.size
    busy = st[0]
    tok = N - busy
    total = lamN + busy + nu * tok
    dt = rng.standard_exponential() / total
    u = rng.random() * total
    if u < lamN:
        r = _pick(alam_cum, u)
        if st[r + 1] > 0:
            st[r + 1] -= 1
            st[0] += 1
            return EV_TOKEN, r, dt
        return EV_BLOCKED, r, dt
    u -= lamN
    if u < busy:
        st[0] -= 1
        r = _pick(beta_cum, rng.random())
        st[r + 1] += 1
        return EV_DONE_IDLE, r, dt
    k = int(rng.random() * tok)
    src = 0
    while src < R - 1 and k >= st[src + 1]:
        k -= st[src + 1]
        src += 1
    dst = int(rng.random() * R)
    st[src + 1] -= 1
    st[dst + 1] += 1
    return EV_EXCHANGE, dst, dt


@numba.njit(cache=True)
def _accumulate_bins(bins, bin_width, obs, a, b):
    nb = bins.shape[0]
    k = int(a / bin_width)
    while k < nb and a < b:
        edge = (k + 1) * bin_width
        seg = min(b, edge) - a
        if seg > 0:
            for j in range(obs.size):
                bins[k, j] += obs[j] * seg
        a = edge
        k += 1


@numba.njit(cache=True)
def _run_blocking(st, N, alam_cum, beta_cum, lamN, nu, rng, t, horizon, warmup,
                  acc, acc_zero, counts, occupancy, bins, bin_width, check_every):
    """Simulate until ``horizon``; returns the final time (or -1 on a conservation failure)."""
    R = beta_cum.size
    prev = np.empty(R + 1, dtype=np.int64)
    obs = np.empty(R + 1)
    use_occ = occupancy.size > 0
    use_bins = bins.shape[0] > 0
    n_events = 0
    while True:
        for j in range(R + 1):
            prev[j] = st[j]
        kind, r, dt = _blocking_event(st, N, alam_cum, beta_cum, lamN, nu, rng)
        te = t + dt
        a = max(t, warmup)
        b = min(te, horizon)
        if b > a:
            seg = b - a
            for j in range(R + 1):
                acc[j] += prev[j] * seg
            for j in range(R):
                if prev[j + 1] == 0:
                    acc_zero[j] += seg
            if use_occ:
                idx = 0
                mult = 1
                for j in range(R):
                    idx += prev[j + 1] * mult
                    mult *= N + 1
                occupancy[idx] += seg
        if use_bins:
            for j in range(R + 1):
                obs[j] = prev[j] / N
            _accumulate_bins(bins, bin_width, obs, t, min(te, horizon))
        if te > horizon:
            for j in range(R + 1):
                st[j] = prev[j]
            return horizon
        t = te
        n_events += 1
        if t >= warmup:
            counts[2] += 1
            if kind == EV_TOKEN or kind == EV_BLOCKED:
                counts[0] += 1
                if kind == EV_BLOCKED:
                    counts[1] += 1
        if n_events % check_every == 0:
            s = 0
            for j in range(R + 1):
                s += st[j]
                if st[j] < 0:
                    return -1.0
            if s != N:
                return -1.0


@numba.njit(cache=True)
def _grow_fifo(fifo, head, qlen):
    N, cap = fifo.shape
    new = np.zeros((N, 2 * cap))
    for s in range(N):
        for k in range(qlen[s]):
            new[s, k] = fifo[s, (head[s] + k) & (cap - 1)]
        head[s] = 0
    return new


@numba.njit(cache=True, inline="always")
def _remove_token(s, owner, tok_list, tok_cnt, tok_pos, meta):
    r = owner[s]
    i = tok_pos[s]
    last = tok_list[r, tok_cnt[r] - 1]
    tok_list[r, i] = last
    tok_pos[last] = i
    tok_cnt[r] -= 1
    owner[s] = -1
    tok_pos[s] = -1
    meta[1] -= 1


@numba.njit(cache=True, inline="always")
def _add_token(s, r, owner, tok_list, tok_cnt, tok_pos, meta):
    tok_list[r, tok_cnt[r]] = s
    tok_pos[s] = tok_cnt[r]
    tok_cnt[r] += 1
    owner[s] = r
    meta[1] += 1


@numba.njit(cache=True, inline="always")
def _bump_len(len_count, old, new):
    top = len_count.size - 1
    len_count[min(old, top)] -= 1
    len_count[min(new, top)] += 1


@numba.njit(cache=True, inline="always")
def _push_job(fifo, head, qlen, s, t_arr, busy_list, busy_pos, meta, len_count):
    # capacity is restored by the caller right after a queue fills up
    cap = fifo.shape[1]
    fifo[s, (head[s] + qlen[s]) & (cap - 1)] = t_arr
    if qlen[s] == 0:
        busy_list[meta[0]] = s
        busy_pos[s] = meta[0]
        meta[0] += 1
    _bump_len(len_count, qlen[s], qlen[s] + 1)
    qlen[s] += 1
    meta[2] += 1


@numba.njit(cache=True, inline="always")
def _queueing_event(qlen, owner, tok_list, tok_cnt, tok_pos, busy_list, busy_pos, meta,
                    fifo, head, len_count, N, alam_cum, beta_cum, lamN, nu, t, rng):
    """Apply one event; returns (kind, dispatcher, server, t_arrival, t_start, dt).

    t_start < 0 when no job entered service; meta = (busy servers, tokens, jobs).
    """
    R = tok_cnt.size
    nbusy = meta[0]
    ntok = meta[1]
    total = lamN + nbusy + nu * ntok
    dt = rng.standard_exponential() / total
    te = t + dt
    u = rng.random() * total
    if u < lamN:
        r = _pick(alam_cum, u)
        if tok_cnt[r] > 0:
            s = tok_list[r, int(rng.random() * tok_cnt[r])]
            _remove_token(s, owner, tok_list, tok_cnt, tok_pos, meta)
            _push_job(fifo, head, qlen, s, te, busy_list, busy_pos, meta, len_count)
            return EV_TOKEN, r, s, te, te, dt
        s = int(rng.random() * N)
        if qlen[s] == 0:
            _remove_token(s, owner, tok_list, tok_cnt, tok_pos, meta)
            _push_job(fifo, head, qlen, s, te, busy_list, busy_pos, meta, len_count)
            return EV_RANDOM_IDLE, r, s, te, te, dt
        _push_job(fifo, head, qlen, s, te, busy_list, busy_pos, meta, len_count)
        return EV_RANDOM, r, s, te, -1.0, dt
    u -= lamN
    if u < nbusy:
        s = busy_list[int(rng.random() * nbusy)]
        cap = fifo.shape[1]
        head[s] = (head[s] + 1) & (cap - 1)
        _bump_len(len_count, qlen[s], qlen[s] - 1)
        qlen[s] -= 1
        meta[2] -= 1
        if qlen[s] > 0:
            return EV_DONE, -1, s, fifo[s, head[s]], te, dt
        i = busy_pos[s]
        last = busy_list[meta[0] - 1]
        busy_list[i] = last
        busy_pos[last] = i
        busy_pos[s] = -1
        meta[0] -= 1
        r = _pick(beta_cum, rng.random())
        _add_token(s, r, owner, tok_list, tok_cnt, tok_pos, meta)
        return EV_DONE_IDLE, r, s, -1.0, -1.0, dt
    k = int(rng.random() * ntok)
    src = 0
    while src < R - 1 and k >= tok_cnt[src]:
        k -= tok_cnt[src]
        src += 1
    s = tok_list[src, k]
    dst = int(rng.random() * R)
    _remove_token(s, owner, tok_list, tok_cnt, tok_pos, meta)
    _add_token(s, dst, owner, tok_list, tok_cnt, tok_pos, meta)
    return EV_EXCHANGE, dst, s, -1.0, -1.0, dt


@numba.njit(cache=True, inline="always")
def _queueing_obs(len_count, tok_cnt, meta, N, obs):
    nl = len_count.size
    for j in range(nl):
        obs[j] = len_count[j] / N
    for r in range(tok_cnt.size):
        obs[nl + r] = tok_cnt[r] / N
    obs[nl + tok_cnt.size] = meta[2] / N


@numba.njit(cache=True)
def _queueing_consistent(qlen, owner, tok_cnt, meta):
    idle = 0
    jobs = 0
    for s in range(qlen.size):
        jobs += qlen[s]
        if qlen[s] == 0:
            idle += 1
            if owner[s] < 0:
                return False
        elif owner[s] >= 0:
            return False
    tok = 0
    for r in range(tok_cnt.size):
        tok += tok_cnt[r]
    return tok == idle and meta[1] == idle and meta[0] == qlen.size - idle and meta[2] == jobs


@numba.njit(cache=True)
def _run_queueing(qlen, owner, tok_list, tok_cnt, tok_pos, busy_list, busy_pos, meta, fifo, head,
                  len_count, N, alam_cum, beta_cum, lamN, nu, rng, t, horizon, warmup,
                  acc, counts, waits, bins, bin_width, check_every):
    """Simulate until ``horizon``; returns (final time or -1, fifo)."""
    dim = acc.size
    obs = np.empty(dim)
    use_bins = bins.shape[0] > 0
    n_events = 0
    while True:
        _queueing_obs(len_count, tok_cnt, meta, N, obs)
        kind, r, s, t_arr, t_start, dt = _queueing_event(
            qlen, owner, tok_list, tok_cnt, tok_pos, busy_list, busy_pos, meta,
            fifo, head, len_count, N, alam_cum, beta_cum, lamN, nu, t, rng)
        if s >= 0 and qlen[s] == fifo.shape[1]:
            fifo = _grow_fifo(fifo, head, qlen)
        te = t + dt
        a = max(t, warmup)
        b = min(te, horizon)
        if b > a:
            for j in range(dim):
                acc[j] += obs[j] * (b - a)
        if use_bins:
            _accumulate_bins(bins, bin_width, obs, t, min(te, horizon))
        if te > horizon:
            # the sampled event falls past the horizon; it is not counted
            return horizon, fifo
        t = te
        n_events += 1
        if t >= warmup:
            counts[2] += 1
            if kind <= EV_RANDOM_IDLE:
                counts[0] += 1
                if kind != EV_TOKEN:
                    counts[3] += 1
        if t_start >= 0 and t_arr >= warmup:
            w = t_start - t_arr
            counts[4] += 1
            waits[0] += w
            waits[1] += w * w
        if n_events % check_every == 0:
            if not _queueing_consistent(qlen, owner, tok_cnt, meta):
                return -1.0, fifo


# ---------------------------------------------------------------------------
# States and single steps
# ---------------------------------------------------------------------------

@dataclass
class BlockingSimState:
    """busy (X_0) and per-dispatcher token counts (X_r); busy + sum(tokens) = N."""

    tokens: np.ndarray
    busy: int
    t: float = 0.0

    @property
    def N(self) -> int:
        return int(self.busy + self.tokens.sum())

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.busy], self.tokens]).astype(np.int64)


@dataclass
class QueueingSimState:
    """Per-server queues, token ownership and per-dispatcher idle-server lists."""

    queue_len: np.ndarray
    token_owner: np.ndarray  # dispatcher holding the server's token, -1 if busy
    token_lists: np.ndarray  # (R, N); first token_count[r] entries valid
    token_count: np.ndarray
    token_pos: np.ndarray
    busy_list: np.ndarray
    busy_pos: np.ndarray
    meta: np.ndarray  # (busy servers, tokens, jobs)
    fifo: np.ndarray  # arrival times, ring buffer per server
    head: np.ndarray
    len_count: np.ndarray
    t: float = 0.0

    @property
    def N(self) -> int:
        return int(self.queue_len.size)

    def tokens_of(self, r: int) -> set[int]:
        return set(int(s) for s in self.token_lists[r, : self.token_count[r]])

    def check(self) -> None:
        if not _queueing_consistent(self.queue_len, self.token_owner, self.token_count, self.meta):
            raise AssertionError("tokens out of sync with idle servers")
        for r in range(self.token_count.size):
            for s in self.tokens_of(r):
                if self.token_owner[s] != r:
                    raise AssertionError(f"server {s} listed at dispatcher {r} but owned elsewhere")

    def copy(self) -> "QueueingSimState":
        return QueueingSimState(**{k: (v.copy() if isinstance(v, np.ndarray) else v)
                                   for k, v in self.__dict__.items()})


@dataclass(frozen=True)
class EventRecord:
    kind: int
    dispatcher: int
    server: int = -1

    @property
    def name(self) -> str:
        return EVENT_NAMES[self.kind]


def _token_counts(N: int, beta: Sequence[float]) -> np.ndarray:
    """Largest-remainder rounding of N * beta."""
    raw = np.asarray(beta) * N
    base = np.floor(raw).astype(np.int64)
    rem = int(N - base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rem]] += 1
    return base


def initial_blocking_state(params: SystemParams, init: Optional[Sequence[float]] = None) -> BlockingSimState:
    """All servers idle with tokens split per beta, or rounded from fractions ``init`` (x_0..x_R)."""
    N = _require_N(params)
    if init is None:
        return BlockingSimState(tokens=_token_counts(N, params.beta), busy=0)
    counts = _token_counts(N, init)
    if counts.size != params.n_dispatchers + 1:
        raise ParameterError("init needs R + 1 fractions (busy, tokens per dispatcher)")
    return BlockingSimState(tokens=counts[1:], busy=int(counts[0]))


def initial_queueing_state(params: SystemParams, k_display: int = K_DISPLAY) -> QueueingSimState:
    N = _require_N(params)
    R = params.n_dispatchers
    counts = _token_counts(N, params.beta)
    owner = np.repeat(np.arange(R), counts).astype(np.int64)
    token_lists = np.zeros((R, N), dtype=np.int64)
    token_pos = np.zeros(N, dtype=np.int64)
    filled = np.zeros(R, dtype=np.int64)
    for s, r in enumerate(owner):
        token_lists[r, filled[r]] = s
        token_pos[s] = filled[r]
        filled[r] += 1
    len_count = np.zeros(k_display + 2, dtype=np.int64)
    len_count[0] = N
    return QueueingSimState(
        queue_len=np.zeros(N, dtype=np.int64),
        token_owner=owner,
        token_lists=token_lists,
        token_count=filled,
        token_pos=token_pos,
        busy_list=np.zeros(N, dtype=np.int64),
        busy_pos=np.full(N, -1, dtype=np.int64),
        meta=np.array([0, N, 0], dtype=np.int64),
        fifo=np.zeros((N, INITIAL_FIFO_CAP)),
        head=np.zeros(N, dtype=np.int64),
        len_count=len_count,
    )


def initial_state(params: SystemParams):
    if params.scenario is Scenario.BLOCKING:
        return initial_blocking_state(params)
    return initial_queueing_state(params)


def _require_N(params: SystemParams) -> int:
    if params.n_servers is None:
        raise ParameterError("simulation needs a finite n_servers")
    return params.n_servers


def _rate_tables(params: SystemParams):
    N = _require_N(params)
    lamN = params.lam * N
    alam_cum = np.cumsum(np.asarray(params.alpha) * lamN)
    beta_cum = np.cumsum(np.asarray(params.beta, dtype=float))
    return N, lamN, alam_cum, beta_cum


def step(state, params: SystemParams, rng: np.random.Generator):
    """Advance one event; returns (new state, EventRecord, sojourn time).

    The input state is left untouched.
    """
    N, lamN, alam_cum, beta_cum = _rate_tables(params)
    if isinstance(state, BlockingSimState):
        st = state.as_array()
        kind, r, dt = _blocking_event(st, N, alam_cum, beta_cum, lamN, float(params.nu), rng)
        new = BlockingSimState(tokens=st[1:].copy(), busy=int(st[0]), t=state.t + dt)
        return new, EventRecord(int(kind), int(r)), float(dt)
    new = state.copy()
    kind, r, s, _, _, dt = _queueing_event(
        new.queue_len, new.token_owner, new.token_lists, new.token_count, new.token_pos,
        new.busy_list, new.busy_pos, new.meta, new.fifo, new.head, new.len_count,
        N, alam_cum, beta_cum, lamN, float(params.nu), float(new.t), rng)
    if s >= 0 and new.queue_len[s] == new.fifo.shape[1]:
        new.fifo = _grow_fifo(new.fifo, new.head, new.queue_len)
    new.t = state.t + dt
    return new, EventRecord(int(kind), int(r), int(s)), float(dt)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def default_horizon(params: SystemParams, min_arrivals: float = 1e6, warmup_frac: float = 0.2) -> float:
    """Horizon giving ``min_arrivals`` post-warmup arrivals, and at least a few relaxation times."""
    N = _require_N(params)
    floor = 100.0 if params.scenario is Scenario.BLOCKING else 500.0
    return max(min_arrivals / (params.lam * N * (1.0 - warmup_frac)), floor)


def state_labels(params: SystemParams, k_display: int = K_DISPLAY) -> tuple[str, ...]:
    R = params.n_dispatchers
    if params.scenario is Scenario.BLOCKING:
        return ("x_0",) + tuple(f"x_{r}" for r in range(1, R + 1))
    ys = tuple(f"y_{i}" for i in range(k_display + 1)) + (f"y_gt{k_display}",)
    return ys + tuple(f"x_{r}" for r in range(1, R + 1)) + ("jobs",)


def simulate(
    params: SystemParams,
    seed: int,
    horizon: Optional[float] = None,
    warmup: Optional[float] = None,
    *,
    record_distribution: bool = False,
    bin_width: Optional[float] = None,
    init: Optional[Sequence[float]] = None,
    check_every: int = 10_000,
) -> SimStats:
    """One replication; statistics are collected on [warmup, horizon].

    ``record_distribution`` (blocking only) stores the time-weighted
    occupancy of each token configuration in ``extras['occupancy']``,
    indexed by sum_r tokens_r (N+1)**(r-1).  ``bin_width`` stores
    time-binned state averages from t = 0 in ``extras['bins']``.
    """
    N, lamN, alam_cum, beta_cum = _rate_tables(params)
    R = params.n_dispatchers
    horizon = default_horizon(params) if horizon is None else float(horizon)
    warmup = 0.2 * horizon if warmup is None else float(warmup)
    if not horizon > warmup >= 0:
        raise ParameterError("need horizon > warmup >= 0")
    rng = make_rng(seed)
    labels = state_labels(params)
    nb = int(math.ceil(horizon / bin_width)) if bin_width else 0
    bins = np.zeros((nb, len(labels)))
    extras: dict = {}
    nu = float(params.nu)

    if params.scenario is Scenario.BLOCKING:
        state = initial_blocking_state(params, init)
        st = state.as_array()
        acc = np.zeros(R + 1)
        acc_zero = np.zeros(R)
        counts = np.zeros(5, dtype=np.int64)
        if record_distribution:
            cells = (N + 1) ** R
            if cells > MAX_OCCUPANCY_CELLS:
                raise ParameterError("state space too large to record the occupancy distribution")
            occupancy = np.zeros(cells)
        else:
            occupancy = np.zeros(0)
        t_end = _run_blocking(st, N, alam_cum, beta_cum, lamN, nu, rng, 0.0, horizon, warmup,
                              acc, acc_zero, counts, occupancy, bins, float(bin_width or 1.0), check_every)
        if t_end < 0:
            raise AssertionError("busy + tokens != N during simulation")
        observed = horizon - warmup
        tavg = acc / (observed * N)
        extras["token_starved"] = acc_zero / observed
        if record_distribution:
            extras["occupancy"] = occupancy
        extras["final_state"] = st.copy()
        arrivals, blocked, events = int(counts[0]), int(counts[1]), int(counts[2])
        routed, n_waits, sw, sw2 = 0, 0, 0.0, 0.0
    else:
        q = initial_queueing_state(params)
        acc = np.zeros(len(labels))
        counts = np.zeros(5, dtype=np.int64)
        waits = np.zeros(2)
        t_end, fifo = _run_queueing(
            q.queue_len, q.token_owner, q.token_lists, q.token_count, q.token_pos, q.busy_list, q.busy_pos,
            q.meta, q.fifo, q.head, q.len_count, N, alam_cum, beta_cum, lamN, nu, rng, 0.0, horizon, warmup,
            acc, counts, waits, bins, float(bin_width or 1.0), check_every)
        if t_end < 0:
            raise AssertionError("token count diverged from the idle-server count")
        q.fifo = fifo
        observed = horizon - warmup
        tavg = acc / observed
        extras["fifo_capacity"] = int(fifo.shape[1])
        arrivals, blocked, events = int(counts[0]), 0, int(counts[2])
        routed, n_waits, sw, sw2 = int(counts[3]), int(counts[4]), float(waits[0]), float(waits[1])

    if arrivals == 0:
        raise ParameterError("horizon too short: no arrivals after warmup")
    if nb:
        widths = np.minimum(bin_width, horizon - np.arange(nb) * bin_width)
        extras["bins"] = bins / widths[:, None]
        extras["bin_width"] = float(bin_width)
    stats = SimStats(
        scenario=params.scenario,
        total_arrivals=arrivals,
        blocked_jobs=blocked,
        random_routed=routed,
        n_waits=n_waits,
        sum_wait=sw,
        sum_wait_sq=sw2,
        observed_time=observed,
        time_avg_state=tavg,
        labels=labels,
        warmup_cut=warmup,
        horizon=horizon,
        events=events,
        seeds=[int(seed)],
        extras=extras,
    )
    stats.rep_estimates = [stats.estimate]
    return stats


def _simulate_star(args):
    params, seed, horizon, warmup, kw = args
    return simulate(params, seed, horizon, warmup, **kw)


def replicate(
    params: SystemParams,
    base_seed: int,
    n_reps: int,
    horizon: Optional[float] = None,
    warmup: Optional[float] = None,
    *,
    jobs: int = 1,
    **kw,
) -> SimStats:
    """Independent replications seeded base_seed + i, merged into one SimStats."""
    if n_reps < 1:
        raise ParameterError("n_reps must be >= 1")
    tasks = [(params, base_seed + i, horizon, warmup, kw) for i in range(n_reps)]
    if jobs > 1 and n_reps > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_simulate_star, tasks))
    else:
        runs = [_simulate_star(t) for t in tasks]
    out = runs[0]
    for run in runs[1:]:
        out = out.merge(run)
    return out


def occupancy_distribution(stats: SimStats, N: int, R: int) -> dict[tuple[int, ...], float]:
    """Empirical stationary law over token configurations (busy, tokens...)."""
    occ = stats.extras["occupancy"]
    total = occ.sum()
    out = {}
    for idx in np.nonzero(occ)[0]:
        rem = int(idx)
        toks = []
        for _ in range(R):
            toks.append(rem % (N + 1))
            rem //= N + 1
        out[(N - sum(toks), *toks)] = float(occ[idx] / total)
    return out


def export_trace(params: SystemParams, seed: int, n_events: int, path: str | os.PathLike) -> None:
    """Debug trace: one CSV row per event with a short state summary."""
    rng = make_rng(seed)
    state = initial_state(params)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "event_type", "dispatcher", "server", "state"])
        for _ in range(n_events):
            state, ev, _ = step(state, params, rng)
            if isinstance(state, BlockingSimState):
                summary = " ".join(map(str, state.as_array()))
            else:
                summary = f"busy={state.meta[0]} tokens={' '.join(map(str, state.token_count))} jobs={state.meta[2]}"
            w.writerow([repr(state.t), ev.name, ev.dispatcher + 1 if ev.dispatcher >= 0 else "",
                        ev.server if ev.server >= 0 else "", summary])
