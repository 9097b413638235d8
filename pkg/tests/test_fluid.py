import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jiqlab import fluid
from jiqlab.fluid import (
    FluidBlowUp,
    exchange_rate_threshold,
    fixed_point,
    fixed_point_blocking,
    fixed_point_queueing,
    mean_wait_closed_form,
    rhs_blocking,
    rhs_queueing,
    trajectory,
)
from jiqlab.model import FluidStateBlocking, FluidStateQueueing, ParameterError, make_params, uniform

from oracles import blocking_fixed_point_scan, queueing_lambda2_scan

profile = st.lists(st.floats(0.05, 1.0), min_size=2, max_size=4)


def _norm(w):
    w = np.asarray(w, dtype=float)
    return w / w.sum()


# ---------------------------------------------------------------------------
# right-hand sides
# ---------------------------------------------------------------------------

@given(w=profile, b=profile, nu=st.floats(0, 3), lam=st.floats(0.1, 1.5), seed=st.integers(0, 2**31))
@settings(max_examples=80, deadline=None)
def test_blocking_rhs_conserves_mass(w, b, nu, lam, seed):
    R = min(len(w), len(b))
    p = make_params(lam, _norm(w[:R]), beta=_norm(b[:R]), nu=nu)
    x = np.random.default_rng(seed).dirichlet(np.ones(R + 1))
    x[1] = 0.0
    x /= x.sum()
    d = rhs_blocking(FluidStateBlocking(x), p)
    assert abs(d.d.sum()) < 1e-12
    assert np.all(d.z <= np.asarray(p.alpha) * lam + 1e-15)


@given(w=profile, nu=st.floats(0, 3), lam=st.floats(0.1, 0.95), seed=st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_queueing_rhs_conservation(w, nu, lam, seed):
    R = len(w)
    p = make_params(lam, _norm(w), nu=nu, scenario="queueing")
    rng = np.random.default_rng(seed)
    y = rng.dirichlet(np.ones(30))
    x = rng.dirichlet(np.ones(R)) * y[0]
    d = rhs_queueing(FluidStateQueueing(y, x), p)
    dy, dx = d.d[:-R], d.d[-R:]
    assert dy.sum() == pytest.approx(-d.leak, abs=1e-12)
    assert dx.sum() == pytest.approx(dy[0], abs=1e-12)
    assert d.lambda1 + d.lambda2 == pytest.approx(lam)


# ---------------------------------------------------------------------------
# fixed points
# ---------------------------------------------------------------------------

def test_basic_blocking_fixed_point():
    rep = fixed_point_blocking(make_params(0.9, (0.8, 0.2)))
    assert rep.x0_star == pytest.approx(0.36)
    assert rep.blocking_B == pytest.approx(0.6)
    assert rep.token_split == pytest.approx((0.0, 0.64))
    assert rep.z_star == pytest.approx((0.16, 0.2), abs=1e-12) or rep.z_star == pytest.approx((0.18, 0.18))


def test_blocking_fixed_point_is_stationary():
    for p in [make_params(0.9, (0.8, 0.2)), make_params(0.9, (0.7, 0.3), beta=(0.6, 0.4), nu=0.5),
              make_params(1.3, (0.5, 0.3, 0.2), nu=2.0)]:
        rep = fixed_point_blocking(p)
        d = rhs_blocking(rep.fluid_state(), p)
        assert d.max_norm < 1e-12


@given(w=profile, b=profile, nu=st.floats(0, 4), lam=st.floats(0.2, 1.5))
@settings(max_examples=100, deadline=None)
def test_blocking_fixed_point_against_scan(w, b, nu, lam):
    R = min(len(w), len(b))
    p = make_params(lam, _norm(w[:R]), beta=_norm(b[:R]), nu=nu)
    rep = fixed_point_blocking(p)
    ref = blocking_fixed_point_scan(lam, p.alpha, p.beta, nu)
    assert rep.x0_star == pytest.approx(ref, abs=2e-5)
    assert 0.0 <= rep.blocking_B <= 1.0
    assert rep.blocking_B == pytest.approx(1 - rep.x0_star / lam, abs=1e-12)


@given(w=profile, b=profile, nu=st.floats(0, 4), lam=st.floats(0.1, 0.97))
@settings(max_examples=100, deadline=None)
def test_queueing_fixed_point_against_scan(w, b, nu, lam):
    R = min(len(w), len(b))
    p = make_params(lam, _norm(w[:R]), beta=_norm(b[:R]), nu=nu, scenario="queueing")
    rep = fixed_point_queueing(p)
    ref = queueing_lambda2_scan(lam, p.alpha, p.beta, nu)
    assert rep.lambda2_star == pytest.approx(ref, abs=2e-5)
    assert rep.mean_wait_EW == pytest.approx(rep.lambda2_star / (1 - rep.lambda2_star), rel=1e-12, abs=1e-15)
    assert rep.y0_star == pytest.approx(1 - lam)


def test_queueing_fixed_point_is_stationary():
    p = make_params(0.9, (0.8, 0.2), scenario="queueing")
    rep = fixed_point_queueing(p)
    d = rhs_queueing(rep.fluid_state(K=400), p)
    assert d.max_norm < 1e-12


@pytest.mark.parametrize("a1, EW", [(0.8, 0.9642857142857143), (0.6, 0.1956521739130435)])
def test_two_dispatcher_mean_wait(a1, EW):
    p = make_params(0.9, (a1, 1 - a1), scenario="queueing")
    assert fixed_point_queueing(p).mean_wait_EW == pytest.approx(EW, abs=1e-12)
    assert mean_wait_closed_form(2, 0.9, (a1, 1 - a1))[2] == pytest.approx(EW, abs=1e-12)


@given(w=st.lists(st.floats(0.05, 1.0), min_size=1, max_size=6), lam=st.floats(0.05, 0.98))
@settings(max_examples=150, deadline=None)
def test_closed_form_matches_solver(w, lam):
    a = _norm(w)
    p = make_params(lam, a, scenario="queueing")
    r_star, l2, EW = mean_wait_closed_form(p.R, lam, p.alpha)
    rep = fixed_point_queueing(p)
    assert 0 <= r_star < p.R
    assert l2 == pytest.approx(rep.lambda2_star, abs=1e-10)
    assert EW == pytest.approx(rep.mean_wait_EW, abs=1e-9)


def test_closed_form_symmetric_is_zero():
    assert mean_wait_closed_form(3, 0.9, uniform(3))[1:] == pytest.approx((0.0, 0.0), abs=1e-15)


def test_alpha_equal_beta_gives_zero():
    rng = np.random.default_rng(5)
    for _ in range(10):
        a = rng.dirichlet(np.ones(3))
        for lam in (0.5, 0.9):
            b = fixed_point(make_params(lam, a, beta=a))
            q = fixed_point(make_params(lam, a, beta=a, scenario="queueing"))
            assert abs(b.blocking_B) <= 1e-10
            assert abs(q.mean_wait_EW) <= 1e-10


def test_exchange_threshold():
    a = (0.7, 0.2, 0.1)
    lam = 0.9
    nu_star = exchange_rate_threshold(3, lam, a)
    assert nu_star == pytest.approx(lam * (3 * 0.7 - 1) / (1 - lam))
    at = fixed_point(make_params(lam, a, nu=nu_star))
    assert abs(at.blocking_B) <= 1e-10
    below = fixed_point(make_params(lam, a, nu=0.99 * nu_star))
    assert below.blocking_B > 0
    qat = fixed_point(make_params(lam, a, nu=nu_star, scenario="queueing"))
    assert abs(qat.mean_wait_EW) <= 1e-10
    qbelow = fixed_point(make_params(lam, a, nu=0.99 * nu_star, scenario="queueing"))
    assert qbelow.mean_wait_EW > 0
    with pytest.raises(ParameterError):
        exchange_rate_threshold(2, 1.0, (0.6, 0.4))


def test_exchange_decreases_blocking_and_wait():
    prev_b, prev_w = 1.0, math.inf
    for nu in np.linspace(0, 5, 26):
        b = fixed_point(make_params(0.9, (0.7, 0.3), beta=(0.4, 0.6), nu=nu)).blocking_B
        w = fixed_point(make_params(0.9, (0.7, 0.3), beta=(0.4, 0.6), nu=nu, scenario="queueing")).mean_wait_EW
        assert b <= prev_b + 1e-12 and w <= prev_w + 1e-12
        prev_b, prev_w = b, w


def test_token_split_reporting():
    rep = fixed_point_blocking(make_params(0.9, (0.6, 0.4), beta=(0.6, 0.4)))
    assert not rep.split_unique
    assert set(rep.token_holders) == {0, 1}
    assert rep.token_mass == pytest.approx(1 - 0.9)
    d = rep.to_dict()
    assert d["token_split"] == "non-unique"
    rep = fixed_point_blocking(make_params(0.9, (0.7, 0.3), nu=1.0))
    assert rep.split_unique
    assert sum(rep.token_split) + rep.x0_star == pytest.approx(1.0)


def test_report_caller_order():
    rep = fixed_point_blocking(make_params(0.9, (0.2, 0.8)))
    assert rep.to_dict()["token_split"] == pytest.approx([0.64, 0.0])


def test_queue_length_distribution():
    rep = fixed_point_queueing(make_params(0.9, (0.8, 0.2), scenario="queueing"))
    y = rep.queue_length_distribution(2000)
    assert y.sum() == pytest.approx(1.0, abs=1e-12)
    assert y[0] == pytest.approx(0.1)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def test_figure3_long_run():
    p = make_params(0.9, (0.8, 0.2))
    tr = trajectory(p, 200.0, 0.01, sample_dt=1.0)
    x0, x1, x2 = tr.final
    assert x0 == pytest.approx(0.36, abs=1e-6)
    assert x1 == pytest.approx(0.0, abs=1e-9)
    assert x2 > 0.6
    assert tr.conservation_error() < 1e-9
    assert np.all(tr.states >= 0)


def test_random_starts_converge():
    rng = np.random.default_rng(11)
    for _ in range(20):
        R = int(rng.integers(2, 4))
        a = np.sort(rng.dirichlet(np.ones(R)))[::-1]
        b = rng.dirichlet(np.ones(R))
        p = make_params(float(rng.uniform(0.3, 1.3)), a, beta=b, nu=float(rng.choice([0.0, rng.uniform(0, 2)])))
        u0 = FluidStateBlocking(rng.dirichlet(np.ones(R + 1)))
        tr = trajectory(p, 200.0, 0.02, u0=u0, sample_dt=10.0)
        assert tr.conservation_error() < 1e-9
        assert abs(tr.final[0] - fixed_point_blocking(p).x0_star) < 1e-5


def test_queueing_trajectory_converges():
    p = make_params(0.9, (0.8, 0.2), scenario="queueing")
    tr = trajectory(p, 300.0, 0.01, sample_dt=5.0, K=200)
    rep = fixed_point_queueing(p)
    assert tr.lambda2[-1] == pytest.approx(rep.lambda2_star, abs=1e-5)
    assert tr.y()[-1, 0] == pytest.approx(1 - 0.9, abs=1e-5)
    assert tr.conservation_error() < 1e-9
    x = tr.x()
    assert np.all(x >= 0)


def _smooth_case_error(h):
    # beta = alpha, tokens never run out on [0, 2]: linear ODE with a closed-form solution
    lam = 0.5
    a = np.array([0.6, 0.4])
    p = make_params(lam, a, beta=a)
    x0 = np.array([0.2, 0.5, 0.3])
    tr = trajectory(p, 2.0, h, u0=FluidStateBlocking(x0))
    t = 2.0
    busy = lam + (x0[0] - lam) * math.exp(-t)
    tok = x0[1:] + a * (x0[0] - lam) * (1 - math.exp(-t))
    return float(np.max(np.abs(tr.final - np.concatenate([[busy], tok]))))


def test_rk4_fourth_order():
    e1, e2 = _smooth_case_error(0.2), _smooth_case_error(0.1)
    assert 13.0 < e1 / e2 < 19.0


def test_blowup_detected():
    p = make_params(0.9, (0.8, 0.2))
    with pytest.raises(FluidBlowUp):
        fluid.integrate(rhs_blocking, np.array([np.nan, 0.5, 0.5]), p, 1.0, 0.1)


def test_trajectory_csv(tmp_path):
    p = make_params(0.9, (0.8, 0.2))
    tr = trajectory(p, 1.0, 0.1)
    path = tmp_path / "t.csv"
    tr.to_csv(path, header_comment="hello")
    lines = path.read_text().splitlines()
    assert lines[0] == "# hello"
    assert lines[1] == "t,x_0,x_1,x_2"
    assert len(lines) == 2 + 11


def test_bad_step_rejected():
    with pytest.raises(ValueError):
        trajectory(make_params(0.9, (0.8, 0.2)), 1.0, 0.0)


def test_blocking_limit_consistency():
    from jiqlab.analytic import blocking_limit, blocking_limit_r2_nonuniform

    for a1 in (0.5, 0.6, 0.8, 0.95):
        for lam in (0.5, 0.9, 1.2):
            a = (a1, 1 - a1)
            assert fixed_point(make_params(lam, a)).blocking_B == pytest.approx(blocking_limit(2, lam, a), abs=1e-12)
            for b1 in (0.2, 0.5, 0.7, 0.9):
                fp = fixed_point(make_params(lam, a, beta=(b1, 1 - b1))).blocking_B
                assert fp == pytest.approx(blocking_limit_r2_nonuniform(lam, a, (b1, 1 - b1)), abs=1e-12)
