import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import qmc

from safempc import gp
from safempc.battery_sim import Trajectory
from safempc.safe_bo import (
    BoConfig,
    ConstraintSpec,
    EpisodeFailedError,
    InfeasibleProposalError,
    acquisition,
    acquisition_batch,
    barrier_term,
    constraint_slack,
    performance_objective,
    propose_next,
    run_loop,
)


def traj(z, v=None, t=None, failed=False):
    z = np.asarray(z, float)
    n = len(z)
    t = np.full(n, 300.0) if t is None else np.asarray(t, float)
    v = np.full(n - 1, 4.0) if v is None else np.asarray(v, float)
    states = np.column_stack([z, np.zeros(n), t])
    return Trajectory(states, np.zeros(len(v)), v, 10.0, failed=failed)


def prior_model(mean, var, dim=1):
    return gp.fit(gp.GpDataset.empty(dim), gp.KernelConfig(var, np.ones(dim), 0.0, mean))


# -- metrics ------------------------------------------------------------------


def test_performance_objective_examples():
    assert performance_objective([traj(np.ones(11))]) == 0.0
    assert performance_objective([traj(np.zeros(11))]) == 11.0
    a, b = [0.1, 0.5, 0.9], [0.0, 0.2, 0.6]
    expected = 0.5 * ((0.81 + 0.25 + 0.01) + (1.0 + 0.64 + 0.16))
    assert performance_objective([traj(a), traj(b)]) == pytest.approx(expected, abs=1e-15)


def test_failed_episode_raises():
    with pytest.raises(EpisodeFailedError):
        performance_objective([traj(np.ones(3)), traj(np.ones(3), failed=True)])


def test_constraint_slack_examples():
    tmax = ConstraintSpec("t_max", "temperature", 318.0)
    assert constraint_slack([traj(np.ones(4), t=[300, 310, 318, 312])], tmax) == 0.0
    assert constraint_slack([traj(np.ones(5), t=[305, 311, 315, 314, 309])], tmax) == 3.0
    vmin = ConstraintSpec("vt_min", "voltage", 2.5, "lower")
    assert constraint_slack([traj(np.ones(4), v=[3.0, 2.6, 3.4])], vmin) == pytest.approx(0.1)


def brute_slack(trajs, spec):
    worst = math.inf
    for tr in trajs:
        vals = spec.values(tr)
        for k in range(len(vals)):
            s = spec.bound - vals[k] if spec.side == "upper" else vals[k] - spec.bound
            worst = s if s < worst else worst
    return worst


@settings(max_examples=100, deadline=None)
@given(data=st.data())
def test_slack_matches_double_loop_and_is_min_monotone(data):
    n_ep = data.draw(st.integers(1, 4))
    length = data.draw(st.integers(2, 15))
    side = data.draw(st.sampled_from(["upper", "lower"]))
    spec = ConstraintSpec("c", "temperature", 310.0, side)
    temps = [data.draw(st.lists(st.floats(290, 330), min_size=length, max_size=length)) for _ in range(n_ep)]
    trajs = [traj(np.ones(length), t=t) for t in temps]
    s = constraint_slack(trajs, spec)
    assert s == brute_slack(trajs, spec)
    extra = traj(np.ones(length), t=data.draw(st.lists(st.floats(290, 330), min_size=length, max_size=length)))
    assert constraint_slack(trajs + [extra], spec) <= s


def test_constraint_spec_validation():
    with pytest.raises(ValueError):
        ConstraintSpec("x", "pressure", 1.0)
    with pytest.raises(ValueError):
        ConstraintSpec("x", "voltage", math.inf)
    with pytest.raises(ValueError):
        ConstraintSpec("x", "voltage", 1.0, "middle")


# -- barrier and acquisition ---------------------------------------------------


def test_barrier_examples():
    assert barrier_term(prior_model(1.2, 0.04), [0.0], 1.0) == pytest.approx(0.0, abs=1e-15)
    assert barrier_term(prior_model(math.e, 0.5), [0.0], 0.0) == pytest.approx(1.0, abs=1e-15)
    assert barrier_term(prior_model(0.5, 0.04), [0.0], 1.0) == pytest.approx(math.log(0.3), abs=1e-15)
    assert barrier_term(prior_model(0.2, 0.04), [0.0], 1.0) == -math.inf
    assert barrier_term(prior_model(0.2, 0.04), [0.0], 1.0 + 1e-12) == -math.inf


def test_acquisition_examples():
    perf = prior_model(-3.0, 0.25)
    cons = [prior_model(0.5, 0.04), prior_model(1.2, 0.04)]
    cfg = BoConfig(n_params=1, tau=1.0, beta=1.0, acquisition_beta=2.0)
    alpha0 = -3.0 + 2.0 * 0.5
    assert acquisition([0.0], perf, cons, cfg) == pytest.approx(alpha0 + math.log(0.3) + 0.0, abs=1e-14)
    free = BoConfig(n_params=1, constrained=False)
    assert acquisition([0.0], perf, cons, free) == alpha0
    assert acquisition([0.0], perf, cons + [prior_model(0.1, 0.04)], cfg) == -math.inf


@settings(max_examples=40, deadline=None)
@given(m=st.floats(-2, 2), var=st.floats(1e-4, 1.0), beta=st.floats(0, 3))
def test_sentinel_iff_lower_bound_not_positive(m, var, beta):
    cfg = BoConfig(n_params=1, beta=beta)
    val = acquisition([0.0], prior_model(0.0, 1.0), [prior_model(m, var)], cfg)
    assert (val == -math.inf) == (m - beta * math.sqrt(var) <= 0)


def linear_1d_models():
    data = gp.GpDataset([[0.0], [0.5], [1.0]], [-1.0, 0.0, 1.0])
    perf = gp.fit(data, gp.KernelConfig(1.0, [2.0], 1e-6, 0.0))
    return perf


def test_proposal_finds_corner_of_one_dimensional_box():
    cfg = BoConfig(n_params=1, constrained=False, acquisition_beta=0.0)
    from safempc.safe_bo import Surrogate

    perf = Surrogate(linear_1d_models(), cfg)
    grid = np.linspace(cfg.theta_lo, cfg.theta_hi, 10001)[:, None]
    vals = acquisition_batch(grid, perf, [], cfg)
    corner = grid[int(np.argmax(vals)), 0]
    assert corner == cfg.theta_hi
    prop = propose_next(perf, [], cfg, np.random.default_rng(0))
    assert abs(prop.theta[0] - corner) <= 1e-3


def two_d_problem():
    cfg = BoConfig(n_params=2)
    from safempc.safe_bo import Surrogate

    rng = np.random.default_rng(1)
    x = rng.uniform(size=(8, 2))
    perf = Surrogate(gp.fit(gp.GpDataset(x, -np.sum((x - 0.7) ** 2, axis=1)),
                            gp.KernelConfig(0.5, [0.3, 0.3], 1e-4, -0.2)), cfg)
    slack = Surrogate(gp.fit(gp.GpDataset(x, 0.6 - x[:, 0]), gp.KernelConfig(0.4, [0.5, 0.5], 1e-4, 0.3)), cfg)
    return cfg, perf, [slack]


def test_proposal_beats_every_raw_sample_and_is_deterministic():
    cfg, perf, cons = two_d_problem()
    prop = propose_next(perf, cons, cfg, np.random.default_rng(42))
    again = propose_next(perf, cons, cfg, np.random.default_rng(42))
    assert np.array_equal(prop.theta, again.theta)
    raw = qmc.Sobol(2, scramble=True, seed=np.random.default_rng(42)).random_base2(11)
    vals = acquisition_batch(cfg.from_unit(raw), perf, cons, cfg)
    assert math.isfinite(prop.value)
    assert prop.value >= np.max(vals)
    assert np.all(prop.theta >= cfg.lo) and np.all(prop.theta <= cfg.hi)
    assert prop.value == acquisition(prop.theta, perf, cons, cfg)


def test_all_infeasible_falls_back_to_incumbent():
    cfg = BoConfig(n_params=2, n_candidates=64)
    perf = prior_model(0.0, 1.0, 2)
    cons = [prior_model(-1.0, 0.1, 2)]
    prop = propose_next(perf, cons, cfg, np.random.default_rng(0), incumbent=np.array([0.5, -0.5]))
    assert prop.stalled and np.array_equal(prop.theta, [0.5, -0.5])
    with pytest.raises(InfeasibleProposalError):
        propose_next(perf, cons, cfg, np.random.default_rng(0))


# -- the loop on a cheap synthetic scenario --------------------------------------


class QuadraticScenario:
    """Two weights; SOC deficit grows away from (2, 2), temperature rises with the first weight."""

    constraints = (ConstraintSpec("t_max", "temperature", 318.0),)

    def __init__(self, fail_above=None):
        self.fail_above = fail_above

    def run_episodes(self, theta, rng, n):
        trajs, ics = [], []
        for _ in range(n):
            t0 = float(rng.uniform(300, 305))
            deficit = 0.1 + 0.02 * float(np.sum((theta - 2.0) ** 2))
            z = np.full(11, max(1.0 - math.sqrt(deficit / 11.0), 0.0))
            temps = np.full(11, t0 + 2.0 * float(theta[0]))
            failed = self.fail_above is not None and theta[1] > self.fail_above
            trajs.append(traj(z, t=temps, failed=failed))
            ics.append({"t0": t0})
        return trajs, ics


def small_cfg(**kw):
    base = dict(n_params=2, n_iterations=8, n_initial_conditions=2, n_candidates=256, seed=3)
    base.update(kw)
    return BoConfig(**base)


def test_single_iteration_is_theta_zero():
    hist = run_loop(small_cfg(n_iterations=1), QuadraticScenario())
    assert len(hist) == 1
    assert np.array_equal(hist.records[0].theta, np.zeros(2))


def test_loop_is_deterministic_and_grows_by_one():
    seen = []
    a = run_loop(small_cfg(), QuadraticScenario(), seen.append)
    b = run_loop(small_cfg(), QuadraticScenario())
    assert [r.iteration for r in seen] == list(range(1, 9))
    for ra, rb in zip(a.records, b.records):
        assert np.array_equal(ra.theta, rb.theta) and ra.g0 == rb.g0 and ra.slacks == rb.slacks
    for k in range(1, len(a) + 1):
        assert a.dataset("g0").n == len(a) and a.dataset("t_max").n == len(a)


def test_incumbent_is_monotone_and_safe():
    hist = run_loop(small_cfg(n_iterations=10), QuadraticScenario())
    best = math.inf
    for k in range(1, len(hist) + 1):
        sub = type(hist)(hist.config, hist.constraints, hist.records[:k])
        idx = sub.best_safe_index
        assert idx is not None
        assert not sub.records[idx].violated
        assert sub.records[idx].g0 <= best
        best = sub.records[idx].g0


def test_safe_loop_violates_less_than_unconstrained():
    safe = run_loop(small_cfg(n_iterations=12), QuadraticScenario())
    free = run_loop(small_cfg(n_iterations=12, constrained=False), QuadraticScenario())
    assert safe.violation_fraction <= free.violation_fraction


def test_failures_get_penalized_observations():
    hist = run_loop(small_cfg(n_iterations=10, constrained=False), QuadraticScenario(fail_above=1.0))
    failed = [r for r in hist.records if r.failed]
    assert failed, "scenario should produce failures"
    for r in failed:
        before = [q for q in hist.records if q.iteration < r.iteration and not q.failed]
        assert r.g0 == pytest.approx(1.05 * max(q.g0 for q in before))
        obs = np.array([q.slacks["t_max"] for q in before])
        assert r.slacks["t_max"] == pytest.approx(obs.min() - obs.std())


def test_failure_at_theta_zero_is_fatal():
    with pytest.raises(EpisodeFailedError):
        run_loop(small_cfg(), QuadraticScenario(fail_above=-1.0))


def test_bo_config_validation():
    for bad in (dict(beta=-1), dict(tau=0), dict(n_iterations=0), dict(n_initial_conditions=0),
                dict(theta_lo=1, theta_hi=1)):
        with pytest.raises(ValueError):
            BoConfig(**bad)
