import math

import numpy as np
import pytest

from asyncgibbs import (
    EXACT,
    ConfigError,
    GaussianScalar,
    GaussianTarget,
    NetworkConfig,
    Outcome,
    UpdateMessage,
    WorkerConfig,
    build_exponential_target,
    exact_acceptance_prob,
    make_workers,
    process_update,
    random_scan_gibbs,
    run_simulated,
    run_threaded,
    worker_rng,
    worker_step,
)
from asyncgibbs.diagnostics import batch_means_se
from asyncgibbs.engine import WorkerError, _mk_workers, selection_probs, validate_topology
from asyncgibbs.gaussian import relative_frobenius_error
from oracles import exp_corr


def corr2(rho=0.5):
    return GaussianTarget(np.zeros(2), np.linalg.inv([[1.0, rho], [rho, 1.0]]))


def workers_for(model, configs, seed=0):
    return _mk_workers(model, configs, seed, 0, 1, True, 100, None)


def dense_logpdf(x):
    return -0.5 * x @ np.linalg.inv(exp_corr(8, 0.5)) @ x


def cond_moments(x, c):
    cov = exp_corr(8, 0.5)
    r = [i for i in range(8) if i != c]
    k = cov[c, r] @ np.linalg.inv(cov[np.ix_(r, r)])
    return k @ x[r], cov[c, c] - k @ cov[r, c]


# -- configuration


def test_topology_validation():
    t = build_exponential_target(4, 0.5)
    with pytest.raises(ConfigError):
        validate_topology(t, [WorkerConfig(0, (0, 1)), WorkerConfig(1, (2,))])
    with pytest.raises(ConfigError):
        validate_topology(t, [WorkerConfig(0, (0, 1, 2)), WorkerConfig(1, (2, 3))])
    with pytest.raises(ConfigError):
        validate_topology(t, [WorkerConfig(0, (0, 1, 2, 3), selection_probs={0: 0.5, 1: 0.5, 2: 0.0, 3: 0.0})])


def test_selection_probs_local_share():
    p = selection_probs((0, 1, 2), (3,), 0.4)
    assert p[3] == pytest.approx(0.4) and p[0] == pytest.approx(0.2)
    assert sum(selection_probs((0, 1), (2, 3)).values()) == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        selection_probs((0,), (1,), 1.5)


def test_network_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(0.0)
    with pytest.raises(ConfigError):
        NetworkConfig(0.5, ("uniform", 2.0, 1.0))
    with pytest.raises(ConfigError):
        NetworkConfig(0.5, ("constant", -1.0))


# -- worker step


def test_owned_step_broadcasts_to_every_peer():
    t = build_exponential_target(8, 0.5)
    ws = workers_for(t, make_workers(t, 4))
    msgs = worker_step(ws[0])
    assert len(msgs) == 3
    c = msgs[0].coord
    assert all(m.new_value is ws[0].state.values[c] for m in msgs)


def test_local_step_sends_nothing():
    t = build_exponential_target(4, 0.5)
    t.local_coords = (3,)
    cfgs = [WorkerConfig(0, (0, 1), (3,), {0: 1e-12, 1: 1e-12, 3: 1 - 2e-12}), WorkerConfig(1, (2,), (3,))]
    ws = workers_for(t, cfgs)
    assert worker_step(ws[0]) == []


def test_single_worker_matches_random_scan():
    t = build_exponential_target(3, 0.5)
    r = run_simulated(t, make_workers(t, 1), seed=5, n_steps=60000)
    ref = random_scan_gibbs(t, 60000, seed=6)
    a, b = r.traces[0], ref
    se = np.sqrt(batch_means_se(a) ** 2 + batch_means_se(b) ** 2)
    assert np.all(np.abs(a.mean(0) - b.mean(0)) < 3 * se)
    assert relative_frobenius_error(np.cov(a.T), np.cov(b.T)) < 0.08
    assert r.counters["messages_sent"] == 0


# -- acceptance


def test_acceptance_is_one_when_views_agree():
    t = build_exponential_target(8, 0.5)
    x = np.random.default_rng(1).standard_normal(8)
    state = t.new_state(list(x))
    value, desc = t.sample_conditional(state, 4, np.random.default_rng(2))
    msg = UpdateMessage(4, value, state.values[4], desc, 1, 1)
    assert exact_acceptance_prob(t, state, msg) == pytest.approx(1.0, abs=1e-12)
    same = UpdateMessage(4, state.values[4], state.values[4], GaussianScalar(3.0, 0.1), 1, 1)
    assert exact_acceptance_prob(t, state, same) == 1.0


def test_acceptance_with_stale_coordinate_matches_dense_formula():
    t = build_exponential_target(8, 0.5)
    rng = np.random.default_rng(3)
    sender = rng.standard_normal(8)
    receiver = sender.copy()
    receiver[3] += 1.3  # receiver missed an update of a neighbour
    mean, var = cond_moments(sender, 2)
    new = mean + 0.4
    desc = GaussianScalar(mean, var)
    msg = UpdateMessage(2, np.float64(new), np.float64(sender[2]), desc, 0, 1)
    moved = receiver.copy()
    moved[2] = new

    def q(v):
        return -0.5 * (math.log(2 * math.pi * var) + (v - mean) ** 2 / var)

    expect = min(1.0, math.exp(dense_logpdf(moved) - dense_logpdf(receiver) + q(receiver[2]) - q(new)))
    got = exact_acceptance_prob(t, t.new_state(list(receiver)), msg)
    assert got == pytest.approx(expect, rel=1e-10)
    assert got < 1.0


def test_process_update_outcomes():
    t = build_exponential_target(2, 0.5)
    approx_w = workers_for(t, [WorkerConfig(0, (0,)), WorkerConfig(1, (1,))])[1]
    msg = UpdateMessage(0, np.float64(7.0), np.float64(0.0), GaussianScalar(0.0, 1.0), 0, 1)
    assert process_update(approx_w, t, msg) is Outcome.ACCEPTED
    assert approx_w.state.values[0] == 7.0
    assert process_update(approx_w, t, msg) is Outcome.STALE

    exact_w = workers_for(t, [WorkerConfig(0, (0,), mode=EXACT), WorkerConfig(1, (1,), mode=EXACT)])[1]
    far = UpdateMessage(0, np.float64(6.0), np.float64(0.0), GaussianScalar(6.0, 1.0), 0, 1)
    alpha = exact_acceptance_prob(t, exact_w.state, far)
    assert alpha < 1e-6
    assert process_update(exact_w, t, far) is Outcome.REJECTED
    assert exact_w.state.values[0] == 0.0
    state = exact_w.state
    v, d = t.sample_conditional(state, 0, np.random.default_rng(0))
    gibbs = UpdateMessage(0, v, state.values[0], d, 0, 2)
    assert process_update(exact_w, t, gibbs) is Outcome.ACCEPTED


def test_shape_mismatch_is_an_error():
    t = build_exponential_target(2, 0.5)
    w = workers_for(t, [WorkerConfig(0, (0,)), WorkerConfig(1, (1,))])[1]
    with pytest.raises(WorkerError):
        process_update(w, t, UpdateMessage(0, np.zeros(3), np.zeros(3), GaussianScalar(0, 1), 0, 1))


# -- simulated transport


def test_hand_stepped_round_robin_trace():
    """Two workers, one coordinate each, everything delivered instantly, inbox drained after sampling."""
    t = corr2(0.5)
    seed = 42
    r = run_simulated(t, make_workers(t, 2), NetworkConfig(1.0), schedule="round_robin", seed=seed,
                      n_steps=6, burn_in=0)
    rngs = [worker_rng(seed, 0), worker_rng(seed, 1)]
    views = [np.zeros(2), np.zeros(2)]
    pending = [[], []]
    expect = [[], []]
    for _ in range(6):
        for w in (0, 1):
            rngs[w].random()  # coordinate selection
            other = views[w][1 - w]
            views[w][w] = 0.5 * other + math.sqrt(0.75) * rngs[w].standard_normal()
            pending[1 - w].append(views[w][w])
            for v in pending[w]:
                views[w][1 - w] = v
            pending[w] = []
            expect[w].append(views[w].copy())
    for w in (0, 1):
        assert np.allclose(r.traces[w], np.array(expect[w]), rtol=0, atol=1e-12)


def test_drop_variation_design():
    t = build_exponential_target(8, 0.5)
    ws = make_workers(t, 4, mode=EXACT)
    assert [w.owned_coords for w in ws] == [(0, 1), (2, 3), (4, 5), (6, 7)]
    r = run_simulated(t, ws, NetworkConfig(0.75), seed=1, n_steps=2000)
    c = r.counters
    assert c["messages_sent"] == 3 * c["broadcasts"]
    assert c["messages_sent"] == c["messages_delivered"] + c["messages_dropped"]
    for link in c["links"].values():
        assert link["sent"] == link["delivered"] + link["dropped"]
    assert 0.70 < c["messages_delivered"] / c["messages_sent"] < 0.80


def test_determinism_and_clock_monotonicity():
    t = build_exponential_target(8, 0.5)
    net = NetworkConfig(0.75, ("uniform", 0.0, 3.0))
    a = run_simulated(t, make_workers(t, 4, mode=EXACT), net, seed=3, n_steps=1500)
    b = run_simulated(t, make_workers(t, 4, mode=EXACT), net, seed=3, n_steps=1500)
    for x, y in zip(a.traces, b.traces):
        assert x.tobytes() == y.tobytes()
    assert a.counters == b.counters
    assert a.counters["stale"] > 0  # reordering without FIFO produces stale messages


def test_fifo_links_never_stale():
    t = build_exponential_target(8, 0.5)
    net = NetworkConfig(0.75, ("uniform", 0.0, 3.0), fifo_per_link=True)
    r = run_simulated(t, make_workers(t, 4), net, seed=3, n_steps=1500)
    assert r.counters["stale"] == 0


def test_zero_latency_on_delivery_is_synchronous_gibbs():
    """With every broadcast applied before anything else happens, all workers share one state."""
    t = build_exponential_target(8, 0.5)
    r = run_simulated(t, make_workers(t, 4, mode=EXACT), NetworkConfig(1.0), seed=4, n_steps=500,
                      drain="on_delivery", burn_in=0, reservoir_capacity=10)
    assert r.counters["rejected"] == 0
    assert r.counters["alpha_mean"] == pytest.approx(1.0, abs=1e-9)
    finals = [s.flat() for s in r.final_states]
    assert all(np.array_equal(finals[0], f) for f in finals)


def test_exact_stationarity_3d_with_latency():
    t = build_exponential_target(3, 0.5)
    ws = make_workers(t, 3, mode=EXACT)
    r = run_simulated(t, ws, NetworkConfig(1.0, ("geometric", 0.5)), seed=8, n_steps=40000,
                      drain="on_delivery")
    pooled = r.pooled_trace()
    se = np.sqrt(sum(batch_means_se(tr) ** 2 for tr in r.traces)) / len(r.traces)
    assert np.all(np.abs(pooled.mean(0)) < 3 * se)
    assert relative_frobenius_error(np.cov(pooled.T), t.covariance) < 0.1


def test_unknown_policies_rejected():
    t = build_exponential_target(2, 0.5)
    with pytest.raises(ConfigError):
        run_simulated(t, make_workers(t, 2), drain="never")
    with pytest.raises(ConfigError):
        run_simulated(t, make_workers(t, 2), schedule="chaotic")


def test_sampling_failure_carries_context():
    class Broken(GaussianTarget):
        def sample_conditional(self, state, c, rng):
            raise ValueError("boom")

    t = Broken(np.zeros(2), np.eye(2))
    with pytest.raises(WorkerError, match="worker 0, coordinate"):
        run_simulated(t, make_workers(t, 1), n_steps=3)


# -- threaded transport


def test_threaded_agrees_with_simulated():
    t = build_exponential_target(8, 0.5)
    th = run_threaded(t, make_workers(t, 4), seed=2, n_steps=20000, net=NetworkConfig(0.75))
    c = th.counters
    assert c["messages_delivered"] <= c["messages_sent"]
    assert all(s == 20000 for s in c["steps"])
    sim = run_simulated(t, make_workers(t, 4), NetworkConfig(0.75), seed=2, n_steps=20000, drain="on_delivery")
    a, b = th.pooled_trace(), sim.pooled_trace()
    se = np.sqrt(batch_means_se(a) ** 2 + batch_means_se(b) ** 2)
    assert np.all(np.abs(a.mean(0) - b.mean(0)) < 3 * np.sqrt(4) * se)


def test_threaded_single_worker():
    t = build_exponential_target(3, 0.5)
    a = run_threaded(t, make_workers(t, 1), seed=1, n_steps=30000).traces[0]
    b = run_simulated(t, make_workers(t, 1), seed=2, n_steps=30000).traces[0]
    se = np.sqrt(batch_means_se(a) ** 2 + batch_means_se(b) ** 2)
    assert np.all(np.abs(a.mean(0) - b.mean(0)) < 3 * se)


def test_threaded_worker_failure_aborts():
    class Broken(GaussianTarget):
        def sample_conditional(self, state, c, rng):
            raise ValueError("boom")

    t = Broken(np.zeros(2), np.eye(2))
    with pytest.raises(WorkerError):
        run_threaded(t, make_workers(t, 2), n_steps=5)
