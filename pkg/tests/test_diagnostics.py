import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from asyncgibbs import NetworkConfig, build_exponential_target, build_jacobi_target, make_workers, run_simulated
from asyncgibbs.diagnostics import (
    DiagnosticsRecord,
    OnlineMoments,
    Reservoir,
    acf,
    batch_means_se,
    diagnostic_a_summary,
    divergence_monitor,
    histogram,
    rejection_probability,
)
from asyncgibbs.engine import run_jacobi


def test_summary_all_ones():
    frac, (counts, _) = diagnostic_a_summary(np.ones(100))
    assert frac == 0.0
    assert counts[-1] == 100 and counts[:-1].sum() == 0


def test_summary_uniform():
    frac, (counts, edges) = diagnostic_a_summary(np.random.default_rng(0).random(20000))
    assert frac == pytest.approx(0.5, abs=0.02)
    assert len(counts) == 20 and len(edges) == 21


def test_summary_empty_asks_for_sampling():
    with pytest.raises(ValueError, match="diag_sample_prob"):
        diagnostic_a_summary(DiagnosticsRecord())


def test_histogram_edges_closed_at_one():
    counts, _ = histogram([0.0, 0.05, 1.0, 1.0])
    assert counts[0] == 1 and counts[1] == 1 and counts[-1] == 2


def test_rejection_probability():
    assert rejection_probability([1.0, 0.5, 0.0, 0.5]) == 0.5


def test_acf_white_noise_and_lag0():
    x = np.random.default_rng(1).standard_normal(20000)
    r = acf(x, 50)
    assert r[0] == 1.0
    assert np.all(np.abs(r[1:]) < 4 / np.sqrt(x.size))


def test_acf_ar1():
    rng = np.random.default_rng(2)
    n, phi = 200000, 0.9
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0] / np.sqrt(1 - phi**2)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    r = acf(x, 20)
    assert np.allclose(r, phi ** np.arange(21), atol=0.03)


def test_acf_errors():
    with pytest.raises(ValueError):
        acf(np.ones(100), 5)
    with pytest.raises(ValueError):
        acf(np.arange(10.0), 10)


def test_divergence_doubling():
    assert divergence_monitor((2.0**k for k in range(20)), 1024) == 10
    assert divergence_monitor(np.zeros((5, 3)), 1.0) is None


def test_divergence_stationary_vs_jacobi():
    rng = np.random.default_rng(3)
    _, flag = run_jacobi(build_exponential_target(8, 0.5), np.zeros(8), 100_000, rng, 1e6)
    assert flag is None
    _, flag = run_jacobi(build_jacobi_target(8), np.zeros(8), 10_000, rng, 1e6)
    assert flag is not None and flag <= 10_000


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 70), st.integers(1, 400), st.integers(0, 2**31))
def test_online_moments_match_two_pass(dim, n, seed):
    x = np.random.default_rng(seed).normal(3.0, 2.0, size=(n + 1, dim))
    a, b = OnlineMoments(dim), OnlineMoments(dim)
    for row in x[: n // 2]:
        a.add(row)
    for row in x[n // 2:]:
        b.add(row)
    m = a.merge(b)
    assert np.allclose(m.mean, x.mean(0), rtol=1e-10, atol=1e-12)
    assert np.allclose(m.var, x.var(0, ddof=1), rtol=1e-10, atol=1e-12)
    if m.full:
        assert np.allclose(m.cov, np.cov(x.T).reshape(dim, dim), rtol=1e-10, atol=1e-12)
    else:
        with pytest.raises(ValueError):
            m.cov


def test_reservoir_uniformity_chi2():
    n, k, reps = 50, 10, 100
    counts = np.zeros(n)
    rng = np.random.default_rng(4)
    for _ in range(reps):
        r = Reservoir(k, rng)
        for i in range(n):
            r.add(float(i))
        counts[r.array().astype(int)] += 1
    _, p = stats.chisquare(counts)
    assert p > 0.001


def test_reservoir_merge_weights_by_stream_size():
    rng = np.random.default_rng(5)
    frac = []
    for _ in range(200):
        a, b = Reservoir(20, rng), Reservoir(20, rng)
        for _ in range(900):
            a.add(0.0)
        for _ in range(100):
            b.add(1.0)
        m = a.merge(b)
        assert len(m) == 20 and m.seen == 1000
        frac.append(m.array().mean())
    assert np.mean(frac) == pytest.approx(0.1, abs=0.02)


def test_batch_means_se_iid():
    x = np.random.default_rng(6).standard_normal((100000, 2))
    assert np.allclose(batch_means_se(x), 1 / np.sqrt(100000), rtol=0.3)
    with pytest.raises(ValueError):
        batch_means_se(np.zeros(60))


def test_exact_acceptance_rate_matches_mean_alpha():
    t = build_exponential_target(8, 0.5)
    ws = make_workers(t, 4, mode="exact")
    r = run_simulated(t, ws, NetworkConfig(0.75), seed=9, n_steps=5000)
    c = r.counters
    n = c["accepted"] + c["rejected"]
    rate = c["accepted"] / n
    p = c["alpha_mean"]
    assert abs(rate - p) < 3 * np.sqrt(p * (1 - p) / n)
