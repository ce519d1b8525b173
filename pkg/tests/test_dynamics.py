import math

import numpy as np
import pytest

from app.services.dynamics import (
    EnergyTrace,
    GlauberChain,
    ball_radius,
    empirical_distribution,
    escape_time,
    flip_probability,
    gibbs_tv_distance,
    glauber_step,
    run,
    uniform_starts,
)
from app.services.gapped import search_gapped
from app.services.model import SpinConfiguration, energy
from app.utils.errors import ConfigError


def _exit_mean_at_infinite_temperature(n: int, radius: int) -> float:
    """Expected steps for the beta = 0 distance chain to go from 0 to radius + 1"""
    size = radius + 1
    M = np.zeros((size, size))
    b = np.ones(size)
    for d in range(size):
        up, down = (n - d) / (2.0 * n), d / (2.0 * n)
        M[d, d] = up + down
        if d + 1 < size:
            M[d, d + 1] = -up
        if d > 0:
            M[d, d - 1] = -down
    return float(np.linalg.solve(M, b)[0])


def test_flip_probability_limits():
    assert flip_probability(0.0, 3.0) == 0.5
    assert flip_probability(1e6, 1.0) == 1.0
    assert flip_probability(-1e6, 1.0) == 0.0
    assert flip_probability(2.0, 1.0) == pytest.approx(1.0 / (1.0 + math.exp(-2.0)))


@pytest.mark.parametrize("beta", [0.3, 1.0, 2.5])
def test_heat_bath_satisfies_detailed_balance(coupling10, rng, beta):
    for _ in range(50):
        sigma = SpinConfiguration.random(10, rng)
        i = int(rng.integers(0, 10))
        delta = energy(coupling10, sigma.flipped(i)) - energy(coupling10, sigma)
        forward, backward = flip_probability(delta, beta), flip_probability(-delta, beta)
        assert forward / backward == pytest.approx(math.exp(beta * delta), rel=1e-12)


def test_chain_rejects_bad_beta(coupling8):
    with pytest.raises(ConfigError):
        GlauberChain(coupling8, SpinConfiguration.all_up(8), beta=-0.1)


def test_trajectory_is_reproducible_and_batch_independent(coupling10):
    start = SpinConfiguration.all_up(10)
    one = GlauberChain(coupling10, start, beta=1.0, seed=5)
    for _ in range(1000):
        glauber_step(one)
    other = GlauberChain(coupling10, start, beta=1.0, seed=5)
    other.advance(337)
    other.advance(663)
    assert one.state.config == other.state.config
    assert one.state.energy == pytest.approx(other.state.energy, abs=1e-9)


def test_cached_energy_matches_recomputation(coupling10):
    chain = GlauberChain(coupling10, SpinConfiguration.all_up(10), beta=0.7, seed=1)
    chain.advance(200_000)
    assert chain.state.energy == pytest.approx(energy(coupling10, chain.state.config), abs=1e-8)


def test_infinite_temperature_accepts_half(coupling10):
    chain = GlauberChain(coupling10, SpinConfiguration.all_up(10), beta=0.0, seed=2)
    counts = chain.advance(100_000)
    assert counts["accepted"] / 100_000 == pytest.approx(0.5, abs=0.01)


def test_run_thins_checkpoints(coupling8):
    chain = GlauberChain(coupling8, SpinConfiguration.all_up(8), beta=1.0, seed=3)
    summary = run(chain, steps=1050, thin=100)
    assert summary.checkpoints == [100 * k for k in range(1, 11)]
    assert len(summary.traces["energy"]) == 10
    assert len(summary.traces["overlap"]) == 10
    assert all(-1.0 <= v <= 1.0 for v in summary.traces["overlap"])
    assert summary.final_energy == pytest.approx(energy(coupling8, summary.final_config), abs=1e-9)
    rows = summary.rows()
    assert rows[0]["step"] == 100 and set(rows[0]) == {"step", "energy", "overlap"}


def test_run_with_custom_observer(coupling8):
    chain = GlauberChain(coupling8, SpinConfiguration.all_up(8), beta=1.0, seed=3)
    trace = EnergyTrace()
    summary = run(chain, steps=50, observers=[trace], thin=10)
    assert summary.traces == {"energy": trace.values}
    with pytest.raises(ConfigError):
        run(chain, steps=10, thin=0)


def test_ball_radius():
    assert ball_radius(0.2, 10) == 2
    assert ball_radius(0.1, 30) == 3
    with pytest.raises(ConfigError):
        ball_radius(0.5, 10)


def test_escape_rejects_point_ball(coupling10):
    with pytest.raises(ConfigError):
        escape_time(coupling10, SpinConfiguration.all_up(10), 1.0, 0.05, reps=3, cap=100)


def test_escape_mean_at_infinite_temperature(coupling10):
    reference = SpinConfiguration.all_up(10)
    stats = escape_time(coupling10, reference, beta=0.0, rho=0.2, reps=4000, cap=10**6, seed=8, n_jobs=2)
    expected = _exit_mean_at_infinite_temperature(10, 2)
    assert stats.censored_count == 0
    assert stats.mean() == pytest.approx(expected, rel=0.06)
    assert stats.median() == pytest.approx(expected, rel=0.30)
    assert min(stats.samples) >= 3


def test_escape_is_reproducible_across_workers(coupling10):
    reference = SpinConfiguration.all_up(10)
    serial = escape_time(coupling10, reference, 0.5, 0.2, reps=20, cap=10**5, seed=3, n_jobs=1)
    threaded = escape_time(coupling10, reference, 0.5, 0.2, reps=20, cap=10**5, seed=3, n_jobs=4)
    assert serial.samples == threaded.samples


def test_escape_censoring(coupling10):
    stats = escape_time(coupling10, SpinConfiguration.all_up(10), 0.0, 0.2, reps=10, cap=2, seed=0)
    assert stats.censored_count == 10
    assert stats.median() is None
    assert stats.median_lower_bound() == 2.0
    assert stats.mean() is None
    assert stats.to_record().censored_count == 10


def test_uniform_starts_are_seeded():
    assert uniform_starts(12, 3, 5) == uniform_starts(12, 3, 5)
    assert len({s.to_index() for s in uniform_starts(12, 8, 5)}) > 1


def test_empirical_distribution_counts_every_step(coupling8):
    chain = GlauberChain(coupling8, SpinConfiguration.all_up(8), beta=0.5, seed=4)
    dist = empirical_distribution(chain, 10_000)
    assert dist.counts.sum() == 10_000
    assert chain.steps_taken == 10_000
    assert chain.state.energy == pytest.approx(energy(coupling8, chain.state.config), abs=1e-9)


@pytest.mark.slow
def test_sampler_matches_gibbs_measure(make_coupling):
    A = make_coupling(4, seed=21)
    chain = GlauberChain(A, SpinConfiguration.all_up(4), beta=1.0, seed=6)
    chain.advance(10_000)
    dist = empirical_distribution(chain, 10_000_000)
    assert gibbs_tv_distance(A, 1.0, dist) <= 0.01


@pytest.mark.slow
def test_escape_slows_down_with_beta(make_coupling):
    A = make_coupling(30, seed=31)
    reference = search_gapped(A, gamma=0.5, delta=0.0, budget=200_000, seed=2).config
    warm = escape_time(A, reference, beta=1.0, rho=0.1, reps=100, cap=10**7, seed=5, n_jobs=4)
    cold = escape_time(A, reference, beta=3.0, rho=0.1, reps=100, cap=10**7, seed=5, n_jobs=4)
    assert warm.median() is not None
    assert cold.median_lower_bound() >= 10 * warm.median()
