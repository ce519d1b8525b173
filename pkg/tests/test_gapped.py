import numpy as np
import pytest

from app.services.disorder import SymmetricCoupling
from app.services.gapped import (
    AscentRule,
    GappedStateReport,
    GapProfile,
    enumerate_local_maxima,
    greedy_ascent,
    search_gapped,
    verify_gapped,
)
from app.services.model import SpinConfiguration, energy, local_fields
from app.utils.errors import ConfigError, GateViolationError
from tests import oracle


def _is_local_max(A, sigma):
    return np.all(sigma.spins() * local_fields(A, sigma) >= -1e-12)


@pytest.mark.parametrize("rule", [AscentRule.STEEPEST, AscentRule.FIRST_IMPROVEMENT])
def test_greedy_ascent_reaches_local_max(coupling10, rng, rule):
    for _ in range(20):
        start = SpinConfiguration.random(10, rng)
        top = greedy_ascent(coupling10, start, rule=rule, seed=3)
        assert _is_local_max(coupling10, top)
        assert energy(coupling10, top) >= energy(coupling10, start) - 1e-12


def test_greedy_ascent_is_deterministic(coupling10):
    start = SpinConfiguration.from_index(0x155, 10)
    assert greedy_ascent(coupling10, start, AscentRule.FIRST_IMPROVEMENT, seed=9) == greedy_ascent(
        coupling10, start, AscentRule.FIRST_IMPROVEMENT, seed=9
    )


def test_verify_gapped_counts_sites_below_gamma():
    A = SymmetricCoupling.from_array([[0.0, 1.0, 0.2], [1.0, 0.0, 0.0], [0.2, 0.0, 0.0]])
    sigma = SpinConfiguration.all_up(3)
    report = verify_gapped(A, sigma, gamma=0.5, delta=0.0)
    assert np.allclose(report.profile.values, [0.2, 1.0, 1.2])
    assert report.below_count == 1
    assert not report.verdict
    assert report.is_local_max
    assert verify_gapped(A, sigma, gamma=0.5, delta=0.34).verdict


def test_verify_gapped_validates_parameters(coupling8):
    sigma = SpinConfiguration.all_up(8)
    with pytest.raises(ConfigError):
        verify_gapped(coupling8, sigma, gamma=0.0, delta=0.0)
    with pytest.raises(ConfigError):
        verify_gapped(coupling8, sigma, gamma=0.5, delta=1.0)


def test_two_site_example_is_gapped_only_when_coupling_is_negative():
    sigma = SpinConfiguration.from_spins([1, -1])
    positive = SymmetricCoupling.from_array([[0.0, 0.7], [0.7, 0.0]])
    negative = SymmetricCoupling.from_array([[0.0, -0.7], [-0.7, 0.0]])
    assert not verify_gapped(positive, sigma, 0.5, 0.0).is_local_max
    assert verify_gapped(negative, sigma, 0.5, 0.0).verdict


def test_enumeration_matches_brute_force(coupling8):
    table = oracle.naive_energies(coupling8.entries)
    expected = set()
    for x in range(1 << 8):
        if x & 1 and all(table[x ^ (1 << i)] <= table[x] + 1e-12 for i in range(8)):
            expected.add(x)
    maxima = enumerate_local_maxima(coupling8)
    assert {config.to_index() for config, _ in maxima.maxima} == expected
    for config, profile in maxima.maxima:
        assert profile.min_gap >= -1e-12


def test_deepest_local_max_is_global_max(coupling10):
    maxima = enumerate_local_maxima(coupling10)
    table = oracle.naive_energies(coupling10.entries)
    assert energy(coupling10, maxima.deepest()) == pytest.approx(table.max(), abs=1e-9)


def test_zero_coupling_is_degenerate():
    result = enumerate_local_maxima(np.zeros((5, 5)))
    assert result.degenerate
    assert result.maxima == []


def test_enumeration_gate(monkeypatch, make_coupling):
    monkeypatch.setenv("SKLAB_LOCAL_MAXIMA_MAX_N", "8")
    with pytest.raises(GateViolationError):
        enumerate_local_maxima(make_coupling(9))


def test_search_reports_budget_and_seed(coupling10):
    report = search_gapped(coupling10, gamma=0.3, delta=0.1, budget=5_000, seed=4)
    assert report.seed == 4
    assert report.search_budget_used >= 10
    assert report.is_local_max or report.verdict
    record = report.to_record()
    assert record.config_hex == report.config.to_hex()
    again = search_gapped(coupling10, gamma=0.3, delta=0.1, budget=5_000, seed=4)
    assert again.config == report.config


def test_search_rejects_tiny_budget(coupling10):
    with pytest.raises(ConfigError):
        search_gapped(coupling10, gamma=0.3, delta=0.0, budget=5, seed=0)


def test_search_never_below_its_start(coupling10):
    start = enumerate_local_maxima(coupling10).maximin_config()
    report = search_gapped(coupling10, gamma=10.0, delta=0.0, budget=2_000, seed=1, initial=start, restarts=1)
    assert report.min_gap >= verify_gapped(coupling10, start, 10.0, 0.0).min_gap - 1e-12


@pytest.mark.slow
def test_search_approaches_exhaustive_maximin(make_coupling):
    hits = 0
    for seed in range(5):
        A = make_coupling(14, seed=100 + seed)
        maximin = enumerate_local_maxima(A).maximin()
        report = search_gapped(A, gamma=maximin, delta=0.0, budget=400_000, seed=seed)
        if report.min_gap >= 0.9 * maximin:
            hits += 1
    assert hits >= 3


def test_report_ranking_prefers_fewer_sites_below_gamma():
    sigma = SpinConfiguration.all_up(4)
    fewer_below = GappedStateReport(
        config=sigma, profile=GapProfile.from_gaps(np.array([-0.05, 1.0, 1.0, 1.0])),
        gamma=0.5, delta=0.0, verdict=False, is_local_max=False,
    )
    larger_min = GappedStateReport(
        config=sigma, profile=GapProfile.from_gaps(np.array([0.1, 0.2, 1.0, 1.0])),
        gamma=0.5, delta=0.0, verdict=False, is_local_max=True,
    )
    assert fewer_below.below_count == 1 and larger_min.below_count == 2
    assert fewer_below.rank() > larger_min.rank()
    tie = GappedStateReport(
        config=sigma, profile=GapProfile.from_gaps(np.array([0.3, 0.8, 1.0, 1.0])),
        gamma=0.5, delta=0.0, verdict=False, is_local_max=True,
    )
    assert tie.rank() > fewer_below.rank()


def test_search_rejects_zero_restarts(coupling10):
    with pytest.raises(ConfigError):
        search_gapped(coupling10, gamma=0.3, delta=0.1, budget=5_000, seed=0, restarts=0)
